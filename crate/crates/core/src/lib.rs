#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod baselines;
pub mod bnn;
pub mod candidates;
pub mod env;
pub mod error;
pub mod gp;
pub mod harness;
pub mod ledger;
pub mod metrics;
pub mod oracle;
pub mod seed;
pub mod slicesim;
pub mod stage1;
pub mod stage2;
pub mod stage3;

pub use error::{Error, Result};
