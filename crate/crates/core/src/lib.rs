//! Differentially private in-context learning.
//!
//! Ensemble responses from private demonstrations are aggregated with
//! differentially private clustering ([`dpm`]) or keyword selection, and the
//! final answer is produced from public data only ([`aggregation`]). The
//! [`accountant`] tracks the privacy cost of every mechanism in a run via the
//! replayable [`ledger`].

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod aggregation;
pub mod backend;
pub mod data;
pub mod dpm;
pub mod ledger;
pub mod mechanisms;
pub mod metrics;
pub mod mia;
pub mod pipeline;
pub mod prompts;
pub mod rng;
pub mod text;
