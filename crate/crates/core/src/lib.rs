//! Turns CVE patch records into paired vulnerable/fixed Rust samples,
//! collects "assume a vulnerability" analysis reports from language-model
//! backends, splits them with greedy diverse selection, exports fine-tuning
//! datasets and scores classification rounds.

pub mod corpus;
pub mod finetune;
pub mod gateway;
pub mod metrics;
pub mod par;
pub mod prompt;
pub mod select;
pub mod pipeline;
