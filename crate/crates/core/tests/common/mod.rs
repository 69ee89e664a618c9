//! Suites shared by the integration tests and the acceptance report.
#![allow(dead_code)]

pub mod augment;
pub mod experiment;
pub mod grad;
pub mod oracle;
pub mod pipeline;
pub mod protocol;
pub mod ssl;
