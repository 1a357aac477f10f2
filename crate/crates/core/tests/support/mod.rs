#![allow(dead_code)]

pub mod grad;
pub mod metric_cases;
pub mod oracle;
