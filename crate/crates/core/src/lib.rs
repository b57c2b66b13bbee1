//! Three-stage reasoning distillation (recall, analyze, summarize) with
//! iterative DPO self-reflection, on a small built-in student model.

// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod corpus;
pub mod harness;
pub mod reflection;
pub mod student;
pub mod teacher;
