//! Shared oracle code for the integration suites: straight-line scalar
//! re-implementations of the fused-attention and group-iteration units, a
//! brute-force metric evaluator, and closed-form loss/schedule references.
//! Everything here deliberately avoids the library's tensor ops so that a
//! bug in the engine cannot hide in the reference path.
#![allow(dead_code)]

pub mod reflosses;
pub mod refmetrics;
pub mod refnet;
