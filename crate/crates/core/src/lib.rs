#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hgre;
pub mod metrics;
pub mod mlfie;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod recsys;
pub mod refine;
pub mod rng;
pub mod seqgen;
pub mod tensor;
pub mod train;
