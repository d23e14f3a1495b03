// `!(x > 0.0)` style checks are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod animator;
pub mod autodiff;
pub mod cli;
pub mod clipspace;
pub mod diffrender;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod mappers;
pub mod morphable;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod texgen;

pub use error::{Error, Result};
