//! Core algorithms for a neural-symbolic-regression laboratory.
//!
//! The crate is `no_std` (it needs `alloc`) and contains everything that is
//! pure computation:
//!
//! * [`expr`]: expression trees, the token vocabulary, prefix
//!   (de)serialization, constant stripping and canonical keys.
//! * [`datagen`]: the synthetic expression distribution, constant injection
//!   and dataset sampling.
//! * [`fitting`]: BFGS constant fitting plus the R², NMSE and MSE metrics.
//! * [`policy`]: the next-token distribution contract and the in-process
//!   reference backends (template memory and prompt splicing).
//! * [`decoding`]: beam search and MCTS decoding with constant fitting.
//! * [`gvs`]: the verified-subtree feedback loop and its candidate pool.
//! * [`audit`]: reproduction checks, test-set construction and reports.
//! * [`theory`]: last-token prediction, the Boolean-formula reduction and the
//!   PAC self-verification simulator.
//!
//! File formats, the external-model adapter and the command line live in the
//! companion `srlab` crate.
#![no_std]
// `!(a < b)` is how NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod audit;
pub mod datagen;
pub mod decoding;
pub mod expr;
pub mod fitting;
pub mod gvs;
pub(crate) mod math;
pub mod policy;
pub mod rng;
pub mod theory;

pub use datagen::{Dataset, GenConfig, Interval};
pub use expr::{BinaryOp, Expr, ExprError, Token, UnaryOp, Vocabulary};
