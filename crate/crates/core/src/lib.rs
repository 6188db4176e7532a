//! Normalized random measures built from generalized gamma completely random
//! measures: Levy machinery, the T^{N,K} normalizing integrals, marginal and
//! conditional posterior schemes, a slice sampler for mixtures, dependence
//! operators and their moment formulas.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dependency_ops;
pub mod levy_core;
pub mod log_concave;
pub mod moments;
pub mod ngg_posterior;
pub mod quadrature;
pub mod slice_sampler;
pub mod special_math;
pub mod stats;
pub mod tak;
pub mod verify;
