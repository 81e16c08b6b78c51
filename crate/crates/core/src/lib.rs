//! Robust expected-utility maximization on finite event-tree markets.
//!
//! The optimal terminal wealth under a convex set of priors is obtained from
//! a dual problem over martingale measures and priors, then replicated by a
//! self-financing strategy and checked against optimality conditions.

pub mod dual;
pub mod ext;
pub mod lp;
pub mod market;
pub mod measures;
pub mod model;
pub mod pipeline;
pub mod polytope;
pub mod primal;
pub mod report;
pub mod utility;
pub mod verify;

pub use ext::ExtReal;
