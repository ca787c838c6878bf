//! Simulation lab for contextual bandits with user-triggered supervision.
//!
//! A learner picks actions for contexts; the user either returns a reward or
//! reveals the action they would have preferred, together with a
//! dissimilarity row over all actions. Learners maximize reward subject to
//! staying close to the user's preferences in expectation.
//!
//! Modules, bottom-up:
//! - [`protocol`]: instances, feedback, the environment step and validation.
//! - [`envs`]: instance generators.
//! - [`oracle`]: exact expectations, the constrained optimum, regret.
//! - [`efbo`]: explore-first learner with a per-blend saddle-point solve.
//! - [`estimators`]: constraint estimators and shrinking policy sets.
//! - [`exp4`]: exponential-weights base learner.
//! - [`corral`]: master over one base learner per blend weight.
//! - [`harness`]: configs, replicated runs, CSV traces, fits, trade-off sweep.

pub mod corral;
pub mod efbo;
pub mod envs;
pub mod error;
pub mod estimators;
pub mod exp4;
pub mod harness;
pub mod oracle;
pub mod protocol;
pub mod sampling;

pub use error::{CbusError, Result};
