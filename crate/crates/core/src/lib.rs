//! Budget-constrained dual control: set-membership identification, shrinkage
//! prediction, robust planning and rollout verification, glued together by a
//! receding-horizon commit rule with an exploration budget.

pub mod constraints;
pub mod engine;
pub mod error;
pub mod linprog;
pub mod models;
pub mod planners;
pub mod racing;
pub mod sampling;
pub mod seeding;
pub mod shrinkage;
pub mod smid;
pub mod verify;

pub use error::{Error, Result};
