//! Semantic-constraint grounding and closed-loop execution for tabletop
//! manipulation.

pub mod geometry;
pub mod mask;
pub mod observation;
pub mod reasoner;
pub mod refine;
pub mod kinematics;
pub mod mppi;
pub mod sim;
pub mod executor;
