pub mod constraints;
pub mod error;
pub mod losses;
pub mod model;
pub mod multipliers;
pub mod par;
pub mod protection;
pub mod prox;
pub mod diagnostics;
pub mod baseline;
pub mod orchestrator;
pub mod experiments;
