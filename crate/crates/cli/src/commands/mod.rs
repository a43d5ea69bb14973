pub mod corpus;
pub mod eval;
pub mod inspect;
pub mod mel;
pub mod sweep;
pub mod synth;
pub mod train;
