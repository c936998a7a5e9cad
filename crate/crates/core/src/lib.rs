pub mod distill;
pub mod ehr;
pub mod eval;
pub mod kv;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tensor;
