pub mod domain;
pub mod elicitation;
pub mod lm;
pub mod metrics;
pub mod persona;
pub mod pool;
pub mod predictor;
pub mod session;
