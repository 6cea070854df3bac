pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod retrieval;
pub mod synthetic;
pub mod trainer;
