pub mod data;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod retrieval;
pub mod rng;
pub mod autodiff;
pub mod model;
pub mod tape;
pub mod trainer;
