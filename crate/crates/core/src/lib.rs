pub mod autodiff;
pub mod fit;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod net;
pub mod rng;
pub mod tasks;
pub mod tensor;
