pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod evalsuite;
pub mod layout;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod targets;
pub mod tensor;
pub mod training;
pub mod visibility;
