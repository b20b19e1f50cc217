//! Facial emotion recognition engine built around the ResMoNet
//! architecture: tensor math, model graphs, efficiency analysis, the image
//! pipeline, training, runtime profiling and expert usability scoring.

pub mod analyzer;
pub mod expert;
pub mod graph;
pub mod profiler;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod vision;

pub use graph::{ModelGraph, WeightStore};
pub use tensor::{Tensor, TensorError};

/// Emotion classes in output order.
pub const EMOTIONS: [&str; 7] = [
    "anger",
    "disgust",
    "fear",
    "happiness",
    "sadness",
    "surprise",
    "neutral",
];
