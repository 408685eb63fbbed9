//! Treemap-image pipeline for expression matrices: a functional-annotation
//! hierarchy drives a frozen treemap geometry, per-sample images feed a
//! small convolutional classifier, and strong feature-map activations are
//! projected back to a ranked list of contributory genes.

pub mod attribution;
pub mod cnn;
pub mod eval;
pub mod expr;
pub mod hierarchy;
pub mod pipeline;
pub mod render;
pub mod treemap;
pub mod util;
