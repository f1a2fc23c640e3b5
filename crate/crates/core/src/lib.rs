//! Zero-cost proxy discovery for vision transformers.
//!
//! Proxies are small expression trees over per-layer network statistics
//! (weights, gradients, activations). They are scored by how well they rank
//! architectures against ground-truth accuracies, evolved, and then used to
//! pick architectures without training.

pub mod arch;
pub mod bench;
pub mod evolution;
pub mod metrics;
pub mod proxy;
pub mod rng;
pub mod search;
pub mod sim;
pub mod stats;
pub mod tensor;
