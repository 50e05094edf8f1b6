//! Meta-learned local update rules for networks of vector-state neurons and
//! synapses, trained to recall past character snippets.

pub mod autodiff;
pub mod baseline;
pub mod corpus;
pub mod harness;
pub mod kernels;
pub mod network;
pub mod optimizer;
pub mod trainer;
