//! Engine for an agent that grows its own tool registry while solving tasks.

pub mod backend;
pub mod evaluator;
pub mod executor;
pub mod fixtures;
pub mod forge;
pub mod optimizer;
pub mod prompts;
pub mod registry;
pub mod scoring;
pub mod workflow;
pub mod workspace;
