pub mod config;
pub mod corpus;
pub mod curation;
pub mod eval;
pub mod export;
pub mod gateways;
pub mod jsonl;
pub mod orchestrator;
pub mod pipeline;
pub mod sampler;
pub mod sim;
pub mod testing;
pub mod text;
