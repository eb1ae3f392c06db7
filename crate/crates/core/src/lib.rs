pub mod docstore;
pub mod telemetry;
pub mod wrangler;
pub mod neural;
pub mod fridgesim;
pub mod orchestrator;
pub mod pipelines;
pub mod cli;
