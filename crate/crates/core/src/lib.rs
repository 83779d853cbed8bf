pub mod cache;
pub mod canonical;
pub mod cost;
pub mod gateway;
pub mod ingest;
pub mod par;
pub mod relevance;
pub mod schema;
pub mod evaluation;
pub mod executor;
pub mod lilpro;
pub mod pareto;
