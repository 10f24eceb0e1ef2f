pub mod dedup;
pub mod doc;
pub mod filter;
pub mod ingest;
pub mod pack;
pub mod tokenizer;
