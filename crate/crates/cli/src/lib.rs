pub mod commands;
pub mod config;
pub mod corpus_io;
pub mod desk;
pub mod outputs;
