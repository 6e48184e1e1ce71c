pub mod clock;
pub mod corpus;
pub mod obfuscator;
pub mod stats;
pub mod text;
pub mod timing;
pub mod topics;
pub mod mockengine;
pub mod querylog;
pub mod sidechannel;
pub mod adversary;
pub mod evaluation;
pub mod world;
pub mod sim;
pub mod config;
