pub mod certify;
pub mod engine;
pub mod graphs;
pub mod harness;
pub mod mixing;
pub mod objectives;
