pub mod baserate;
pub mod cli;
pub mod domain;
pub mod pipeline;
pub mod scoring;
pub mod surprise;
pub mod synthetic;
