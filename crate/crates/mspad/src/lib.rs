pub mod analyze;
pub mod datamodel;
pub mod fcn;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod protocols;
pub mod report;
pub mod synth;
pub mod tensorio;
pub mod train;
