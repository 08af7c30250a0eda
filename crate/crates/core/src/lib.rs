pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod eval;
pub mod lm;
pub mod pipeline;
pub mod quantizer;
pub mod raster;
pub mod sampler;
pub mod sequence;
pub mod svg;
pub mod template;
pub mod tokenizer;
