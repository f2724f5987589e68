pub mod apply;
pub mod eval;
pub mod evolve;
pub mod gen_data;
pub mod resampler;
pub mod solve;
pub mod train;
