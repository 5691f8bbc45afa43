pub mod data;
pub mod eval;
pub mod mesh;
pub mod predict;
pub mod serve;
pub mod train;
