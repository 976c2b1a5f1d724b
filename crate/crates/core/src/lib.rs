pub mod analysis;
pub mod basis;
pub mod dg;
pub mod jet;
pub mod kernels;
pub mod mesh;
pub mod polys;
pub mod timestep;
pub mod relations;
