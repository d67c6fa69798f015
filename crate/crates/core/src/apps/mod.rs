//! Applications built on the runtime, each with a conventional and a
//! decoupled variant.

pub mod cg;
pub mod grid;
pub mod particles;
pub mod synthetic;
pub mod wordcount;
pub mod workload;
