//! Deployment compiler for integer-quantized networks on a configurable
//! heterogeneous microcontroller.

pub mod backend;
pub mod ir;
pub mod frontend;
pub mod kernels;
pub mod memalloc;
pub mod pipeline;
pub mod sim;
pub mod target;
pub mod tileflow;
pub mod zoo;
