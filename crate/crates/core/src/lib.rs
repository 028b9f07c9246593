//! Deterministic simulator for compressed DNN inference on an energy-harvesting
//! microcontroller: Q15 arithmetic, a costed vector accelerator, volatile and
//! non-volatile memory, block-circulant FC layers, a ping-pong dataflow engine
//! and intermittent execution with checkpointing.

pub mod accel_sim;
pub mod bcm_kernel;
pub mod fxp;
pub mod inference;
pub mod intermittent;
pub mod memory_sim;
pub mod model;
