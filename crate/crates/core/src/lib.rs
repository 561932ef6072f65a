//! Deterministic, virtual-time model of a GPU-portable distributed sparse
//! linear algebra stack.
//!
//! The layers, bottom up:
//!
//! * [`costmodel`]: cost parameters, per-rank clocks and the event log.
//! * [`exec`]: host/device execution spaces, streams, lazily mirrored buffers.
//! * [`transport`]: simulated ranks exchanging messages.
//! * [`starforest`]: star-forest graphs with analyzed broadcast/reduce plans.
//! * [`vec`], [`mat`]: distributed vectors and CSR matrices.
//! * [`grid`]: 1D/2D structured grids, ghost exchange, interpolation.
//! * [`solve`]: Krylov methods, geometric multigrid, Newton.
//! * [`bench`]: the benchmark drivers behind the `bench` binary.

pub mod bench;
pub mod costmodel;
pub mod error;
pub mod exec;
pub mod grid;
pub mod kernels;
pub mod mat;
pub mod solve;
pub mod starforest;
pub mod transport;
pub mod vec;

pub use error::{Error, Result};
