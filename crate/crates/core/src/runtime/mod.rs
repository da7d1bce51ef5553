//! Offload runtime: virtual pointers, an asynchronous command queue over a
//! simulated accelerator, and a zero-copy host device.

mod config;
mod queue;
mod vptr;

use thiserror::Error;

pub use config::{DeviceConfig, DeviceKind};
pub use queue::{
    bytes_to_f32, f32_to_bytes, host_buffer, read_f32, Command, CommandQueue, DeviceKernel,
    FnKernel, HostBuffer, TransferStats,
};
pub use vptr::VirtualPtr;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("allocation {0} used after free")]
    UseAfterFree(u32),
    #[error("unknown allocation reference {0}")]
    UnknownRef(u32),
    #[error("access of {len} bytes at offset {offset} exceeds allocation {reference} of {size} bytes")]
    OutOfBounds {
        reference: u32,
        offset: u64,
        len: u64,
        size: u64,
    },
    #[error("allocation reference space exhausted")]
    OutOfRefs,
    #[error("pointer arithmetic overflow: {ptr:#x} + {delta}")]
    ArithmeticOverflow { ptr: u64, delta: u64 },
    #[error("kernel `{kernel}` takes {expected} arguments, got {got}")]
    Arity {
        kernel: String,
        expected: usize,
        got: usize,
    },
    #[error("allocation size {0} outside 1..2^32")]
    BadSize(u64),
    #[error("free of interior pointer {0:#x}")]
    PartialFree(u64),
}

/// Creates a queue for `cfg`.
pub fn create_queue(cfg: DeviceConfig) -> CommandQueue {
    CommandQueue::new(cfg)
}
