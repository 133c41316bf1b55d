//! Wide-area file synchronization: rsync-style delta transfer over a
//! rate-controlled reliable UDP transport, with optional Blowfish
//! encryption and a throughput benchmark harness.

pub mod bench;
pub mod cipher;
pub mod par;
pub mod session;
pub mod sync;
pub mod transport;
