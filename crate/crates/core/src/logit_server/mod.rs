//! Remote logit providers: a framed-JSON request/response protocol, a
//! reference server that replays recorded traces, and the matching client.

mod client;
pub mod protocol;
mod server;

pub use client::{RemoteProvider, DEFAULT_TIMEOUT};
pub use server::{RunningServer, Session, TraceBackend};
