//! Packetized streaming inference, its wire protocol and the last-packet
//! latency benchmark.

mod bench;
pub mod protocol;
mod server;
mod session;

pub use bench::{bench, percentile, BenchConfig, Clock, StreamRecord, StreamStats, StreamSummary, Transport};
pub use server::{Server, ServerHandle, StreamClient};
pub use session::{packetize, stream_utterance, FeedOutput, FinalOutput, Packet, StreamSession};

use thiserror::Error;

use crate::frontend::FrontendError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("not streamable: model has unbounded lookahead")]
    NotStreamable,
    #[error("packet loss on stream {stream_id}: expected seq {expected}, got {got}")]
    PacketLoss { stream_id: u32, expected: u32, got: u32 },
    #[error("stream already finalized")]
    Finalized,
    #[error("packet for stream {got} sent to session {expected}")]
    WrongStream { expected: u32, got: u32 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("bench: {0}")]
    Bench(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
