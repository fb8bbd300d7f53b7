//! Moving parameters between clients and server: the `TensorBlob`
//! encoding, framed wire messages, two interchangeable links (in-process
//! channels and TCP) and the round protocol that runs over either.

mod blob;
mod link;
mod session;
mod wire;

pub use blob::{decode_params, encode_params, MAGIC as BLOB_MAGIC, VERSION as BLOB_VERSION};
pub use link::{in_process, ClientLink, InProcessClient, InProcessServer, ServerLink, TcpClientLink, TcpServerLink};
pub use session::{
    run_client, run_in_process, run_tcp_loopback, serve_rounds, ClientSummary, Direction, ServerOptions,
    TranscriptEntry,
};
pub use wire::{decode_frames, read_frame, write_frame, Message, MessageKind, RoundReport, WireMessage, MAX_FRAME_LEN};

use std::time::Duration;

/// Default receive timeout for a round.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
