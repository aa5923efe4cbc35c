//! Client-server deployment: wire codecs, 8-bit activation payloads, a
//! virtual-clock network model, and the session state machines.

mod netsim;
mod quant;
mod session;
mod socket;
mod wire;

pub use netsim::{Delivery, LinkStats, NetworkProfile, NetworkSim, Transfer};
pub use quant::{dequantize8, quantize8, QuantizedTensor};
pub use session::{
    run_session, simulate_session, standalone_continuation, Client, CommitRecord, CycleAccounting, Link, Server,
    SessionConfig, SessionMetrics, SessionOutcome, SimLink,
};
pub use socket::{socket_session, SocketLink};
pub use wire::{
    decode_draft, encode_ack, encode_draft, feed_from_blocks, read_message, BootstrapMessage, PayloadLayout,
    VerifyMessage, MAX_TOKEN, MSG_ACK, MSG_BOOTSTRAP, MSG_DRAFT, MSG_VERIFY, ROOT_PARENT,
};
