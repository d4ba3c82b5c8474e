//! Episode server for human play. Clients speak JSON over a WebSocket; the
//! server runs the environment and the condition's observation pipeline and
//! logs each finished episode as a demonstration.

pub mod log;
pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{ActionSpec, ClientMessage, ErrorCode, Observation, RenderHints, ServerMessage, StartRequest};
pub use session::{BridgeConfig, BridgeError, Reply, SessionManager};
