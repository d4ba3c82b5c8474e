//! Wire format. Every message is a JSON text frame carrying `"v"` and a
//! `"type"` tag.

use std::path::PathBuf;

use ase_core::harness::EpisodeMetrics;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Start(StartRequest),
    Action { session: Uuid, action: ActionSpec },
    Label { session: Uuid, task: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRequest {
    /// `grid_nav` or `tilt_lander`.
    pub env: String,
    pub condition: String,
    /// Root seed; the server default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Episode id; the next free id when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<u64>,
    /// Fitted user-model parameters for `ase`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    /// JSON file holding either a parameter array or an object with `theta_hat`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_file: Option<PathBuf>,
    /// Adds ground-truth fields to `render_hints`.
    #[serde(default)]
    pub debug: bool,
}

impl StartRequest {
    pub fn new(env: &str, condition: &str) -> Self {
        Self {
            env: env.into(),
            condition: condition.into(),
            seed: None,
            episode: None,
            theta: None,
            theta_file: None,
            debug: false,
        }
    }
}

/// An action by index or by name (`turn_left`, `fire_right`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionSpec {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    Nav {
        goal: [usize; 2],
        /// Names of the mentioned objects (empty when nothing is mentioned).
        objects: Vec<String>,
        object_ids: Vec<usize>,
    },
    Lander {
        indicator_angle: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderHints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    /// Every placement of every mentioned object.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mentioned_cells: Option<Vec<[usize; 2]>>,
    /// Debug only: the user's true pose `[x, y, heading]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<[usize; 3]>,
    /// Debug only: the lander's true angle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_angle: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    UnsupportedVersion,
    UnknownEnv,
    UnknownCondition,
    UnknownSession,
    ExpiredSession,
    IllegalAction,
    EpisodeOver,
    MissingModel,
    LabelNotExpected,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame {
        v: u32,
        session: Uuid,
        condition: String,
        t: usize,
        observation: Observation,
        render_hints: RenderHints,
    },
    Summary {
        v: u32,
        session: Uuid,
        env: String,
        condition: String,
        root_seed: u64,
        episode: u64,
        metrics: EpisodeMetrics,
        /// Whether the server waits for a `label` message before logging.
        label_prompt: bool,
    },
    Labeled {
        v: u32,
        session: Uuid,
        task: String,
    },
    Error {
        v: u32,
        code: ErrorCode,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<Uuid>,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>, session: Option<Uuid>) -> Self {
        ServerMessage::Error {
            v: PROTOCOL_VERSION,
            code,
            message: message.into(),
            session,
        }
    }

    pub fn session(&self) -> Option<Uuid> {
        match self {
            ServerMessage::Frame { session, .. }
            | ServerMessage::Summary { session, .. }
            | ServerMessage::Labeled { session, .. } => Some(*session),
            ServerMessage::Error { session, .. } => *session,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

/// Parses a client frame, checking the version before the body.
pub fn parse_client(text: &str) -> Result<ClientMessage, ServerMessage> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| ServerMessage::error(ErrorCode::BadRequest, format!("invalid JSON: {e}"), None))?;
    match value.get("v").and_then(|v| v.as_u64()) {
        Some(v) if v == PROTOCOL_VERSION as u64 => {}
        Some(v) => {
            return Err(ServerMessage::error(
                ErrorCode::UnsupportedVersion,
                format!("protocol version {v} not supported, expected {PROTOCOL_VERSION}"),
                None,
            ));
        }
        None => {
            return Err(ServerMessage::error(ErrorCode::UnsupportedVersion, "missing \"v\" field", None));
        }
    }
    serde_json::from_value(value).map_err(|e| ServerMessage::error(ErrorCode::BadRequest, e.to_string(), None))
}

/// Serializes a client message with the current version.
pub fn client_json(msg: &ClientMessage) -> String {
    let mut value = serde_json::to_value(msg).expect("client messages always serialize");
    value["v"] = PROTOCOL_VERSION.into();
    value.to_string()
}
