//! HTTP and WebSocket transport around [`SessionManager`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::sync::mpsc;
use uuid::Uuid;

use crate::protocol::{ServerMessage, PROTOCOL_VERSION};
use crate::session::SessionManager;

pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", get(sessions))
        .route("/ws", get(upgrade))
        .with_state(manager)
}

/// Binds `addr` and serves until the process ends. Returns the bound address
/// through `on_bound` so callers can use port 0.
pub async fn serve(
    manager: Arc<SessionManager>,
    addr: SocketAddr,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(manager)).await
}

async fn health() -> Json<Value> {
    Json(json!({ "v": PROTOCOL_VERSION, "status": "ok" }))
}

async fn sessions(State(manager): State<Arc<SessionManager>>) -> Json<Value> {
    Json(json!({ "v": PROTOCOL_VERSION, "count": manager.session_count() }))
}

async fn upgrade(ws: WebSocketUpgrade, State(manager): State<Arc<SessionManager>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, manager))
}

async fn connection(socket: WebSocket, manager: Arc<SessionManager>) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<ServerMessage>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if sink.send(Message::Text(msg.to_json().into())).await.is_err() {
                break;
            }
        }
    });
    while let Some(Ok(message)) = stream.next().await {
        let text = match message {
            Message::Text(text) => text,
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = manager.handle_text(text.as_str(), Some(tx.clone()));
        for msg in reply.messages {
            let _ = tx.send(msg);
        }
        if let Some(id) = reply.ticking {
            tokio::spawn(ticker(manager.clone(), id));
        }
    }
    drop(tx);
    let _ = writer.await;
}

/// Drives a real-time session at the configured rate until its episode ends.
async fn ticker(manager: Arc<SessionManager>, id: Uuid) {
    let Some(period) = manager.tick_interval() else { return };
    let Some(out) = manager.outbound(id) else { return };
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    interval.tick().await;
    loop {
        interval.tick().await;
        let Some(msg) = manager.tick(id) else { break };
        let last = !matches!(msg, ServerMessage::Frame { .. });
        if out.send(msg).is_err() || last {
            break;
        }
    }
}
