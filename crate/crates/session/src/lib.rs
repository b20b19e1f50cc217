//! Session service for remote FER sessions: the EFS/1 wire format, a
//! crash-safe session store, clinician authentication and the HTTP API.

pub mod auth;
pub mod config;
pub mod quantize;
pub mod server;
pub mod store;
pub mod wire;

pub use auth::{AuthError, Authenticator};
pub use config::{ConfigError, ServerConfig};
pub use quantize::quantize_probs;
pub use server::{router, serve, serve_on, AppState, ServerError};
pub use store::{Ack, SessionSummary, Store, StoreError};
pub use wire::{decode_session, encode_session, ActivityNote, EmotionFrame, PatientCard, SessionSlice, WireError};
