//! Command-line interface and HTTP/WebSocket service for learning behavior
//! trees from demonstrations.

pub mod api;
pub mod cli;
pub mod ops;
