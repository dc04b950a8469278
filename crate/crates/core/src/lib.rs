//! Executable model of a multi-stakeholder virtual Mobile Trusted Module.

pub mod codec;
pub mod crypto;
pub mod engine;
pub mod mtm;
pub mod platform;
pub mod protocols;
pub mod rim;
