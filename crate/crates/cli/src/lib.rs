//! Library surface of the `dvdp` command-line tool: configuration parsing,
//! the on-disk tensor/checkpoint/image formats, and the subcommand
//! implementations. The binary in `main.rs` is a thin argument layer over
//! this crate.

pub mod commands;
pub mod config;
pub mod failure;
pub mod io;
