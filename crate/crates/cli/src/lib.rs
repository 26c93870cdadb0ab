//! Command-line driver and control service for the BLE lab.

pub mod server;
