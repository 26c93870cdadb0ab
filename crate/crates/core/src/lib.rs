//! A deterministic BLE security laboratory.

pub mod actors;
pub mod config;
pub mod att;
pub mod detection;
pub mod gatt;
pub mod mitm;
pub mod pairing;
pub mod radio;
pub mod risk;
pub mod control;
pub mod sim;
pub mod sniffer;
pub mod harness;
