//! Measurement and mitigation primitives for equal treatment of demographic
//! groups by scoring models.

pub mod data;
pub mod parity;
pub mod dp;
pub mod cohort;
pub mod consequence;
pub mod mitigation;
pub mod sim;
pub mod synth;
