//! Discrete-event co-simulation of QKD-secured SCADA control.
//!
//! The crate couples a stochastic QKD link model, a key-pool inventory,
//! a Kalman forecaster, a reduced linear grid, chance-constrained chain
//! scheduling, a TSO/DSO Stackelberg allocation game and a secure framing
//! protocol, and drives them from a tick-based engine.

pub mod qlink;
pub mod forecast;
pub mod keypool;
pub mod chains;
pub mod grid;
pub mod scheduler;
pub mod game;
pub mod protocol;
pub mod engine;
