//! Diffusion-model channel estimation for multi-antenna OFDM receivers.
//!
//! A noise-conditioned mixer network learns a prior over normalized
//! channel matrices. The receiver seeds a population of candidates from the
//! pilot observations, refines them along a reverse diffusion trajectory,
//! screens them by how well they reconstruct the received frame, and
//! spawns new candidates around the survivors.

pub mod baselines;
pub mod channel;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod mixnet;
pub mod modem;
pub mod numerics;
pub mod receiver;

pub use error::{Error, Result};
