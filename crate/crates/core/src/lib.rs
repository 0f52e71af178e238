//! Radio frequency fingerprint identification for LoRa transmitters.
//!
//! Pipeline: preamble synthesis with per-device transmitter impairments
//! ([`lora_phy`]), fading channel simulation and augmentation
//! ([`channel`]), receiver preprocessing ([`frontend`]),
//! channel-independent spectrograms ([`features`]), a triplet-loss trained
//! residual CNN embedder ([`embedder`]), the enrolled-fingerprint store
//! ([`registry`]) and k-NN identification with rogue-device detection
//! ([`identifier`]). [`harness`] wires everything into reproducible
//! experiments driven by the `rffi` CLI.

pub mod channel;
pub mod embedder;
pub mod error;
pub mod features;
pub mod frontend;
pub mod harness;
pub mod identifier;
pub mod lora_phy;
pub mod registry;
pub mod util;

pub use error::{Error, Result};
