//! Shared fixtures for the benchmarks.

use rsbnn_core::data::{generate_channels, ChannelParams};
use rsbnn_core::{ChannelSample, SystemConfig};

/// `n` channel draws at `K = N_t = size`, 20 dB.
pub fn fixture(size: usize, n: usize) -> (SystemConfig, Vec<ChannelSample>) {
    let cfg = SystemConfig::from_snr_db(size, size, 20.0).expect("valid system");
    let data = generate_channels(&cfg, &ChannelParams::default(), n, 7).expect("valid parameters");
    (cfg, data.samples)
}
