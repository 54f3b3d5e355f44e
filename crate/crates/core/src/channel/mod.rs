//! Physical channel: AWGN on latent symbols, a lossless index link, and
//! the frame format both travel in.

mod awgn;
mod frame;

pub use awgn::{awgn, awgn_noise, noise_sigma, signal_power, transmit_index, ChannelConfig, NoisePower};
pub use frame::{
    read_frames, write_frames, Frame, FrameMode, FRAME_TAG, INDEX_ONLY_LEN, LATENT_HEADER_LEN, MODE_INDEX_ONLY,
    MODE_INDEX_PLUS_LATENT,
};
