use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, standard_normal, SimRng};
use crate::skb::ClassIndex;

/// How the noise variance is set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePower {
    /// `sigma^2 = mean(signal^2) * 10^(-snr_db / 10)`.
    #[default]
    Empirical,
    /// Fixed standard deviation; the SNR value only gates noise on or off.
    FixedSigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    /// `f64::INFINITY` disables the noise.
    pub snr_db: f64,
    pub seed: u64,
    pub power: NoisePower,
}

impl ChannelConfig {
    pub fn new(snr_db: f64, seed: u64) -> Self {
        ChannelConfig {
            snr_db,
            seed,
            power: NoisePower::Empirical,
        }
    }

    pub fn noiseless(seed: u64) -> Self {
        Self::new(f64::INFINITY, seed)
    }
}

pub fn signal_power(signal: &[f64]) -> f64 {
    signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64
}

/// Noise standard deviation for `signal` at `snr_db`; zero when disabled.
pub fn noise_sigma(signal: &[f64], snr_db: f64, power: NoisePower) -> Result<f64> {
    if signal.is_empty() {
        return Err(Error::Invalid("cannot transmit an empty signal".into()));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Invalid(format!("SNR must be finite or +inf, got {snr_db}")));
    }
    if snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    match power {
        NoisePower::FixedSigma(s) if s >= 0.0 && s.is_finite() => Ok(s),
        NoisePower::FixedSigma(s) => Err(Error::Invalid(format!("noise sigma {s} invalid"))),
        NoisePower::Empirical => {
            let p = signal_power(signal);
            if p == 0.0 {
                return Err(Error::Degenerate("zero-power signal: SNR is undefined".into()));
            }
            Ok((p * 10f64.powf(-snr_db / 10.0)).sqrt())
        }
    }
}

/// Draws the additive noise vector for `signal` from `rng`.
pub fn awgn_noise(signal: &[f64], snr_db: f64, power: NoisePower, rng: &mut SimRng) -> Result<Vec<f64>> {
    let sigma = noise_sigma(signal, snr_db, power)?;
    if sigma == 0.0 {
        return Ok(vec![0.0; signal.len()]);
    }
    Ok((0..signal.len()).map(|_| sigma * standard_normal(rng)).collect())
}

/// `signal + n`, `n ~ N(0, sigma^2 I)`, deterministic in `cfg.seed`.
pub fn awgn(signal: &[f64], cfg: &ChannelConfig) -> Result<Vec<f64>> {
    let noise = awgn_noise(signal, cfg.snr_db, cfg.power, &mut rng_from_seed(cfg.seed))?;
    Ok(signal.iter().zip(noise).map(|(s, n)| s + n).collect())
}

/// The index side channel is lossless.
pub fn transmit_index(v: ClassIndex) -> ClassIndex {
    v
}
