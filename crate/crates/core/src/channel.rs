//! The fading multiple-access channel: i.i.d. complex-Gaussian gains per
//! (user, antenna, symbol), additive receiver noise, analog superposition of
//! simultaneously transmitted updates, sum-of-gains combining across
//! antennas, and the scaled-real/imaginary estimator that recovers the
//! average update at the server.

use crate::error::{Error, Result};
use crate::model::{ComplexUpdate, ModelVector};
use crate::par::map_indexed;
use crate::rng::{rng_from, stream};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    /// Number of receive antennas at the server.
    pub antennas: usize,
    /// Variance of each complex channel gain.
    pub sigma_h2: f64,
    /// Variance of the complex receiver noise per antenna and symbol.
    pub sigma_z2: f64,
    /// Transmit scaling applied to every symbol.
    pub alpha: f64,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 {
            return Err(Error::Config("antennas must be at least 1".into()));
        }
        if !(self.sigma_h2 > 0.0 && self.sigma_h2.is_finite()) {
            return Err(Error::Config(format!("sigma_h2 must be positive, got {}", self.sigma_h2)));
        }
        if !(self.sigma_z2 >= 0.0 && self.sigma_z2.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_z2 must be non-negative, got {}",
                self.sigma_z2
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One draw of all channel gains and noise for a communication round.
///
/// Gains are stored antenna-major: entry `(k, m, n)` is the gain between
/// user `m` and antenna `k` on symbol `n`. Noise is per antenna and symbol.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    users: usize,
    antennas: usize,
    symbols: usize,
    gains: Vec<Complex64>,
    noise: Vec<Complex64>,
}

impl ChannelRealization {
    /// Builds a realization from explicit gain and noise tensors, for tests
    /// and channel-free debugging.
    pub fn from_parts(
        users: usize,
        antennas: usize,
        symbols: usize,
        gains: Vec<Complex64>,
        noise: Vec<Complex64>,
    ) -> Result<Self> {
        if gains.len() != users * antennas * symbols {
            return Err(Error::DimensionMismatch {
                context: "channel gains",
                expected: users * antennas * symbols,
                actual: gains.len(),
            });
        }
        if noise.len() != antennas * symbols {
            return Err(Error::DimensionMismatch {
                context: "channel noise",
                expected: antennas * symbols,
                actual: noise.len(),
            });
        }
        Ok(Self { users, antennas, symbols, gains, noise })
    }

    /// A noiseless realization whose constant real gains make the full
    /// transmit/combine/estimate pipeline return exactly the average of the
    /// transmitted updates: every gain is `sqrt(sigma_h2 / users)`.
    pub fn degenerate(users: usize, antennas: usize, symbols: usize, sigma_h2: f64) -> Self {
        let g = Complex64::new((sigma_h2 / users as f64).sqrt(), 0.0);
        Self {
            users,
            antennas,
            symbols,
            gains: vec![g; users * antennas * symbols],
            noise: vec![Complex64::new(0.0, 0.0); antennas * symbols],
        }
    }

    pub fn num_users(&self) -> usize {
        self.users
    }

    pub fn num_antennas(&self) -> usize {
        self.antennas
    }

    pub fn num_symbols(&self) -> usize {
        self.symbols
    }

    pub fn gain(&self, user: usize, antenna: usize, symbol: usize) -> Complex64 {
        self.gains[(antenna * self.users + user) * self.symbols + symbol]
    }

    pub fn noise_at(&self, antenna: usize, symbol: usize) -> Complex64 {
        self.noise[antenna * self.symbols + symbol]
    }

    fn check_updates(&self, updates: &[ComplexUpdate]) -> Result<()> {
        if updates.len() != self.users {
            return Err(Error::DimensionMismatch {
                context: "transmitting users",
                expected: self.users,
                actual: updates.len(),
            });
        }
        for u in updates {
            if u.len() != self.symbols {
                return Err(Error::DimensionMismatch {
                    context: "update symbols",
                    expected: self.symbols,
                    actual: u.len(),
                });
            }
        }
        Ok(())
    }
}

/// Draws an i.i.d. Rayleigh-fading realization: each gain is circularly
/// symmetric complex Gaussian with variance `sigma_h2`, each noise entry with
/// variance `sigma_z2`. Gains and noise use independent per-antenna streams.
pub fn draw_channel(
    num_users: usize,
    num_symbols: usize,
    cfg: &ChannelConfig,
    seed: u64,
) -> ChannelRealization {
    let gain_amp = (cfg.sigma_h2 / 2.0).sqrt();
    let noise_amp = (cfg.sigma_z2 / 2.0).sqrt();
    let per_antenna: Vec<(Vec<Complex64>, Vec<Complex64>)> = map_indexed(cfg.antennas, |k| {
        let mut grng = rng_from(seed, &[stream::GAIN, k as u64]);
        let gains: Vec<Complex64> = (0..num_users * num_symbols)
            .map(|_| {
                let re: f64 = grng.sample(StandardNormal);
                let im: f64 = grng.sample(StandardNormal);
                Complex64::new(gain_amp * re, gain_amp * im)
            })
            .collect();
        let noise: Vec<Complex64> = if cfg.sigma_z2 == 0.0 {
            vec![Complex64::new(0.0, 0.0); num_symbols]
        } else {
            let mut nrng = rng_from(seed, &[stream::NOISE, k as u64]);
            (0..num_symbols)
                .map(|_| {
                    let re: f64 = nrng.sample(StandardNormal);
                    let im: f64 = nrng.sample(StandardNormal);
                    Complex64::new(noise_amp * re, noise_amp * im)
                })
                .collect()
        };
        (gains, noise)
    });

    let mut gains = Vec::with_capacity(cfg.antennas * num_users * num_symbols);
    let mut noise = Vec::with_capacity(cfg.antennas * num_symbols);
    for (g, z) in per_antenna {
        gains.extend(g);
        noise.extend(z);
    }
    ChannelRealization { users: num_users, antennas: cfg.antennas, symbols: num_symbols, gains, noise }
}

fn antenna_contribution(
    real: &ChannelRealization,
    updates: &[ComplexUpdate],
    alpha: f64,
    k: usize,
) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
    let n = real.symbols;
    let zero = Complex64::new(0.0, 0.0);
    let mut hsum = vec![zero; n];
    let mut rx = vec![zero; n];
    let mut selfterm = vec![zero; n];
    let base = k * real.users * real.symbols;
    for (m, update) in updates.iter().enumerate() {
        let grow = &real.gains[base + m * n..base + (m + 1) * n];
        for (i, x) in update.as_slice().iter().enumerate() {
            let h = grow[i];
            let tx = alpha * x;
            hsum[i] += h;
            rx[i] += h * tx;
            selfterm[i] += Complex64::new(h.norm_sqr(), 0.0) * tx;
        }
    }
    let zrow = &real.noise[k * n..(k + 1) * n];
    let mut noise_out = vec![zero; n];
    for i in 0..n {
        let conj = hsum[i].conj();
        rx[i] = conj * rx[i];
        noise_out[i] = conj * zrow[i];
    }
    (rx, selfterm, noise_out)
}

/// Superimposes the scaled updates over the fading channel, adds receiver
/// noise, and combines antennas by conjugated sum-of-gains matching, averaged
/// over antennas. Returns the combined complex signal at the server.
pub fn transmit_and_combine(
    updates: &[ComplexUpdate],
    real: &ChannelRealization,
    cfg: &ChannelConfig,
) -> Result<ComplexUpdate> {
    let parts = decompose(updates, real, cfg)?;
    let combined: Vec<Complex64> = parts
        .signal
        .as_slice()
        .iter()
        .zip(parts.interference.as_slice())
        .zip(parts.noise.as_slice())
        .map(|((s, i), z)| s + i + z)
        .collect();
    Ok(ComplexUpdate::new(combined))
}

/// The combined signal split into its matched-gain signal term, cross-user
/// interference, and combined noise. The three parts sum to the output of
/// [`transmit_and_combine`] exactly (same arithmetic path).
#[derive(Debug, Clone)]
pub struct SignalParts {
    pub signal: ComplexUpdate,
    pub interference: ComplexUpdate,
    pub noise: ComplexUpdate,
}

pub fn decompose(
    updates: &[ComplexUpdate],
    real: &ChannelRealization,
    cfg: &ChannelConfig,
) -> Result<SignalParts> {
    real.check_updates(updates)?;
    if real.antennas == 0 {
        return Err(Error::Config("realization has no antennas".into()));
    }
    let n = real.symbols;
    let per_antenna: Vec<_> =
        map_indexed(real.antennas, |k| antenna_contribution(real, updates, cfg.alpha, k));

    let zero = Complex64::new(0.0, 0.0);
    let mut signal = vec![zero; n];
    let mut full = vec![zero; n];
    let mut noise = vec![zero; n];
    for (rx, selfterm, z) in &per_antenna {
        for i in 0..n {
            full[i] += rx[i];
            signal[i] += selfterm[i];
            noise[i] += z[i];
        }
    }
    let inv = 1.0 / real.antennas as f64;
    let mut interference = vec![zero; n];
    for i in 0..n {
        signal[i] *= inv;
        full[i] *= inv;
        noise[i] *= inv;
        interference[i] = full[i] - signal[i];
    }
    Ok(SignalParts {
        signal: ComplexUpdate::new(signal),
        interference: ComplexUpdate::new(interference),
        noise: ComplexUpdate::new(noise),
    })
}

/// Recovers the estimated average real update from the combined signal:
/// real parts fill the first half, imaginary parts the second, scaled by
/// `1 / (num_scheduled * sigma_h2 * alpha)`.
pub fn estimate_aggregate(
    combined: &ComplexUpdate,
    num_scheduled: usize,
    cfg: &ChannelConfig,
) -> Result<ModelVector> {
    if num_scheduled == 0 {
        return Err(Error::Empty("scheduled set"));
    }
    let denom = num_scheduled as f64 * cfg.sigma_h2 * cfg.alpha;
    let half = combined.len();
    let mut out = vec![0.0; 2 * half];
    for (n, z) in combined.as_slice().iter().enumerate() {
        out[n] = z.re / denom;
        out[n + half] = z.im / denom;
    }
    Ok(ModelVector::new(out))
}
