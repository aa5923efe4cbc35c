use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};

/// Link characteristics: one-way delay, loss and an optional bandwidth cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkProfile {
    pub name: String,
    pub delay_mean_ms: f64,
    pub delay_std_ms: f64,
    pub drop_prob: f64,
    #[serde(default)]
    pub bandwidth_bits_per_s: Option<f64>,
}

impl NetworkProfile {
    pub fn four_g() -> Self {
        Self {
            name: "4g".into(),
            delay_mean_ms: 21.0,
            delay_std_ms: 19.0,
            drop_prob: 0.001,
            bandwidth_bits_per_s: Some(20e6),
        }
    }

    pub fn five_g() -> Self {
        Self {
            name: "5g".into(),
            delay_mean_ms: 10.0,
            delay_std_ms: 10.0,
            drop_prob: 0.001,
            bandwidth_bits_per_s: None,
        }
    }

    /// Lossless, zero-delay link.
    pub fn ideal() -> Self {
        Self {
            name: "ideal".into(),
            delay_mean_ms: 0.0,
            delay_std_ms: 0.0,
            drop_prob: 0.0,
            bandwidth_bits_per_s: None,
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "4g" => Ok(Self::four_g()),
            "5g" => Ok(Self::five_g()),
            "ideal" => Ok(Self::ideal()),
            other => Err(Error::Config(format!("unknown network profile '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!("drop_prob {} outside [0, 1)", self.drop_prob)));
        }
        if !(self.delay_mean_ms.is_finite() && self.delay_mean_ms >= 0.0) {
            return Err(Error::Config("delay mean must be finite and non-negative".into()));
        }
        if !(self.delay_std_ms.is_finite() && self.delay_std_ms >= 0.0) {
            return Err(Error::Config("delay std must be finite and non-negative".into()));
        }
        if self.delay_mean_ms == 0.0 && self.delay_std_ms > 0.0 {
            return Err(Error::Config("a non-negative delay with zero mean cannot vary".into()));
        }
        if let Some(b) = self.bandwidth_bits_per_s {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::Config(format!("bandwidth {b} must be positive")));
            }
        }
        Ok(())
    }

    /// Seconds needed to push `bytes` onto the link.
    pub fn serialization_s(&self, bytes: usize) -> f64 {
        self.bandwidth_bits_per_s
            .map_or(0.0, |b| bytes as f64 * 8.0 / b)
    }

    /// Parameters `(m, s)` in ms of the normal whose positive part has the
    /// configured mean and standard deviation.
    pub fn latent_normal(&self) -> (f64, f64) {
        let (mu, sigma) = (self.delay_mean_ms, self.delay_std_ms);
        if sigma == 0.0 || mu == 0.0 {
            return (mu, 0.0);
        }
        let target_cv = sigma / mu;
        let (mut lo, mut hi) = (-20.0f64, 40.0f64);
        for _ in 0..200 {
            let z = 0.5 * (lo + hi);
            if clipped_cv(z) > target_cv {
                lo = z;
            } else {
                hi = z;
            }
        }
        let z = 0.5 * (lo + hi);
        let (phi_cdf, phi_pdf) = unit_normal(z);
        let s = mu / (z * phi_cdf + phi_pdf);
        (z * s, s)
    }
}

fn unit_normal(z: f64) -> (f64, f64) {
    let n = StdNormal::new(0.0, 1.0).expect("unit normal");
    (n.cdf(z), n.pdf(z))
}

/// Coefficient of variation of `max(0, X)` for `X ~ N(z, 1)`.
fn clipped_cv(z: f64) -> f64 {
    let (c, p) = unit_normal(z);
    let m1 = z * c + p;
    let m2 = (z * z + 1.0) * c + z * p;
    (m2 / (m1 * m1) - 1.0).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delivery {
    Delivered {
        /// Arrival time in seconds.
        at: f64,
        /// Propagation delay in seconds.
        delay: f64,
        /// Serialization time in seconds.
        serialization: f64,
    },
    Dropped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub sends: usize,
    pub drops: usize,
    pub retransmissions: usize,
    pub retransmitted_bytes: usize,
    pub ack_bytes: usize,
}

/// Completed reliable transfer of one message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transfer {
    /// First arrival at the receiver.
    pub delivered_at: f64,
    /// Time the sender saw the acknowledgement.
    pub acked_at: f64,
    pub attempts: usize,
}

/// Seeded one-way channel model on a virtual clock.
#[derive(Debug, Clone)]
pub struct NetworkSim {
    pub profile: NetworkProfile,
    pub timeout_s: f64,
    pub max_attempts: usize,
    pub stats: LinkStats,
    delay: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl NetworkSim {
    pub fn new(profile: NetworkProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        let (m, s) = profile.latent_normal();
        let delay = if s > 0.0 {
            Some(Normal::new(m, s).map_err(|e| Error::Config(format!("delay distribution: {e}")))?)
        } else {
            None
        };
        Ok(Self {
            profile,
            timeout_s: 0.2,
            max_attempts: 64,
            stats: LinkStats::default(),
            delay,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn sample_delay_s(&mut self) -> f64 {
        let ms = match &self.delay {
            Some(d) => d.sample(&mut self.rng).max(0.0),
            None => self.profile.delay_mean_ms,
        };
        ms / 1e3
    }

    /// One unreliable send of `bytes` starting at `now` seconds.
    pub fn send(&mut self, bytes: usize, now: f64) -> Delivery {
        self.stats.sends += 1;
        let serialization = self.profile.serialization_s(bytes);
        let delay = self.sample_delay_s();
        if self.profile.drop_prob > 0.0 && self.rng.gen::<f64>() < self.profile.drop_prob {
            self.stats.drops += 1;
            return Delivery::Dropped;
        }
        Delivery::Delivered {
            at: now + delay + serialization,
            delay,
            serialization,
        }
    }

    /// Stop-and-wait transfer: resend identical bytes whenever no ack arrives
    /// within the timeout after the message left the sender.
    pub fn transfer(&mut self, bytes: usize, now: f64) -> Result<Transfer> {
        let mut delivered: Option<f64> = None;
        let mut acked: Option<f64> = None;
        let mut t = now;
        for attempt in 1..=self.max_attempts {
            if attempt > 1 {
                self.stats.retransmissions += 1;
                self.stats.retransmitted_bytes += bytes;
            }
            if let Delivery::Delivered { at, .. } = self.send(bytes, t) {
                delivered = Some(delivered.map_or(at, |d: f64| d.min(at)));
                self.stats.ack_bytes += 1;
                if let Delivery::Delivered { at: ack, .. } = self.send(1, at) {
                    acked = Some(acked.map_or(ack, |a: f64| a.min(ack)));
                }
            }
            let deadline = t + self.profile.serialization_s(bytes) + self.timeout_s;
            if let (Some(d), Some(a)) = (delivered, acked) {
                if a <= deadline {
                    return Ok(Transfer {
                        delivered_at: d,
                        acked_at: a,
                        attempts: attempt,
                    });
                }
            }
            t = deadline;
        }
        Err(Error::Session(format!(
            "message of {bytes} bytes not acknowledged after {} attempts",
            self.max_attempts
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    }

    fn delays(profile: NetworkProfile, n: usize, seed: u64) -> (Vec<f64>, usize) {
        let mut sim = NetworkSim::new(profile, seed).unwrap();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if let Delivery::Delivered { delay, .. } = sim.send(0, 0.0) {
                out.push(delay * 1e3);
            }
        }
        (out, sim.stats.drops)
    }

    #[test]
    fn calibrated_delay_matches_profile_moments() {
        for p in [NetworkProfile::four_g(), NetworkProfile::five_g()] {
            let (mean, std) = (p.delay_mean_ms, p.delay_std_ms);
            let (d, drops) = delays(p, 100_000, 7);
            let (m, s) = moments(&d);
            assert!((m - mean).abs() <= 0.02 * mean, "mean {m}");
            assert!((s - std).abs() <= 0.05 * std, "std {s}");
            assert!((50..=200).contains(&drops), "drops {drops}");
            assert!(d.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn latent_parameters_reproduce_clipped_moments_by_quadrature() {
        let p = NetworkProfile::four_g();
        let (m, s) = p.latent_normal();
        let n = StdNormal::new(m, s).unwrap();
        let (lo, hi, steps) = (0.0, m + 12.0 * s, 200_000);
        let h = (hi - lo) / steps as f64;
        let (mut e1, mut e2) = (0.0, 0.0);
        for i in 0..steps {
            let x = lo + (i as f64 + 0.5) * h;
            let w = n.pdf(x) * h;
            e1 += x * w;
            e2 += x * x * w;
        }
        assert!((e1 - 21.0).abs() < 1e-6, "{e1}");
        assert!(((e2 - e1 * e1).sqrt() - 19.0).abs() < 1e-6);
    }

    #[test]
    fn bandwidth_cap_adds_serialization_time() {
        let p = NetworkProfile::four_g();
        assert_eq!(p.serialization_s(1_000_000), 0.4);
        assert_eq!(NetworkProfile::five_g().serialization_s(1_000_000), 0.0);
        let mut sim = NetworkSim::new(p, 3).unwrap();
        loop {
            if let Delivery::Delivered { at, delay, serialization } = sim.send(1_000_000, 1.0) {
                assert_eq!(serialization, 0.4);
                assert_eq!(at, 1.0 + delay + 0.4);
                break;
            }
        }
    }

    #[test]
    fn lossless_profile_never_drops() {
        let mut p = NetworkProfile::five_g();
        p.drop_prob = 0.0;
        let mut sim = NetworkSim::new(p, 11).unwrap();
        for _ in 0..1_000_000 {
            assert!(matches!(sim.send(8, 0.0), Delivery::Delivered { .. }));
        }
        assert_eq!(sim.stats.drops, 0);
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        let mut p = NetworkProfile::five_g();
        p.drop_prob = 1.0;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        p.drop_prob = -0.1;
        assert!(p.validate().is_err());
        let mut p = NetworkProfile::four_g();
        p.bandwidth_bits_per_s = Some(0.0);
        assert!(p.validate().is_err());
        assert!(NetworkProfile::builtin("3g").is_err());
        assert_eq!(NetworkProfile::builtin("4G").unwrap(), NetworkProfile::four_g());
    }

    #[test]
    fn transfer_retransmits_until_acknowledged() {
        let mut p = NetworkProfile::five_g();
        p.drop_prob = 0.3;
        let mut sim = NetworkSim::new(p, 5).unwrap();
        let mut retried = 0;
        for i in 0..2000 {
            let t = sim.transfer(100, i as f64).unwrap();
            assert!(t.delivered_at >= i as f64 && t.acked_at >= t.delivered_at);
            if t.attempts > 1 {
                retried += 1;
                assert!(t.acked_at >= i as f64 + 0.2);
            }
        }
        assert!(retried > 0);
        assert_eq!(sim.stats.retransmitted_bytes, 100 * sim.stats.retransmissions);
    }

    #[test]
    fn transfer_gives_up_after_attempt_cap() {
        let mut p = NetworkProfile::five_g();
        p.drop_prob = 0.999_999;
        let mut sim = NetworkSim::new(p, 1).unwrap();
        sim.max_attempts = 3;
        assert!(matches!(sim.transfer(10, 0.0), Err(Error::Session(_))));
    }

    #[test]
    fn ideal_link_is_instant() {
        let mut sim = NetworkSim::new(NetworkProfile::ideal(), 0).unwrap();
        let t = sim.transfer(1 << 20, 2.5).unwrap();
        assert_eq!((t.delivered_at, t.acked_at, t.attempts), (2.5, 2.5, 1));
    }
}
