//! Uplink latency model.
//!
//! The total bandwidth `B` is divided into `N` equal sub-channels. A client
//! transmitting with power `P` over channel power gain `h^2` achieves
//!
//! ```text
//!   rate = (B / N) * ln(1 + P * h^2 / N0)        [nats/s, or bits/s with
//!                                                 the log2 switch]
//! ```
//!
//! The channel gain combines a fourth-power path-loss law, anchored at a
//! reference gain `g0` measured at distance `d0`, with optional unit-mean
//! exponential fast fading redrawn every round:
//!
//! ```text
//!   h^2 = g0 * (d0 / d)^4 * xi,    xi ~ Exp(1)  (xi = 1 with fading off)
//! ```
//!
//! Per-round cost of a client splits into local computation,
//! `t_cmp = epochs * cycles_per_sample * samples / cpu_hz`, and upload,
//! `t_trans = payload_bits / rate`.

use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{rng, ClientId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioConfig {
    /// Total uplink bandwidth B in Hz.
    pub bandwidth_hz: f64,
    /// Number of equal sub-channels N.
    pub subchannels: u32,
    /// Noise power N0 per sub-channel, in watts.
    pub noise_w: f64,
    /// Linear channel power gain at the reference distance.
    pub path_gain_ref: f64,
    /// Reference distance d0 in meters.
    pub ref_distance_m: f64,
    /// Upload payload size in bits. Zero means "derive from the model".
    pub model_bits: f64,
    /// Redraw exponential fast fading each round.
    pub fading: bool,
    /// Use log2 instead of the natural log in the rate.
    pub rate_log2: bool,
}

/// Static per-client radio and compute characteristics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientProfile {
    pub client_id: ClientId,
    /// Local training-set size.
    pub num_samples: u32,
    pub cpu_hz: f64,
    pub cycles_per_sample: f64,
    pub tx_power_w: f64,
    pub distance_m: f64,
}

/// Channel amplitude gains for one round, indexed by client id.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub round: u32,
    pub gains: Vec<f64>,
}

impl ChannelState {
    /// Draws every client's gain for the round. Profiles must be sorted by
    /// client id and ids must be dense in `0..len`.
    pub fn draw(profiles: &[ClientProfile], cfg: &RadioConfig, round: u32, seed: u64) -> Self {
        let gains = profiles.iter().map(|p| draw_gain(p, cfg, round, seed)).collect();
        ChannelState { round, gains }
    }

    #[inline]
    pub fn gain(&self, client: ClientId) -> f64 {
        self.gains[client as usize]
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Deterministic distance-driven part of the channel power gain.
pub fn path_gain(cfg: &RadioConfig, distance_m: f64) -> f64 {
    cfg.path_gain_ref * (cfg.ref_distance_m / distance_m).powi(4)
}

/// Amplitude gain `h` for `(round, client)`, keyed so that replaying a round
/// reproduces it exactly regardless of draw order.
pub fn draw_gain(profile: &ClientProfile, cfg: &RadioConfig, round: u32, seed: u64) -> f64 {
    let mu = path_gain(cfg, profile.distance_m);
    let xi = if cfg.fading {
        let mut r = rng::stream(seed, rng::FADING, u64::from(round), u64::from(profile.client_id));
        Exp::new(1.0).expect("unit rate").sample(&mut r)
    } else {
        1.0
    };
    (mu * xi).sqrt()
}

/// Achievable uplink rate on one sub-channel.
pub fn data_rate(cfg: &RadioConfig, tx_power_w: f64, h: f64) -> f64 {
    let snr = tx_power_w * h * h / cfg.noise_w;
    let per_channel = cfg.bandwidth_hz / f64::from(cfg.subchannels);
    if cfg.rate_log2 {
        per_channel * snr.ln_1p() / std::f64::consts::LN_2
    } else {
        per_channel * snr.ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latency {
    pub t_cmp: f64,
    pub t_trans: f64,
}

impl Latency {
    #[inline]
    pub fn total(&self) -> f64 {
        self.t_cmp + self.t_trans
    }
}

/// Compute and upload times for one client-round. A zero rate yields an
/// infinite upload time; the client is unreachable this round.
pub fn latencies(profile: &ClientProfile, cfg: &RadioConfig, epochs: u32, rate: f64) -> Latency {
    let t_cmp = f64::from(epochs) * profile.cycles_per_sample * f64::from(profile.num_samples)
        / profile.cpu_hz;
    let t_trans = if rate > 0.0 { cfg.model_bits / rate } else { f64::INFINITY };
    Latency { t_cmp, t_trans }
}

/// Longest finite per-client total; unreachable clients are reported, not
/// waited for. Errors when the set is empty or nobody is reachable.
pub fn round_latency(totals: &[(ClientId, f64)]) -> Result<(f64, Vec<ClientId>)> {
    if totals.is_empty() {
        return Err(Error::EmptySchedule);
    }
    let mut max = f64::NEG_INFINITY;
    let mut unreachable = Vec::new();
    for &(id, t) in totals {
        if t.is_finite() {
            max = max.max(t);
        } else {
            unreachable.push(id);
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::AllUnreachable);
    }
    Ok((max, unreachable))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> RadioConfig {
        RadioConfig {
            bandwidth_hz: 10e6,
            subchannels: 10,
            noise_w: 1e-6,
            path_gain_ref: db_to_linear(-35.0),
            ref_distance_m: 2.0,
            model_bits: 1e6,
            fading: false,
            rate_log2: false,
        }
    }

    fn profile() -> ClientProfile {
        ClientProfile {
            client_id: 0,
            num_samples: 1000,
            cpu_hz: 2e9,
            cycles_per_sample: 20.0,
            tx_power_w: dbm_to_watts(20.0),
            distance_m: 2.0,
        }
    }

    #[test]
    fn decibel_conversions() {
        assert_relative_eq!(db_to_linear(-35.0), 3.1622776601683794e-4, max_relative = 1e-12);
        assert_relative_eq!(dbm_to_watts(20.0), 0.1, max_relative = 1e-12);
        assert_relative_eq!(dbm_to_watts(-10.0), 1e-4, max_relative = 1e-12);
        assert_relative_eq!(watts_to_dbm(db_to_linear(-35.0)) - 30.0, -35.0, epsilon = 1e-9);
        assert_relative_eq!(linear_to_db(db_to_linear(7.3)), 7.3, epsilon = 1e-12);
    }

    #[test]
    fn reference_distance_without_fading_recovers_reference_gain() {
        let h = draw_gain(&profile(), &cfg(), 0, 0);
        assert_relative_eq!(h * h, 3.1622776601683794e-4, max_relative = 1e-12);
    }

    #[test]
    fn path_loss_follows_fourth_power() {
        let c = cfg();
        let near = path_gain(&c, 2.0);
        let far = path_gain(&c, 20.0);
        assert_relative_eq!(near / far, 1e4, max_relative = 1e-12);
    }

    #[test]
    fn rate_against_hand_computed_value() {
        // SNR = 100 on a 1 MHz sub-channel: rate = 1e6 * ln(101).
        let c = cfg();
        let h = (100.0 * c.noise_w / 0.1f64).sqrt();
        let r = data_rate(&c, 0.1, h);
        assert_relative_eq!(r, 4_615_120.516_841_26, max_relative = 1e-12);
        // And the matching upload time for a 1e6-bit payload.
        let l = latencies(&profile(), &c, 10, r);
        assert_relative_eq!(l.t_trans, 0.216_679_065_335_531_66, max_relative = 1e-12);
    }

    #[test]
    fn log2_switch_rescales_rate() {
        let mut c = cfg();
        let h = 1e-3;
        let nats = data_rate(&c, 0.1, h);
        c.rate_log2 = true;
        let bits = data_rate(&c, 0.1, h);
        assert_relative_eq!(bits, nats / std::f64::consts::LN_2, max_relative = 1e-12);
    }

    #[test]
    fn compute_time_scales_with_work_over_speed() {
        // 10 epochs * 20 cycles * 1000 samples / 2 GHz = 0.1 ms.
        let l = latencies(&profile(), &cfg(), 10, 1.0);
        assert_relative_eq!(l.t_cmp, 1e-4, max_relative = 1e-12);
    }

    #[test]
    fn zero_rate_means_unreachable() {
        let l = latencies(&profile(), &cfg(), 10, 0.0);
        assert!(l.t_trans.is_infinite());
        assert!(l.total().is_infinite());
    }

    #[test]
    fn round_latency_takes_max_of_finite() {
        let (t, dropped) = round_latency(&[(0, 0.1), (1, 0.5), (2, 0.2)]).unwrap();
        assert_eq!(t, 0.5);
        assert!(dropped.is_empty());

        let (t, dropped) =
            round_latency(&[(0, 0.1), (1, f64::INFINITY), (2, 0.2)]).unwrap();
        assert_eq!(t, 0.2);
        assert_eq!(dropped, vec![1]);
    }

    #[test]
    fn round_latency_rejects_empty_and_all_infinite() {
        assert!(matches!(round_latency(&[]), Err(Error::EmptySchedule)));
        let all = [(0, f64::INFINITY), (1, f64::INFINITY)];
        assert!(matches!(round_latency(&all), Err(Error::AllUnreachable)));
    }

    #[test]
    fn fading_is_keyed_by_round_and_client() {
        let mut c = cfg();
        c.fading = true;
        let p = profile();
        let a = draw_gain(&p, &c, 3, 9);
        assert_eq!(a, draw_gain(&p, &c, 3, 9));
        assert_ne!(a, draw_gain(&p, &c, 4, 9));
        let mut other = p.clone();
        other.client_id = 1;
        assert_ne!(a, draw_gain(&other, &c, 3, 9));
    }

    #[test]
    fn fading_has_unit_mean_power() {
        let mut c = cfg();
        c.fading = true;
        let p = profile();
        let mu = path_gain(&c, p.distance_m);
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|r| {
                let h = draw_gain(&p, &c, r, 5);
                h * h / mu
            })
            .sum::<f64>()
            / f64::from(n);
        assert!((mean - 1.0).abs() < 0.05, "fading power mean {mean}");
    }

    #[test]
    fn rate_increases_with_power_and_gain() {
        let c = cfg();
        let mut prev = 0.0;
        for i in 1..50 {
            let r = data_rate(&c, f64::from(i) * 1e-3, 1e-4);
            assert!(r > prev);
            prev = r;
        }
        let mut prev = 0.0;
        for i in 1..50 {
            let r = data_rate(&c, 0.1, f64::from(i) * 1e-6);
            assert!(r > prev);
            prev = r;
        }
    }
}
