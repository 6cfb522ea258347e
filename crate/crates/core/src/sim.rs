//! Tapped-delay-line channel generator for rain-affected links.
//!
//! A snapshot is built from four kinds of paths, all on the `T_s` grid:
//!
//! * the first arrival (direct path, or plate reflection in NLoS geometry),
//!   attenuated by the scenario's rain loss and jittered log-normally;
//! * Type-1 paths, a Poisson number of raindrop-scatter echoes close to the
//!   first arrival;
//! * Type-2 paths, one per tap after the first arrival, from environment
//!   scatterers, with a shared log-normal power factor;
//! * a spatially incoherent part of the environment scatter that sums to zero
//!   over antennas.
//!
//! Expected antenna-averaged power at offset `j` taps after the first arrival
//! is `a / (j + 1)^n`.

use std::f64::consts::{LN_10, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use crate::config::{ChannelConfig, RainScenario};
use crate::csi::{ComplexGrid, CsiSnapshot, ReceivedGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Direct,
    Reflected,
    Type1,
    Type2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub delay_s: f64,
    /// Complex gain per antenna.
    pub gains: Vec<Complex64>,
    pub kind: PathKind,
    /// Expected `|mean over antennas of gain|^2` under the generating model.
    pub expected_power: f64,
}

impl Path {
    /// A path seen identically by every antenna.
    pub fn common(delay_s: f64, gain: Complex64, n_antennas: usize) -> Self {
        Path {
            delay_s,
            gains: vec![gain; n_antennas],
            kind: PathKind::Direct,
            expected_power: gain.norm_sqr(),
        }
    }
}

/// Paths of one snapshot, sorted by delay.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    n_antennas: usize,
    paths: Vec<Path>,
}

impl PathSet {
    pub fn new(n_antennas: usize, mut paths: Vec<Path>) -> Result<Self> {
        if n_antennas == 0 {
            return Err(Error::InvalidArgument(
                "n_antennas must be at least 1".into(),
            ));
        }
        if paths.is_empty() {
            return Err(Error::InvalidArgument(
                "a path set needs at least one path".into(),
            ));
        }
        for p in &paths {
            if p.gains.len() != n_antennas {
                return Err(Error::InvalidArgument(format!(
                    "path has {} antenna gains, expected {n_antennas}",
                    p.gains.len()
                )));
            }
            if !(p.delay_s >= 0.0) || !p.delay_s.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "bad path delay {}",
                    p.delay_s
                )));
            }
        }
        paths.sort_by(|a, b| a.delay_s.total_cmp(&b.delay_s));
        Ok(Self { n_antennas, paths })
    }

    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn delays_s(&self) -> Vec<f64> {
        self.paths.iter().map(|p| p.delay_s).collect()
    }

    pub fn first(&self) -> &Path {
        &self.paths[0]
    }

    /// Expected power of the first arrival.
    pub fn first_arrival_expected_power(&self) -> f64 {
        self.paths[0].expected_power
    }

    /// Antenna-averaged power per tap, `|mean_m sum_{p at tap} alpha|^2`.
    pub fn tap_powers(&self, sample_interval_s: f64, n_taps: usize) -> Vec<f64> {
        let mut acc = vec![Complex64::new(0.0, 0.0); n_taps];
        let scale = 1.0 / self.n_antennas as f64;
        for p in &self.paths {
            let tap = (p.delay_s / sample_interval_s).round() as usize;
            if tap < n_taps {
                acc[tap] += p.gains.iter().sum::<Complex64>() * scale;
            }
        }
        acc.iter().map(|z| z.norm_sqr()).collect()
    }

    /// Sum of per-path expected powers falling on each tap.
    pub fn expected_tap_powers(&self, sample_interval_s: f64, n_taps: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_taps];
        for p in &self.paths {
            let tap = (p.delay_s / sample_interval_s).round() as usize;
            if tap < n_taps {
                out[tap] += p.expected_power;
            }
        }
        out
    }
}

/// SplitMix64 finalizer.
const STREAM_DRIFT: u64 = 4;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed for `(stream, index)` from a base seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let a = mix64(base.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let b = mix64(a ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03));
    mix64(b ^ index.wrapping_mul(0x8cb9_2ba7_2f3d_8dd7))
}

/// Slow common gain variation at time index `index`, dB: independent
/// `N(0, gain_drift_db^2)` knots every `gain_drift_period_s` seconds on the
/// global timeline, linearly interpolated.
pub fn gain_drift_db(config: &ChannelConfig, seed: u64, index: u64) -> f64 {
    if config.gain_drift_db <= 0.0 {
        return 0.0;
    }
    let pos = index as f64 / config.gain_drift_period_s;
    let k = pos.floor();
    let u = pos - k;
    let knot = |i: u64| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_DRIFT, i));
        let z: f64 = StandardNormal.sample(&mut rng);
        config.gain_drift_db * z
    };
    let k = k as u64;
    (1.0 - u) * knot(k) + u * knot(k + 1)
}

/// Multiplies every CFR entry by `10^(db / 20)`.
pub fn apply_gain_db(cfr: &mut CsiSnapshot, db: f64) {
    let g = 10f64.powf(db / 20.0);
    for h in cfr.grid.as_mut_slice() {
        *h *= g;
    }
}

/// Log-normal factor with unit linear mean and the given dB variance.
fn unit_mean_lognormal<R: Rng>(rng: &mut R, variance_db2: f64) -> f64 {
    if variance_db2 <= 0.0 {
        return 1.0;
    }
    let sigma = variance_db2.sqrt();
    let mu = -variance_db2 * LN_10 / 20.0;
    let x = Normal::new(mu, sigma).expect("finite sigma").sample(rng);
    10f64.powf(x / 10.0)
}

/// Circularly symmetric complex Gaussian with unit power.
fn cn01<R: Rng>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn random_phase<R: Rng>(rng: &mut R) -> Complex64 {
    Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI))
}

/// Draws the multipath structure of one snapshot.
pub fn sample_paths(scenario: &RainScenario, config: &ChannelConfig, seed: u64) -> Result<PathSet> {
    scenario.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = config.n_antennas;
    let ts = config.sample_interval_s;
    let n = scenario.decay_factor;

    let (first_tap, first_db, first_kind) = if scenario.los {
        (0, config.reference_power_db, PathKind::Direct)
    } else {
        (
            config.nlos_delay_taps(),
            config.reference_power_db - config.nlos_reflection_loss_db,
            PathKind::Reflected,
        )
    };
    if first_tap >= config.n_taps {
        return Err(Error::Config(
            "NLoS first arrival falls outside the analysis window".into(),
        ));
    }
    let a = 10f64.powf((first_db - scenario.mean_attenuation_db) / 10.0);
    let n_tail = config.n_taps - 1 - first_tap;
    // expected power at offset j
    let profile: Vec<f64> = (0..=n_tail)
        .map(|j| a * ((j + 1) as f64).powf(-n))
        .collect();

    let mut paths = Vec::with_capacity(n_tail + 8);
    let jitter = unit_mean_lognormal(&mut rng, config.los_jitter_db * config.los_jitter_db);
    let g0 = (a * jitter).sqrt() * random_phase(&mut rng);
    paths.push(Path {
        delay_s: first_tap as f64 * ts,
        gains: vec![g0; m],
        kind: first_kind,
        expected_power: a,
    });

    let (k0, k1) = scenario.type1_delay_taps;
    let type1_on = scenario.type1_path_count_mean > 0.0 && scenario.type1_power_fraction > 0.0;
    let in_type1 = |j: usize| type1_on && j >= k0 && j <= k1;

    let mut variance = scenario.type2_power_variance_db;
    if scenario.high_wind {
        variance *= config.wind_variance_factor;
    }
    if scenario.type2_power_variance_db > 0.0 && n_tail > 0 {
        let shadow = unit_mean_lognormal(&mut rng, variance);
        let k = scenario.type2_specular_ratio;
        let spec_share = k / (k + 1.0);
        let diffuse_share = 1.0 / (k + 1.0);
        let weight_sum: f64 = profile[1..].iter().sum();
        let incoherent_total = scenario.incoherent_power_ratio * a * shadow;
        for j in 1..=n_tail {
            let e2 = if in_type1(j) {
                profile[j] * (1.0 - scenario.type1_power_fraction)
            } else {
                profile[j]
            };
            let coherent = (e2 * spec_share * shadow).sqrt() * random_phase(&mut rng)
                + (e2 * diffuse_share * shadow).sqrt() * cn01(&mut rng);
            let mut gains = vec![coherent; m];
            if m > 1 && incoherent_total > 0.0 {
                let d = incoherent_total * profile[j] / weight_sum;
                let c: Vec<Complex64> = (0..m).map(|_| cn01(&mut rng)).collect();
                let mean = c.iter().sum::<Complex64>() / m as f64;
                let scale = (d * m as f64 / (m as f64 - 1.0)).sqrt();
                for (g, ci) in gains.iter_mut().zip(&c) {
                    *g += (ci - mean) * scale;
                }
            }
            paths.push(Path {
                delay_s: (first_tap + j) as f64 * ts,
                gains,
                kind: PathKind::Type2,
                expected_power: e2,
            });
        }
    }

    if type1_on && k0 <= n_tail {
        let hi = k1.min(n_tail);
        let span = (hi - k0 + 1) as f64;
        let count = Poisson::new(scenario.type1_path_count_mean)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .sample(&mut rng) as usize;
        for _ in 0..count {
            let j = rng.gen_range(k0..=hi);
            let p =
                scenario.type1_power_fraction * profile[j] * span / scenario.type1_path_count_mean;
            let g = p.sqrt() * cn01(&mut rng);
            paths.push(Path {
                delay_s: (first_tap + j) as f64 * ts,
                gains: vec![g; m],
                kind: PathKind::Type1,
                expected_power: p,
            });
        }
    }

    PathSet::new(m, paths)
}

/// `H_{m,n} = sum_p alpha_{m,p} exp(-j 2 pi n df delay_p)` by direct summation.
pub fn synthesize_cfr(paths: &PathSet, config: &ChannelConfig, t: f64) -> CsiSnapshot {
    let n_sc = config.n_subcarriers;
    let mut grid = ComplexGrid::zeros(paths.n_antennas(), n_sc);
    let mut phasor = vec![Complex64::new(0.0, 0.0); n_sc];
    for p in paths.paths() {
        for (k, e) in phasor.iter_mut().enumerate() {
            *e = Complex64::from_polar(
                1.0,
                -2.0 * PI * k as f64 * config.subcarrier_spacing_hz * p.delay_s,
            );
        }
        for (ant, g) in p.gains.iter().enumerate() {
            for (h, e) in grid.antenna_mut(ant).iter_mut().zip(&phasor) {
                *h += g * e;
            }
        }
    }
    CsiSnapshot { t, grid }
}

/// `Y = H X + W` with `W ~ CN(0, 10^(noise_floor_db/10))` per entry.
pub fn apply_noise_and_pilot(
    cfr: &CsiSnapshot,
    config: &ChannelConfig,
    seed: u64,
) -> Result<ReceivedGrid> {
    if config.noise_floor_db.is_nan() || config.noise_floor_db == f64::INFINITY {
        return Err(Error::InvalidArgument(
            "noise_floor_db must be finite or -inf".into(),
        ));
    }
    let mut grid = cfr.grid.clone();
    let x = config.pilot;
    let sigma = 10f64.powf(config.noise_floor_db / 10.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for y in grid.as_mut_slice() {
        *y *= x;
        if sigma > 0.0 {
            *y += cn01(&mut rng) * sigma;
        }
    }
    Ok(ReceivedGrid { t: cfr.t, grid })
}

/// Specific attenuation `gamma = k R^alpha` in dB/km.
pub fn specific_rain_attenuation(rate_mm_per_h: f64, k: f64, alpha: f64) -> Result<f64> {
    if !(rate_mm_per_h >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rain rate must be >= 0, got {rate_mm_per_h}"
        )));
    }
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "k must be positive, got {k}"
        )));
    }
    if rate_mm_per_h == 0.0 {
        return Ok(0.0);
    }
    Ok(k * rate_mm_per_h.powf(alpha))
}

/// Power-law coefficients `(k, alpha)` passing through two `(rate, gamma)` points.
pub fn power_law_through(r1: f64, g1: f64, r2: f64, g2: f64) -> Result<(f64, f64)> {
    if !(r1 > 0.0 && r2 > 0.0 && g1 > 0.0 && g2 > 0.0) || r1 == r2 {
        return Err(Error::InvalidArgument(
            "need two distinct positive points".into(),
        ));
    }
    let alpha = (g2 / g1).ln() / (r2 / r1).ln();
    Ok((g1 / r1.powf(alpha), alpha))
}

/// Rain rate in mm/h from an accumulation over `minutes`.
pub fn rate_from_accumulation(mm: f64, minutes: f64) -> f64 {
    mm * 60.0 / minutes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RainLabel;

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        assert_eq!(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 2, 4));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 3));
    }

    #[test]
    fn no_scatter_leaves_one_path() {
        let mut s = RainScenario::default_for(RainLabel::NoRain);
        s.type2_power_variance_db = 0.0;
        s.type1_path_count_mean = 0.0;
        let cfg = ChannelConfig::default();
        let ps = sample_paths(&s, &cfg, 3).unwrap();
        assert_eq!(ps.n_paths(), 1);
        assert_eq!(ps.first().kind, PathKind::Direct);
        assert_eq!(ps.first().delay_s, 0.0);
    }

    #[test]
    fn nlos_first_arrival_is_delayed_and_weaker() {
        let cfg = ChannelConfig::default();
        let los = RainScenario::default_for(RainLabel::NoRain);
        let mut nlos = los.clone();
        nlos.los = false;
        let a = sample_paths(&los, &cfg, 1).unwrap();
        let b = sample_paths(&nlos, &cfg, 1).unwrap();
        assert_eq!(b.first().kind, PathKind::Reflected);
        assert!((b.first().delay_s - 30e-9).abs() < 1e-18);
        let diff =
            10.0 * (a.first_arrival_expected_power() / b.first_arrival_expected_power()).log10();
        assert!((diff - 3.0).abs() < 1e-12);
    }

    #[test]
    fn delays_stay_inside_window() {
        let cfg = ChannelConfig::default();
        for label in RainLabel::ALL {
            for seed in 0..20 {
                let ps = sample_paths(&RainScenario::default_for(label), &cfg, seed).unwrap();
                let d = ps.delays_s();
                assert!(d.windows(2).all(|w| w[0] <= w[1]));
                assert!(*d.last().unwrap() < cfg.n_taps as f64 * cfg.sample_interval_s);
            }
        }
    }

    #[test]
    fn unit_delay_gives_unit_root_phases() {
        let cfg = ChannelConfig::default().with_subcarriers(4);
        let ps = PathSet::new(
            1,
            vec![Path::common(
                cfg.sample_interval_s,
                Complex64::new(1.0, 0.0),
                1,
            )],
        )
        .unwrap();
        let h = synthesize_cfr(&ps, &cfg, 0.0);
        let want = [(1.0, 0.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 1.0)];
        for (k, (re, im)) in want.iter().enumerate() {
            assert!((h.grid.get(0, k) - Complex64::new(*re, *im)).norm() < 1e-12);
        }
    }

    #[test]
    fn noiseless_limit_is_identity() {
        let mut cfg = ChannelConfig::default();
        cfg.noise_floor_db = f64::NEG_INFINITY;
        let ps = sample_paths(&RainScenario::default_for(RainLabel::HeavyRain), &cfg, 5).unwrap();
        let h = synthesize_cfr(&ps, &cfg, 1.0);
        let y = apply_noise_and_pilot(&h, &cfg, 11).unwrap();
        assert_eq!(y.grid, h.grid);
    }

    #[test]
    fn attenuation_power_law() {
        assert_eq!(specific_rain_attenuation(0.0, 0.3, 1.2).unwrap(), 0.0);
        assert_eq!(specific_rain_attenuation(5.0, 1.0, 1.0).unwrap(), 5.0);
        assert!(specific_rain_attenuation(-1.0, 1.0, 1.0).is_err());
        assert!(specific_rain_attenuation(1.0, 0.0, 1.0).is_err());
    }
}
