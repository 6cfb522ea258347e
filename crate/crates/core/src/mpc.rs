//! Multipath component detection, multipath statistics and log-log
//! power-law fitting of power delay profiles.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::csi::PdpFrame;
use crate::error::{Error, Result};

pub const GAMMA_P_DB: f64 = 40.0;
pub const GAMMA_N_DB: f64 = 10.0;
pub const TRIM_FRACTION: f64 = 0.10;

fn db(p: f64) -> f64 {
    10.0 * p.log10()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSet {
    pub tap_indices: Vec<usize>,
    pub delays_s: Vec<f64>,
    /// Linear powers.
    pub powers: Vec<f64>,
    pub threshold_db: f64,
}

impl MpcSet {
    pub fn n_components(&self) -> usize {
        self.tap_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tap_indices.is_empty()
    }

    pub fn max_power_db(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Degenerate("no multipath components".into()));
        }
        Ok(db(self.powers.iter().copied().fold(0.0, f64::max)))
    }
}

/// Median dB power of the last quarter of the taps.
pub fn estimate_noise_floor_db(pdp: &PdpFrame) -> Result<f64> {
    let n = pdp.taps.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty PDP".into()));
    }
    let start = n - (n / 4).max(1);
    let mut tail: Vec<f64> = pdp.taps[start..].iter().map(|&p| db(p)).collect();
    tail.sort_by(f64::total_cmp);
    let k = tail.len();
    Ok(if k % 2 == 1 {
        tail[k / 2]
    } else {
        0.5 * (tail[k / 2 - 1] + tail[k / 2])
    })
}

/// `P_th = max(P_max - gamma_p, N0 + gamma_n)` in dB. `N0` is estimated from
/// the PDP tail when not given.
pub fn detection_threshold(
    pdp: &PdpFrame,
    gamma_p_db: f64,
    gamma_n_db: f64,
    noise_floor_db: Option<f64>,
) -> Result<f64> {
    let p_max = pdp.taps.iter().copied().fold(0.0, f64::max);
    if p_max <= 0.0 {
        return Err(Error::Degenerate("PDP has no positive tap".into()));
    }
    let n0 = match noise_floor_db {
        Some(v) => v,
        None => estimate_noise_floor_db(pdp)?,
    };
    Ok((db(p_max) - gamma_p_db).max(n0 + gamma_n_db))
}

/// Strict local maxima of the dB-domain PDP at or above `threshold_db`.
pub fn extract_mpcs(pdp: &PdpFrame, threshold_db: f64, sample_interval_s: f64) -> MpcSet {
    let p_db = pdp.taps_db();
    let n = p_db.len();
    let mut set = MpcSet {
        tap_indices: Vec::new(),
        delays_s: Vec::new(),
        powers: Vec::new(),
        threshold_db,
    };
    for i in 0..n {
        let left_ok = i == 0 || p_db[i] > p_db[i - 1];
        let right_ok = i + 1 == n || p_db[i] > p_db[i + 1];
        if left_ok && right_ok && p_db[i] >= threshold_db {
            set.tap_indices.push(i);
            set.delays_s.push(i as f64 * sample_interval_s);
            set.powers.push(pdp.taps[i]);
        }
    }
    set
}

/// Total multipath power `P_r` in dB.
pub fn total_power(mpcs: &MpcSet) -> Result<f64> {
    if mpcs.is_empty() {
        return Err(Error::Degenerate("no multipath components".into()));
    }
    Ok(db(mpcs.powers.iter().sum()))
}

/// Power-weighted mean delay.
pub fn mean_delay(mpcs: &MpcSet) -> Result<f64> {
    if mpcs.is_empty() {
        return Err(Error::Degenerate("no multipath components".into()));
    }
    let p: f64 = mpcs.powers.iter().sum();
    Ok(mpcs
        .powers
        .iter()
        .zip(&mpcs.delays_s)
        .map(|(p, t)| p * t)
        .sum::<f64>()
        / p)
}

/// RMS delay spread in seconds.
pub fn rms_delay_spread(mpcs: &MpcSet) -> Result<f64> {
    let tau_bar = mean_delay(mpcs)?;
    let p: f64 = mpcs.powers.iter().sum();
    let m2 = mpcs
        .powers
        .iter()
        .zip(&mpcs.delays_s)
        .map(|(p, t)| p * (t - tau_bar) * (t - tau_bar))
        .sum::<f64>()
        / p;
    Ok(m2.max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    pub eta0_db: f64,
    pub decay_factor: f64,
    pub rmse_db: f64,
    /// Standard deviation of the residual term, `n - 2` degrees of freedom.
    pub residual_sigma: f64,
    pub n_points: usize,
}

impl PowerLawFit {
    /// Model value `eta0 - n * 10 log10(tau)` at normalized delay `tau`.
    pub fn predict_db(&self, tau: f64) -> f64 {
        self.eta0_db - self.decay_factor * db(tau)
    }
}

/// Normalized `(10 log10 tau, 10 log10 P/P_0)` points of one PDP. Tap `i` sits
/// at normalized delay `i + 1`; zero-power taps are skipped.
pub fn normalized_points(pdp: &PdpFrame) -> Result<Vec<(f64, f64)>> {
    let Some(&p0) = pdp.taps.first() else {
        return Err(Error::InvalidArgument("empty PDP".into()));
    };
    if !(p0 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "PDP at t = {} has a non-positive first tap",
            pdp.t
        )));
    }
    Ok(pdp
        .taps
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, &p)| (db((i + 1) as f64), db(p / p0)))
        .collect())
}

/// Ordinary least squares on the pooled normalized points of all frames,
/// excluding each frame's reference tap.
pub fn fit_power_law(pdps: &[PdpFrame]) -> Result<PowerLawFit> {
    let mut pts = Vec::new();
    for f in pdps {
        // the reference tap is 0 dB by construction and carries no information
        pts.extend(normalized_points(f)?.into_iter().filter(|p| p.0 > 0.0));
    }
    fit_points(&pts)
}

fn fit_points(pts: &[(f64, f64)]) -> Result<PowerLawFit> {
    let n = pts.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "{n} usable points, need at least 2"
        )));
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all points share one delay".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts
        .iter()
        .map(|&(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    Ok(PowerLawFit {
        eta0_db: intercept,
        decay_factor: -slope,
        rmse_db: (sse / nf).sqrt(),
        residual_sigma: if n > 2 {
            (sse / (nf - 2.0)).sqrt()
        } else {
            0.0
        },
        n_points: n,
    })
}

/// Mean normalized dB power per tap over frames, for plotting against a fit.
/// Taps that are zero in every frame come out as `NaN`.
pub fn average_normalized_curve(pdps: &[PdpFrame]) -> Result<Vec<(f64, f64)>> {
    let n_taps = pdps.iter().map(|f| f.taps.len()).max().unwrap_or(0);
    let mut sum = vec![0.0; n_taps];
    let mut count = vec![0usize; n_taps];
    for f in pdps {
        for (x, y) in normalized_points(f)? {
            let i = (10f64.powf(x / 10.0).round() as usize) - 1;
            sum[i] += y;
            count[i] += 1;
        }
    }
    Ok((0..n_taps)
        .map(|i| {
            (
                db((i + 1) as f64),
                if count[i] > 0 {
                    sum[i] / count[i] as f64
                } else {
                    f64::NAN
                },
            )
        })
        .collect())
}

/// `k` distinct indices out of `n`, sorted, fixed by `seed`. All indices when
/// `k >= n`.
pub fn select_frames(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Mean after sorting and dropping `floor(trim * n)` values from each end.
pub fn trimmed_mean(values: &[f64], trim_fraction: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(Error::InvalidArgument(format!(
            "trim fraction {trim_fraction} outside [0, 0.5)"
        )));
    }
    let n = values.len();
    let drop = (trim_fraction * n as f64).floor() as usize;
    if n <= 2 * drop {
        return Err(Error::InvalidArgument(format!(
            "trimming {drop} from each end of {n} values leaves nothing"
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let kept = &v[drop..n - drop];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Trimmed-mean multipath parameters of a set of PDPs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcSummary {
    pub total_power_db: f64,
    pub max_power_db: f64,
    pub rms_delay_spread_s: f64,
    pub mean_components: f64,
    pub frames: usize,
}

/// Per-frame MPC extraction followed by trimmed means. Frames without any
/// component are skipped.
pub fn mpc_summary(
    pdps: &[PdpFrame],
    noise_floor_db: Option<f64>,
    sample_interval_s: f64,
) -> Result<MpcSummary> {
    let mut pr = Vec::with_capacity(pdps.len());
    let mut pmax = Vec::with_capacity(pdps.len());
    let mut tau = Vec::with_capacity(pdps.len());
    let mut count = Vec::with_capacity(pdps.len());
    for f in pdps {
        let th = detection_threshold(f, GAMMA_P_DB, GAMMA_N_DB, noise_floor_db)?;
        let set = extract_mpcs(f, th, sample_interval_s);
        if set.is_empty() {
            continue;
        }
        pr.push(total_power(&set)?);
        pmax.push(set.max_power_db()?);
        tau.push(rms_delay_spread(&set)?);
        count.push(set.n_components() as f64);
    }
    Ok(MpcSummary {
        total_power_db: trimmed_mean(&pr, TRIM_FRACTION)?,
        max_power_db: trimmed_mean(&pmax, TRIM_FRACTION)?,
        rms_delay_spread_s: trimmed_mean(&tau, TRIM_FRACTION)?,
        mean_components: trimmed_mean(&count, TRIM_FRACTION)?,
        frames: pr.len(),
    })
}
