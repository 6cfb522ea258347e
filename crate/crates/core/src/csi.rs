//! CSI grids, least-squares channel estimation, PDP extraction and RSS
//! statistics.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Default number of PDP taps (400 ns at 10 ns resolution).
pub const N_TAPS: usize = 40;

/// Default sliding window length in snapshots.
pub const RSS_WINDOW: usize = 20;

/// Complex values indexed by (antenna, subcarrier), antenna-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    n_antennas: usize,
    n_subcarriers: usize,
    data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn zeros(n_antennas: usize, n_subcarriers: usize) -> Self {
        Self {
            n_antennas,
            n_subcarriers,
            data: vec![Complex64::new(0.0, 0.0); n_antennas * n_subcarriers],
        }
    }

    pub fn from_vec(n_antennas: usize, n_subcarriers: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != n_antennas * n_subcarriers {
            return Err(Error::InvalidArgument(format!(
                "grid data has {} entries, expected {n_antennas} x {n_subcarriers}",
                data.len()
            )));
        }
        Ok(Self {
            n_antennas,
            n_subcarriers,
            data,
        })
    }

    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    pub fn n_subcarriers(&self) -> usize {
        self.n_subcarriers
    }

    pub fn get(&self, antenna: usize, subcarrier: usize) -> Complex64 {
        self.data[antenna * self.n_subcarriers + subcarrier]
    }

    pub fn set(&mut self, antenna: usize, subcarrier: usize, value: Complex64) {
        self.data[antenna * self.n_subcarriers + subcarrier] = value;
    }

    pub fn antenna(&self, antenna: usize) -> &[Complex64] {
        &self.data[antenna * self.n_subcarriers..(antenna + 1) * self.n_subcarriers]
    }

    pub fn antenna_mut(&mut self, antenna: usize) -> &mut [Complex64] {
        &mut self.data[antenna * self.n_subcarriers..(antenna + 1) * self.n_subcarriers]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Channel frequency response `H_{t,m,n}` (or its estimate) at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSnapshot {
    pub t: f64,
    pub grid: ComplexGrid,
}

/// Received pilot observations `Y_{t,m,n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedGrid {
    pub t: f64,
    pub grid: ComplexGrid,
}

/// Power delay profile of one snapshot; tap `n` sits at delay `n * T_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct PdpFrame {
    pub t: f64,
    pub taps: Vec<f64>,
}

impl PdpFrame {
    pub fn new(t: f64, taps: Vec<f64>) -> Result<Self> {
        if taps.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument(
                "PDP taps must be finite and >= 0".into(),
            ));
        }
        Ok(Self { t, taps })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn taps_db(&self) -> Vec<f64> {
        self.taps.iter().map(|&p| 10.0 * p.log10()).collect()
    }
}

/// Least-squares estimate `Ĥ = Y / X` for a known pilot.
pub fn estimate_cfr_ls(received: &ReceivedGrid, pilot: Complex64) -> Result<CsiSnapshot> {
    if pilot.norm_sqr() == 0.0 {
        return Err(Error::InvalidArgument("pilot symbol is zero".into()));
    }
    let mut grid = received.grid.clone();
    if pilot != Complex64::new(1.0, 0.0) {
        for z in grid.as_mut_slice() {
            *z /= pilot;
        }
    }
    Ok(CsiSnapshot {
        t: received.t,
        grid,
    })
}

/// Arithmetic mean over the antenna axis.
pub fn average_antennas(cfr: &CsiSnapshot) -> Result<Vec<Complex64>> {
    let g = &cfr.grid;
    if g.n_antennas() == 0 {
        return Err(Error::InvalidArgument("snapshot has no antennas".into()));
    }
    let scale = 1.0 / g.n_antennas() as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); g.n_subcarriers()];
    for m in 0..g.n_antennas() {
        for (o, z) in out.iter_mut().zip(g.antenna(m)) {
            *o += z;
        }
    }
    for o in &mut out {
        *o *= scale;
    }
    Ok(out)
}

/// Inverse DFT with `1/N` scaling (forward transform unscaled).
pub struct Idft {
    plan: Arc<dyn Fft<f64>>,
    len: usize,
}

impl Idft {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            plan: planner.plan_fft_inverse(len),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn apply(&self, input: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(input.len(), self.len, "IDFT length mismatch");
        let mut buf = input.to_vec();
        self.plan.process(&mut buf);
        let scale = 1.0 / self.len as f64;
        for z in &mut buf {
            *z *= scale;
        }
        buf
    }
}

/// Full-length channel impulse response `ĥ = IDFT(avg_cfr)`.
pub fn impulse_response(avg_cfr: &[Complex64]) -> Vec<Complex64> {
    Idft::new(avg_cfr.len()).apply(avg_cfr)
}

/// `|ĥ_n|^2` for the first `n_taps` taps of the impulse response.
pub fn cfr_to_pdp(avg_cfr: &[Complex64], n_taps: usize, t: f64) -> Result<PdpFrame> {
    cfr_to_pdp_with(&Idft::new(avg_cfr.len()), avg_cfr, n_taps, t)
}

/// Same as [`cfr_to_pdp`] with a reusable transform plan.
pub fn cfr_to_pdp_with(
    idft: &Idft,
    avg_cfr: &[Complex64],
    n_taps: usize,
    t: f64,
) -> Result<PdpFrame> {
    if n_taps > avg_cfr.len() {
        return Err(Error::InvalidArgument(format!(
            "n_taps = {n_taps} exceeds CFR length {}",
            avg_cfr.len()
        )));
    }
    if idft.len() != avg_cfr.len() {
        return Err(Error::InvalidArgument(
            "IDFT plan length does not match the CFR".into(),
        ));
    }
    let h = idft.apply(avg_cfr);
    Ok(PdpFrame {
        t,
        taps: h[..n_taps].iter().map(|z| z.norm_sqr()).collect(),
    })
}

/// `10 log10(mean |Y|^2)` over every antenna/subcarrier entry.
pub fn rss_from_iq(received: &ReceivedGrid) -> Result<f64> {
    let data = received.grid.as_slice();
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    let mean = data.iter().map(|z| z.norm_sqr()).sum::<f64>() / data.len() as f64;
    if mean == 0.0 {
        return Err(Error::Degenerate(
            "all-zero IQ grid has no finite RSS".into(),
        ));
    }
    Ok(10.0 * mean.log10())
}

/// RSS samples with their sliding-window statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RssSeries {
    pub timestamps: Vec<f64>,
    pub rss_db: Vec<f64>,
    pub window: usize,
    pub windowed_mean_db: Vec<f64>,
    pub windowed_var: Vec<f64>,
}

impl RssSeries {
    pub fn new(timestamps: Vec<f64>, rss_db: Vec<f64>, window: usize) -> Result<Self> {
        if timestamps.len() != rss_db.len() {
            return Err(Error::InvalidArgument(
                "timestamps and RSS lengths differ".into(),
            ));
        }
        let (windowed_mean_db, windowed_var) = sliding_stats(&rss_db, window)?;
        Ok(Self {
            timestamps,
            rss_db,
            window,
            windowed_mean_db,
            windowed_var,
        })
    }
}

/// Per-window mean and population variance for every full window.
pub fn sliding_stats(series: &[f64], window: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    if window > series.len() {
        return Err(Error::InvalidArgument(format!(
            "window {window} larger than series length {}",
            series.len()
        )));
    }
    let n_out = series.len() - window + 1;
    let mut means = Vec::with_capacity(n_out);
    let mut vars = Vec::with_capacity(n_out);
    for w in series.windows(window) {
        let mean = w.iter().sum::<f64>() / window as f64;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / window as f64;
        means.push(mean);
        vars.push(var);
    }
    Ok((means, vars))
}

/// Histogram density over equal-width bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn bin_centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect()
    }

    /// `sum(density * width)`; 1 for any nonempty input.
    pub fn integral(&self) -> f64 {
        self.edges
            .windows(2)
            .zip(&self.density)
            .map(|(e, d)| d * (e[1] - e[0]))
            .sum()
    }
}

/// Right-continuous empirical CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self { sorted }
    }

    /// Fraction of samples `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        let count = self.sorted.partition_point(|v| *v <= x);
        count as f64 / self.sorted.len() as f64
    }

    /// Step points `(value, F(value))` at every distinct sample value.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, &v) in self.sorted.iter().enumerate() {
            let p = (i + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 = p,
                _ => out.push((v, p)),
            }
        }
        out
    }
}

/// Histogram-normalized PDF and empirical CDF of `values`.
///
/// Bins span `[min, max]`; the last bin is closed. If all values are equal a
/// single unit-width bin centred on the value is returned.
pub fn empirical_distribution(values: &[f64], n_bins: usize) -> Result<(Histogram, Ecdf)> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 values".into()));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("values must be finite".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ecdf = Ecdf::new(values);
    if hi == lo {
        let hist = Histogram {
            edges: vec![lo - 0.5, lo + 0.5],
            density: vec![1.0],
        };
        return Ok((hist, ecdf));
    }
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins)
        .map(|i| {
            if i == n_bins {
                hi
            } else {
                lo + width * i as f64
            }
        })
        .collect();
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    let density = counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, e)| c as f64 / (n * (e[1] - e[0])))
        .collect();
    Ok((Histogram { edges, density }, ecdf))
}
