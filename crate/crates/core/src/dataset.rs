//! Labeled windows of simulated PDPs and RSS, laid out on a global timeline
//! so that training and test windows never share or touch snapshots.

use rayon::prelude::*;

use crate::config::{ChannelConfig, Condition, RainLabel, RainScenario};
use crate::csi::{self, Idft, PdpFrame};
use crate::error::{Error, Result};
use crate::sim::{self, derive_seed};

const STREAM_PATHS: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Taps x snapshots matrix, row-major (`data[tap * n_snapshots + s]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PdpMatrix {
    n_taps: usize,
    n_snapshots: usize,
    data: Vec<f64>,
}

impl PdpMatrix {
    pub fn from_vec(n_taps: usize, n_snapshots: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_taps * n_snapshots {
            return Err(Error::InvalidArgument(format!(
                "PDP matrix data has {} values, expected {n_taps} x {n_snapshots}",
                data.len()
            )));
        }
        Ok(Self {
            n_taps,
            n_snapshots,
            data,
        })
    }

    /// Stacks frames as columns.
    pub fn from_frames(frames: &[PdpFrame]) -> Result<Self> {
        let n_snapshots = frames.len();
        let n_taps = frames.first().map_or(0, |f| f.len());
        if frames.iter().any(|f| f.len() != n_taps) {
            return Err(Error::InvalidArgument(
                "frames have different tap counts".into(),
            ));
        }
        let mut data = vec![0.0; n_taps * n_snapshots];
        for (s, f) in frames.iter().enumerate() {
            for (k, &p) in f.taps.iter().enumerate() {
                data[k * n_snapshots + s] = p;
            }
        }
        Ok(Self {
            n_taps,
            n_snapshots,
            data,
        })
    }

    pub fn n_taps(&self) -> usize {
        self.n_taps
    }

    pub fn n_snapshots(&self) -> usize {
        self.n_snapshots
    }

    pub fn get(&self, tap: usize, snapshot: usize) -> f64 {
        self.data[tap * self.n_snapshots + snapshot]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, snapshot: usize) -> Vec<f64> {
        (0..self.n_taps).map(|k| self.get(k, snapshot)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub label: RainLabel,
    pub condition: Condition,
    pub split: Split,
    /// Time of the first snapshot in the window, seconds.
    pub timestamp: f64,
    pub pdp: PdpMatrix,
    pub rss: Option<Vec<f64>>,
}

impl Record {
    /// Frames of the window, one per snapshot, at 1 s spacing.
    pub fn frames(&self) -> Vec<PdpFrame> {
        (0..self.pdp.n_snapshots())
            .map(|s| PdpFrame {
                t: self.timestamp + s as f64,
                taps: self.pdp.column(s),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub records: Vec<Record>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, label: RainLabel, split: Split) -> usize {
        self.split(split).filter(|r| r.label == label).count()
    }

    /// A dataset holding only the given split.
    pub fn subset(&self, split: Split) -> LabeledDataset {
        LabeledDataset {
            records: self.split(split).cloned().collect(),
        }
    }
}

/// One class of a generation request.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRequest {
    pub scenario: RainScenario,
    pub train_count: usize,
    pub test_count: usize,
}

/// Simulated observables of one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub pdp: PdpFrame,
    pub rss_db: f64,
}

/// Paths -> CFR -> noisy pilots -> LS estimate -> antenna average -> PDP, RSS.
pub fn simulate_snapshot(
    scenario: &RainScenario,
    config: &ChannelConfig,
    idft: &Idft,
    seed: u64,
    index: u64,
) -> Result<Snapshot> {
    let t = index as f64;
    let paths = sim::sample_paths(scenario, config, derive_seed(seed, STREAM_PATHS, index))?;
    let mut cfr = sim::synthesize_cfr(&paths, config, t);
    sim::apply_gain_db(&mut cfr, sim::gain_drift_db(config, seed, index));
    let rx = sim::apply_noise_and_pilot(&cfr, config, derive_seed(seed, STREAM_NOISE, index))?;
    let est = csi::estimate_cfr_ls(&rx, config.pilot)?;
    let avg = csi::average_antennas(&est)?;
    let pdp = csi::cfr_to_pdp_with(idft, &avg, config.n_taps, t)?;
    let rss_db = csi::rss_from_iq(&rx)?;
    Ok(Snapshot { pdp, rss_db })
}

/// Thread count from `RAINSENSE_THREADS` (default 1).
pub fn thread_budget() -> usize {
    std::env::var("RAINSENSE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Snapshots at time indices `start..start + n` of one scenario.
pub fn simulate_series(
    scenario: &RainScenario,
    config: &ChannelConfig,
    start: u64,
    n: usize,
    seed: u64,
) -> Result<Vec<Snapshot>> {
    let idft = Idft::new(config.n_subcarriers);
    (start..start + n as u64)
        .map(|i| simulate_snapshot(scenario, config, &idft, seed, i))
        .collect()
}

struct WindowJob {
    class: usize,
    split: Split,
    start: u64,
}

/// Start times of `count` windows beginning at `t0`. Windows are packed back
/// to back inside sessions of `session_len` seconds; sessions are separated
/// by one window of silence. Returns the starts and the first free second
/// after the block plus a one-window gap.
fn block_layout(t0: u64, count: usize, window: usize, session_len: usize) -> (Vec<u64>, u64) {
    let per_session = session_len / window;
    let w = window as u64;
    let mut starts = Vec::with_capacity(count);
    let mut t = t0;
    for i in 0..count {
        if i > 0 && i % per_session == 0 {
            t += w;
        }
        starts.push(t);
        t += w;
    }
    (starts, t + w)
}

/// Generates windows for every class. Per class the timeline holds the
/// training block, a one-window gap, then the test block and another gap.
pub fn generate_dataset(
    classes: &[ClassRequest],
    config: &ChannelConfig,
    window: usize,
    session_len: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    generate_dataset_with_threads(classes, config, window, session_len, seed, thread_budget())
}

pub fn generate_dataset_with_threads(
    classes: &[ClassRequest],
    config: &ChannelConfig,
    window: usize,
    session_len: usize,
    seed: u64,
    threads: usize,
) -> Result<LabeledDataset> {
    config.validate()?;
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    if window > session_len {
        return Err(Error::InvalidArgument(format!(
            "window of {window} snapshots does not fit in a {session_len}-snapshot session"
        )));
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no classes requested".into()));
    }
    for c in classes {
        c.scenario.validate()?;
        if c.train_count == 0 || c.test_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "class {} needs positive train and test counts",
                c.scenario.label
            )));
        }
    }

    let mut jobs = Vec::new();
    let mut t = 0u64;
    for (ci, c) in classes.iter().enumerate() {
        for (split, count) in [(Split::Train, c.train_count), (Split::Test, c.test_count)] {
            let (starts, next) = block_layout(t, count, window, session_len);
            jobs.extend(starts.into_iter().map(|start| WindowJob {
                class: ci,
                split,
                start,
            }));
            t = next;
        }
    }

    let run = |job: &WindowJob| -> Result<Record> {
        let c = &classes[job.class];
        let snaps = simulate_series(&c.scenario, config, job.start, window, seed)?;
        let frames: Vec<PdpFrame> = snaps.iter().map(|s| s.pdp.clone()).collect();
        Ok(Record {
            label: c.scenario.label,
            condition: c.scenario.condition(),
            split: job.split,
            timestamp: job.start as f64,
            pdp: PdpMatrix::from_frames(&frames)?,
            rss: Some(snaps.iter().map(|s| s.rss_db).collect()),
        })
    };

    let records = if threads <= 1 {
        jobs.iter().map(run).collect::<Result<Vec<_>>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?
    };
    Ok(LabeledDataset { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(label: RainLabel, train: usize, test: usize) -> ClassRequest {
        ClassRequest {
            scenario: RainScenario::default_for(label),
            train_count: train,
            test_count: test,
        }
    }

    #[test]
    fn layout_breaks_sessions_and_leaves_gap() {
        let (starts, next) = block_layout(0, 5, 20, 40);
        assert_eq!(starts, vec![0, 20, 60, 80, 120]);
        assert_eq!(next, 160);
    }

    #[test]
    fn minimal_dataset_has_two_disjoint_samples() {
        let cfg = ChannelConfig::default();
        let ds = generate_dataset(&[req(RainLabel::NoRain, 1, 1)], &cfg, 1, 300, 3).unwrap();
        assert_eq!(ds.len(), 2);
        assert_ne!(ds.records[0].timestamp, ds.records[1].timestamp);
        assert_eq!(ds.records[0].pdp.n_snapshots(), 1);
    }

    #[test]
    fn window_longer_than_session_is_rejected() {
        let cfg = ChannelConfig::default();
        assert!(generate_dataset(&[req(RainLabel::NoRain, 1, 1)], &cfg, 30, 20, 0).is_err());
        assert!(generate_dataset(&[req(RainLabel::NoRain, 0, 1)], &cfg, 2, 20, 0).is_err());
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let cfg = ChannelConfig::default();
        let classes = [
            req(RainLabel::NoRain, 3, 2),
            req(RainLabel::HeavyRain, 2, 2),
        ];
        let a = generate_dataset_with_threads(&classes, &cfg, 4, 20, 11, 1).unwrap();
        let b = generate_dataset_with_threads(&classes, &cfg, 4, 20, 11, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pdp_matrix_columns_are_frames() {
        let frames = vec![
            PdpFrame::new(0.0, vec![1.0, 2.0, 3.0]).unwrap(),
            PdpFrame::new(1.0, vec![4.0, 5.0, 6.0]).unwrap(),
        ];
        let m = PdpMatrix::from_frames(&frames).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(m.column(1), vec![4.0, 5.0, 6.0]);
    }
}
