//! Input scaling and tensor assembly.

use rainsense_core::Record;
use rainsense_nn::Tensor;

use crate::error::{ModelError, Result};

/// PDP taps go to dB with a floor, then all inputs are standardized with
/// training-set statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub pdp_floor_db: f64,
    pub pdp_mean: f64,
    pub pdp_std: f64,
    pub rss_mean: f64,
    pub rss_std: f64,
}

impl Normalizer {
    pub fn identity(pdp_floor_db: f64) -> Self {
        Self {
            pdp_floor_db,
            pdp_mean: 0.0,
            pdp_std: 1.0,
            rss_mean: 0.0,
            rss_std: 1.0,
        }
    }

    pub fn fit(records: &[Record], pdp_floor_db: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(ModelError::Input(
                "cannot fit a normalizer on no records".into(),
            ));
        }
        let floor = pdp_floor_db;
        let (pdp_mean, pdp_std) = mean_std(
            records
                .iter()
                .flat_map(|r| r.pdp.as_slice().iter().map(move |&p| to_db(p, floor))),
        );
        let (rss_mean, rss_std) = mean_std(
            records
                .iter()
                .filter_map(|r| r.rss.as_ref())
                .flatten()
                .copied(),
        );
        Ok(Self {
            pdp_floor_db,
            pdp_mean,
            pdp_std,
            rss_mean,
            rss_std,
        })
    }

    pub fn pdp_value(&self, p: f64) -> f64 {
        (to_db(p, self.pdp_floor_db) - self.pdp_mean) / self.pdp_std
    }

    pub fn rss_value(&self, r: f64) -> f64 {
        (r - self.rss_mean) / self.rss_std
    }

    /// `[N, taps, snapshots]`.
    pub fn pdp_tensor(&self, records: &[Record]) -> Result<Tensor> {
        let first = records
            .first()
            .ok_or_else(|| ModelError::Input("no records".into()))?;
        let (l, w) = (first.pdp.n_taps(), first.pdp.n_snapshots());
        let mut data = Vec::with_capacity(records.len() * l * w);
        for r in records {
            if r.pdp.n_taps() != l || r.pdp.n_snapshots() != w {
                return Err(ModelError::Input(
                    "records have different PDP matrix sizes".into(),
                ));
            }
            data.extend(r.pdp.as_slice().iter().map(|&p| self.pdp_value(p)));
        }
        Ok(Tensor::new(&[records.len(), l, w], data)?)
    }

    /// `[N, 1, window]`.
    pub fn rss_tensor(&self, records: &[Record]) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut w = None;
        for r in records {
            let rss = r
                .rss
                .as_ref()
                .ok_or_else(|| ModelError::Input("record has no RSS series".into()))?;
            if *w.get_or_insert(rss.len()) != rss.len() {
                return Err(ModelError::Input(
                    "records have different RSS window lengths".into(),
                ));
            }
            data.extend(rss.iter().map(|&v| self.rss_value(v)));
        }
        let w = w.ok_or_else(|| ModelError::Input("no records".into()))?;
        Ok(Tensor::new(&[records.len(), 1, w], data)?)
    }
}

fn to_db(p: f64, floor_db: f64) -> f64 {
    if p > 0.0 {
        (10.0 * p.log10()).max(floor_db)
    } else {
        floor_db
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for v in values {
        n += 1;
        sum += v;
        sq += v * v;
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

/// Keeps the first snapshot of each window and zeroes the rest.
/// Accepts `[taps, snapshots]` or `[N, taps, snapshots]`.
pub fn make_single_snapshot_input(pdp: &Tensor) -> Result<Tensor> {
    let w = match pdp.ndim() {
        2 | 3 => *pdp.shape().last().unwrap(),
        r => {
            return Err(ModelError::Input(format!(
                "expected a rank 2 or 3 PDP tensor, got rank {r}"
            )))
        }
    };
    let mut out = pdp.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if i % w != 0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// `[N, taps, snapshots]` -> `[N, 1, taps, snapshots]`.
pub fn as_image(pdp: Tensor) -> Result<Tensor> {
    let s = pdp.shape().to_vec();
    if s.len() != 3 {
        return Err(ModelError::Input(format!(
            "expected [N, taps, snapshots], got {s:?}"
        )));
    }
    Ok(pdp.reshaped(&[s[0], 1, s[1], s[2]])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_snapshot_keeps_first_column() {
        let t = Tensor::full(&[2, 3, 4], 1.0);
        let s = make_single_snapshot_input(&t).unwrap();
        for n in 0..2 {
            for k in 0..3 {
                for j in 0..4 {
                    let v = s.data()[n * 12 + k * 4 + j];
                    assert_eq!(v, if j == 0 { 1.0 } else { 0.0 });
                }
            }
        }
        assert!(make_single_snapshot_input(&Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn db_floor_applies_to_zero_and_small() {
        assert_eq!(to_db(0.0, -100.0), -100.0);
        assert_eq!(to_db(1e-20, -100.0), -100.0);
        assert!((to_db(1e-3, -100.0) + 30.0).abs() < 1e-12);
    }
}
