//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates probed per input; all of them when `None`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `|a - n| / (|a| + |n|)` per input over the probed coordinates.
    pub rel_errors: Vec<f64>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale =
        a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

impl GradCheck {
    /// Checks `d/dx sum(R * f(x))` for a fixed random projection `R`.
    ///
    /// `f` builds the op under test on the given input vars; it is called once
    /// with gradient-tracking leaves and twice per probed coordinate with
    /// constants.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let shape = g.value(out).shape().to_vec();
        let n_out = g.value(out).numel();
        let proj = Tensor::new(
            &shape,
            (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let loss = g.dot_const(out, proj.clone())?;
        g.backward(loss)?;

        let eval = |xs: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            let l = g.dot_const(out, proj.clone())?;
            Ok(g.value(l).item())
        };

        let mut rel_errors = Vec::with_capacity(inputs.len());
        let mut coords_checked = 0;
        for (i, v) in vars.iter().enumerate() {
            let analytic_full = g
                .grad(*v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
            let n = inputs[i].numel();
            let coords: Vec<usize> = match self.max_coords {
                Some(k) if k < n => rand::seq::index::sample(&mut rng, n, k).into_vec(),
                _ => (0..n).collect(),
            };
            let mut analytic = Vec::with_capacity(coords.len());
            let mut numeric = Vec::with_capacity(coords.len());
            let mut xs = inputs.to_vec();
            for &j in &coords {
                let orig = xs[i].data()[j];
                xs[i].data_mut()[j] = orig + self.step;
                let plus = eval(&xs)?;
                xs[i].data_mut()[j] = orig - self.step;
                let minus = eval(&xs)?;
                xs[i].data_mut()[j] = orig;
                numeric.push((plus - minus) / (2.0 * self.step));
                analytic.push(analytic_full[j]);
            }
            coords_checked += coords.len();
            rel_errors.push(rel_error(&analytic, &numeric));
        }
        Ok(GradCheckReport {
            rel_errors,
            coords_checked,
        })
    }
}
