//! Parameterized building blocks on top of the autodiff graph.

use rainsense_nn::params::uniform_fan_in;
use rainsense_nn::{BufferId, Graph, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Batch statistics in the forward pass; running statistics become the
    /// cumulative average over refresh batches `0..=batch`.
    Refresh {
        batch: usize,
    },
}

/// Parameter factory: names are `prefix.sub`, values drawn from one stream.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let t = uniform_fan_in(self.rng, shape, fan_in);
        self.store.add_param(name, t)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    two_d: bool,
}

impl Conv {
    pub fn new_1d(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * k;
        let weight = b.uniform(format!("{name}.weight"), &[cout, cin, k], fan_in);
        let bias = bias.then(|| {
            b.store
                .add_param(format!("{name}.bias"), Tensor::zeros(&[cout]))
        });
        Conv {
            weight,
            bias,
            stride: 1,
            padding,
            two_d: false,
        }
    }

    pub fn new_2d(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        padding: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = b.uniform(format!("{name}.weight"), &[cout, cin, k, k], fan_in);
        let bias = Some(
            b.store
                .add_param(format!("{name}.bias"), Tensor::zeros(&[cout])),
        );
        Conv {
            weight,
            bias,
            stride: 1,
            padding,
            two_d: true,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|id| g.param(store, id));
        Ok(if self.two_d {
            g.conv2d(x, w, b, self.stride, self.padding)?
        } else {
            g.conv1d(x, w, b, self.stride, self.padding)?
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: b
                .store
                .add_param(format!("{name}.weight"), Tensor::full(&[channels], 1.0)),
            beta: b
                .store
                .add_param(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: b
                .store
                .add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: b.store.add_buffer(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
            ),
        }
    }

    /// Training mode also folds the batch statistics into the running ones
    /// (momentum 0.1, unbiased variance).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train | Mode::Refresh { .. } => {
                let momentum = match mode {
                    Mode::Refresh { batch } => 1.0 / (batch as f64 + 1.0),
                    _ => BN_MOMENTUM,
                };
                let (y, stats) = g.batchnorm_train(x, gamma, beta, BN_EPS)?;
                let unbias = stats.count as f64 / (stats.count as f64 - 1.0).max(1.0);
                let rm = store.buffer_mut(self.running_mean).data_mut();
                for (r, m) in rm.iter_mut().zip(&stats.mean) {
                    *r = (1.0 - momentum) * *r + momentum * m;
                }
                let rv = store.buffer_mut(self.running_var).data_mut();
                for (r, v) in rv.iter_mut().zip(&stats.var) {
                    *r = (1.0 - momentum) * *r + momentum * v * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = store.buffer(self.running_mean).data().to_vec();
                let rv = store.buffer(self.running_var).data().to_vec();
                Ok(g.batchnorm_eval(x, gamma, beta, &rm, &rv, BN_EPS)?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fin: usize, fout: usize) -> Self {
        Linear {
            weight: b.uniform(format!("{name}.weight"), &[fout, fin], fin),
            bias: b
                .store
                .add_param(format!("{name}.bias"), Tensor::zeros(&[fout])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        Ok(g.linear(x, w, Some(b))?)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, fin: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = fin;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(b, &format!("{name}.{i}"), prev, w));
            prev = w;
        }
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResNet1DBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

/// conv3 -> BN -> ReLU -> conv3 -> BN, plus identity or 1x1 conv + BN
/// shortcut, then ReLU.
#[derive(Debug, Clone)]
pub struct ResNet1DBlock {
    pub spec: ResNet1DBlockSpec,
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub shortcut: Option<(Conv, BatchNorm)>,
}

pub fn build_resnet1d_block(b: &mut Builder, name: &str, spec: ResNet1DBlockSpec) -> ResNet1DBlock {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let conv1 = Conv::new_1d(b, &format!("{name}.conv1"), cin, cout, 3, 1, false);
    let bn1 = BatchNorm::new(b, &format!("{name}.bn1"), cout);
    let conv2 = Conv::new_1d(b, &format!("{name}.conv2"), cout, cout, 3, 1, false);
    let bn2 = BatchNorm::new(b, &format!("{name}.bn2"), cout);
    let shortcut = (cin != cout).then(|| {
        (
            Conv::new_1d(b, &format!("{name}.shortcut.conv"), cin, cout, 1, 0, false),
            BatchNorm::new(b, &format!("{name}.shortcut.bn"), cout),
        )
    });
    ResNet1DBlock {
        spec,
        conv1,
        bn1,
        conv2,
        bn2,
        shortcut,
    }
}

impl ResNet1DBlock {
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h, mode)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h)?;
        let h = self.bn2.forward(g, store, h, mode)?;
        let s = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, store, x)?;
                bn.forward(g, store, s, mode)?
            }
            None => x,
        };
        let y = g.add(h, s)?;
        Ok(g.relu(y))
    }
}
