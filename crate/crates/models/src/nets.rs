//! RainGaugeNet and the baseline classifiers.

use rainsense_nn::{Graph, ParamStore, Var};

use crate::error::{ModelError, Result};
use crate::layers::{
    build_resnet1d_block, BatchNorm, Builder, Conv, Mlp, Mode, ResNet1DBlock, ResNet1DBlockSpec,
};

pub const N_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub blocks: Vec<usize>,
    pub pooled_len: usize,
    /// Widths of the FC head; the last one is the per-snapshot feature size.
    pub fc: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub blocks: Vec<usize>,
    /// Widths of the FC head; the last one is the class count.
    pub fc: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RainGaugeNetConfig {
    pub spatial: SpatialConfig,
    pub temporal: TemporalConfig,
    pub window: usize,
    pub pdp_len: usize,
}

impl RainGaugeNetConfig {
    /// Full-width network.
    pub fn full() -> Self {
        Self {
            spatial: SpatialConfig {
                stem_channels: 128,
                stem_kernel: 5,
                blocks: vec![128, 256, 64],
                pooled_len: 6,
                fc: vec![64, 32],
            },
            temporal: TemporalConfig {
                stem_channels: 64,
                stem_kernel: 3,
                blocks: vec![64, 32],
                fc: vec![64, 16, N_CLASSES],
            },
            window: 20,
            pdp_len: 40,
        }
    }

    /// Narrow spatial path for single-core training; the temporal path and
    /// all interfaces (32 features x 20 snapshots, 3 logits) are unchanged.
    pub fn desk() -> Self {
        let mut c = Self::full();
        c.spatial.stem_channels = 8;
        c.spatial.blocks = vec![8, 16, 8];
        c
    }

    /// Minimal network for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            spatial: SpatialConfig {
                stem_channels: 4,
                stem_kernel: 5,
                blocks: vec![4, 8, 4],
                pooled_len: 3,
                fc: vec![8, 4],
            },
            temporal: TemporalConfig {
                stem_channels: 4,
                stem_kernel: 3,
                blocks: vec![4, 3],
                fc: vec![6, 5, N_CLASSES],
            },
            window: 4,
            pdp_len: 12,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn feature_len(&self) -> usize {
        *self.spatial.fc.last().expect("spatial FC head")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.spatial;
        let t = &self.temporal;
        if s.blocks.is_empty() || s.fc.is_empty() || t.fc.is_empty() {
            return Err(ModelError::Input("empty block or FC list".into()));
        }
        if s.pooled_len == 0
            || s.pooled_len > self.pdp_len
            || s.stem_kernel % 2 == 0
            || t.stem_kernel % 2 == 0
        {
            return Err(ModelError::Input(
                "inconsistent pooling or kernel sizes".into(),
            ));
        }
        if *t.fc.last().unwrap() != N_CLASSES {
            return Err(ModelError::Input(format!(
                "temporal head must end in {N_CLASSES} logits"
            )));
        }
        Ok(())
    }
}

fn build_stack(b: &mut Builder, name: &str, cin: usize, widths: &[usize]) -> Vec<ResNet1DBlock> {
    let mut prev = cin;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let blk = build_resnet1d_block(
                b,
                &format!("{name}.{i}"),
                ResNet1DBlockSpec {
                    in_channels: prev,
                    out_channels: w,
                },
            );
            prev = w;
            blk
        })
        .collect()
}

/// Intermediate tensors exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct RainGaugeTrace {
    /// `[N * window, C, pdp_len]` after the last spatial block.
    pub spatial_blocks: Var,
    /// `[N * window, C, pooled_len]`.
    pub spatial_pooled: Var,
    /// `[N, features, window]` temporal input.
    pub features: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct RainGaugeNet {
    pub config: RainGaugeNetConfig,
    s_stem: Conv,
    s_bn: BatchNorm,
    s_blocks: Vec<ResNet1DBlock>,
    s_fc: Mlp,
    t_stem: Conv,
    t_bn: BatchNorm,
    t_blocks: Vec<ResNet1DBlock>,
    t_fc: Mlp,
}

impl RainGaugeNet {
    pub fn new(b: &mut Builder, config: RainGaugeNetConfig) -> Result<Self> {
        config.validate()?;
        let s = &config.spatial;
        let t = &config.temporal;
        let s_stem = Conv::new_1d(
            b,
            "spatial.stem",
            1,
            s.stem_channels,
            s.stem_kernel,
            s.stem_kernel / 2,
            false,
        );
        let s_bn = BatchNorm::new(b, "spatial.stem_bn", s.stem_channels);
        let s_blocks = build_stack(b, "spatial.block", s.stem_channels, &s.blocks);
        let s_last = *s.blocks.last().unwrap();
        let s_fc = Mlp::new(b, "spatial.fc", s_last * s.pooled_len, &s.fc);
        let feat = config.feature_len();
        let t_stem = Conv::new_1d(
            b,
            "temporal.stem",
            feat,
            t.stem_channels,
            t.stem_kernel,
            t.stem_kernel / 2,
            false,
        );
        let t_bn = BatchNorm::new(b, "temporal.stem_bn", t.stem_channels);
        let t_blocks = build_stack(b, "temporal.block", t.stem_channels, &t.blocks);
        let t_last = *t.blocks.last().unwrap();
        let t_fc = Mlp::new(b, "temporal.fc", t_last * config.window, &t.fc);
        Ok(Self {
            config,
            s_stem,
            s_bn,
            s_blocks,
            s_fc,
            t_stem,
            t_bn,
            t_blocks,
            t_fc,
        })
    }

    /// `x: [N, pdp_len, window]` -> logits `[N, 3]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        Ok(self.forward_traced(g, store, x, mode)?.logits)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<RainGaugeTrace> {
        let shape = g.value(x).shape().to_vec();
        let (l, w) = (self.config.pdp_len, self.config.window);
        if shape.len() != 3 || shape[1] != l || shape[2] != w {
            return Err(ModelError::Input(format!(
                "expected [N, {l}, {w}], got {shape:?}"
            )));
        }
        let n = shape[0];
        // one length-L sequence per snapshot
        let h = g.permute(x, &[0, 2, 1])?;
        let h = g.reshape(h, &[n * w, 1, l])?;
        let h = self.s_stem.forward(g, store, h)?;
        let h = self.s_bn.forward(g, store, h, mode)?;
        let mut h = g.relu(h);
        for blk in &self.s_blocks {
            h = blk.forward(g, store, h, mode)?;
        }
        let spatial_blocks = h;
        let spatial_pooled = g.adaptive_avg_pool1d(h, self.config.spatial.pooled_len)?;
        let h = g.flatten(spatial_pooled)?;
        let h = self.s_fc.forward(g, store, h)?;
        let h = g.reshape(h, &[n, w, self.config.feature_len()])?;
        let features = g.permute(h, &[0, 2, 1])?;

        let h = self.t_stem.forward(g, store, features)?;
        let h = self.t_bn.forward(g, store, h, mode)?;
        let mut h = g.relu(h);
        for blk in &self.t_blocks {
            h = blk.forward(g, store, h, mode)?;
        }
        let h = g.flatten(h)?;
        let logits = self.t_fc.forward(g, store, h)?;
        Ok(RainGaugeTrace {
            spatial_blocks,
            spatial_pooled,
            features,
            logits,
        })
    }
}

/// 1-D CNN over the windowed RSS series `[N, 1, window]`.
#[derive(Debug, Clone)]
pub struct RssNet {
    pub window: usize,
    conv1: Conv,
    conv2: Conv,
    fc: Mlp,
}

impl RssNet {
    pub fn new(b: &mut Builder, window: usize) -> Result<Self> {
        if window < 4 {
            return Err(ModelError::Input("RSS window must be at least 4".into()));
        }
        let conv1 = Conv::new_1d(b, "rss.conv1", 1, 16, 3, 1, true);
        let conv2 = Conv::new_1d(b, "rss.conv2", 16, 32, 3, 1, true);
        let flat = 32 * ((window / 2) / 2);
        let fc = Mlp::new(b, "rss.fc", flat, &[128, N_CLASSES]);
        Ok(Self {
            window,
            conv1,
            conv2,
            fc,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 3 || s[1] != 1 || s[2] != self.window {
            return Err(ModelError::Input(format!(
                "expected [N, 1, {}], got {s:?}",
                self.window
            )));
        }
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h);
        let h = g.maxpool1d(h, 2, 2)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = g.relu(h);
        let h = g.maxpool1d(h, 2, 2)?;
        let h = g.flatten(h)?;
        self.fc.forward(g, store, h)
    }
}

/// 2-D CNN over the PDP matrix as a one-channel image `[N, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct CnnBaseline {
    pub height: usize,
    pub width: usize,
    conv1: Conv,
    conv2: Conv,
    fc: Mlp,
}

impl CnnBaseline {
    pub fn new(b: &mut Builder, height: usize, width: usize) -> Result<Self> {
        if height < 4 || width < 4 {
            return Err(ModelError::Input("CNN input must be at least 4x4".into()));
        }
        let conv1 = Conv::new_2d(b, "cnn.conv1", 1, 16, 3, 1);
        let conv2 = Conv::new_2d(b, "cnn.conv2", 16, 32, 3, 1);
        let flat = 32 * (height / 2 / 2) * (width / 2 / 2);
        let fc = Mlp::new(b, "cnn.fc", flat, &[128, N_CLASSES]);
        Ok(Self {
            height,
            width,
            conv1,
            conv2,
            fc,
        })
    }

    /// Logits plus the feature maps after each pool.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
    ) -> Result<(Var, Var, Var)> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != self.height || s[3] != self.width {
            return Err(ModelError::Input(format!(
                "expected [N, 1, {}, {}], got {s:?}",
                self.height, self.width
            )));
        }
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h);
        let p1 = g.maxpool2d(h, 2, 2)?;
        let h = self.conv2.forward(g, store, p1)?;
        let h = g.relu(h);
        let p2 = g.maxpool2d(h, 2, 2)?;
        let h = g.flatten(p2)?;
        Ok((self.fc.forward(g, store, h)?, p1, p2))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, x)?.0)
    }
}
