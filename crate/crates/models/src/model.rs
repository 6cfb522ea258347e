//! A classifier of any supported architecture together with its parameters
//! and input normalization.

use std::path::Path;

use rainsense_core::Record;
use rainsense_nn::checkpoint::Checkpoint;
use rainsense_nn::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};
use crate::layers::{Builder, Mode};
use crate::nets::{CnnBaseline, RainGaugeNet, RainGaugeNetConfig, RssNet};
use crate::preprocess::{as_image, make_single_snapshot_input, Normalizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    RainGauge,
    /// RainGaugeNet fed only the first snapshot of each window.
    Single,
    Cnn,
    Rss,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::RainGauge, Arch::Single, Arch::Cnn, Arch::Rss];

    pub fn name(self) -> &'static str {
        match self {
            Arch::RainGauge => "raingaugenet",
            Arch::Single => "raingaugenet-single",
            Arch::Cnn => "cnn",
            Arch::Rss => "rss-net",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone)]
enum Net {
    RainGauge(RainGaugeNet),
    Cnn(CnnBaseline),
    Rss(RssNet),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Arch,
    pub preset: String,
    pub seed: u64,
    pub normalizer: Normalizer,
    pub store: ParamStore,
    config: RainGaugeNetConfig,
    net: Net,
}

impl Model {
    /// `preset` picks the RainGaugeNet widths and fixes the input geometry
    /// (taps x window) for every architecture.
    pub fn new(arch: Arch, preset: &str, seed: u64, normalizer: Normalizer) -> Result<Self> {
        let config = RainGaugeNetConfig::preset(preset)
            .ok_or_else(|| ModelError::Input(format!("unknown preset {preset:?}")))?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let net = match arch {
            Arch::RainGauge | Arch::Single => {
                Net::RainGauge(RainGaugeNet::new(&mut b, config.clone())?)
            }
            Arch::Cnn => Net::Cnn(CnnBaseline::new(&mut b, config.pdp_len, config.window)?),
            Arch::Rss => Net::Rss(RssNet::new(&mut b, config.window)?),
        };
        Ok(Self {
            arch,
            preset: preset.to_string(),
            seed,
            normalizer,
            store,
            config,
            net,
        })
    }

    pub fn config(&self) -> &RainGaugeNetConfig {
        &self.config
    }

    /// Model-ready input tensor for a batch of records.
    pub fn prepare(&self, records: &[Record]) -> Result<Tensor> {
        let n = &self.normalizer;
        let t = match self.arch {
            Arch::RainGauge => n.pdp_tensor(records)?,
            Arch::Single => make_single_snapshot_input(&n.pdp_tensor(records)?)?,
            Arch::Cnn => as_image(n.pdp_tensor(records)?)?,
            Arch::Rss => n.rss_tensor(records)?,
        };
        self.check_input(&t)?;
        Ok(t)
    }

    fn check_input(&self, t: &Tensor) -> Result<()> {
        let (l, w) = (self.config.pdp_len, self.config.window);
        let ok = match self.arch {
            Arch::RainGauge | Arch::Single => t.ndim() == 3 && t.shape()[1..] == [l, w],
            Arch::Cnn => t.ndim() == 4 && t.shape()[1..] == [1, l, w],
            Arch::Rss => t.ndim() == 3 && t.shape()[1..] == [1, w],
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::Input(format!(
                "{} ({} preset) cannot take input of shape {:?}",
                self.arch.name(),
                self.preset,
                t.shape()
            )))
        }
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        match &self.net {
            Net::RainGauge(n) => n.forward(g, &mut self.store, x, mode),
            Net::Cnn(n) => n.forward(g, &self.store, x),
            Net::Rss(n) => n.forward(g, &self.store, x),
        }
    }

    pub fn raingauge(&self) -> Option<&RainGaugeNet> {
        match &self.net {
            Net::RainGauge(n) => Some(n),
            _ => None,
        }
    }

    /// Eval-mode logits `[N, 3]` for a prepared input.
    pub fn logits(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv, Mode::Eval)?;
        Ok(g.value(y).clone())
    }

    /// Predicted class per record, evaluated in chunks.
    pub fn predict(&mut self, records: &[Record], chunk: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(records.len());
        for part in records.chunks(chunk.max(1)) {
            let x = self.prepare(part)?;
            out.extend(self.logits(&x)?.argmax_rows());
        }
        Ok(out)
    }

    fn metadata(&self) -> String {
        let n = &self.normalizer;
        format!(
            "arch={};preset={};seed={};pdp_floor_db={};pdp_mean={};pdp_std={};rss_mean={};rss_std={}",
            self.arch.name(),
            self.preset,
            self.seed,
            n.pdp_floor_db,
            n.pdp_mean,
            n.pdp_std,
            n.rss_mean,
            n.rss_std
        )
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, self.metadata())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::Checkpoint(format!("{k} is not a number")))
        };
        let arch = Arch::from_name(get("arch")?).ok_or_else(|| {
            ModelError::Checkpoint(format!("unknown arch {:?}", get("arch").unwrap()))
        })?;
        let seed = get("seed")?
            .parse()
            .map_err(|_| ModelError::Checkpoint("seed is not an integer".into()))?;
        let normalizer = Normalizer {
            pdp_floor_db: num("pdp_floor_db")?,
            pdp_mean: num("pdp_mean")?,
            pdp_std: num("pdp_std")?,
            rss_mean: num("rss_mean")?,
            rss_std: num("rss_std")?,
        };
        let mut model = Model::new(arch, get("preset")?, seed, normalizer)?;
        if ck.params.len() != model.store.n_params()
            || ck.buffers.len() != model.store.named_buffers().count()
        {
            return Err(ModelError::Checkpoint(format!(
                "tensor count does not match a {} ({}) model",
                arch.name(),
                model.preset
            )));
        }
        ck.restore(&mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
