//! Run configuration: a TOML file with one table per concern, overridden by
//! command-line flags and validated before anything is written.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crossview_core::masks::{check_rho, MaskPolicy};
use crossview_core::model::ModelConfig;
use crossview_core::pipeline::{DataConfig, PipelineConfig, WarmupConfig};
use crossview_core::training::TrainConfig;

use crate::Failure;

/// Names accepted by `dump-mask`.
pub const DUMP_KINDS: [&str; 4] = ["causal", "cross", "selective", "truncated"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mask_mode: MaskPolicy,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mask_mode: MaskPolicy::CROSS_ATTENTIVE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub rho: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            rho: vec![0.5, 0.7, 0.9, 0.95, 1.0],
            lambda: vec![0.0, 1.0, 2.0, 2.5, 4.0],
        }
    }
}

/// Layout for `dump-mask`: `images[k]` visual tokens followed by `texts[k]`
/// text tokens, per block. Selection scores are all tied, so key tokens are
/// the leading positions of each image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpSection {
    pub images: Vec<usize>,
    pub texts: Vec<usize>,
    pub kind: String,
}

impl Default for DumpSection {
    fn default() -> Self {
        Self {
            images: vec![2, 2],
            texts: vec![0, 0],
            kind: "cross".into(),
        }
    }
}

/// Optional inputs; anything unset is generated from the seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    /// Warmed-up backbone; warm-up runs when unset.
    pub base: Option<PathBuf>,
    /// Checkpoint for `eval`; defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives data generation, initialization and shuffling.
    pub seed: u64,
    /// Output directory. Not echoed into artifacts.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub warmup: WarmupConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub dump: DumpSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            warmup: WarmupConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
            dump: DumpSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub mask_mode: Option<String>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| Failure::config(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    /// Applies overrides. `mask_mode` sets the dump kind for `dump-mask`
    /// and the mask policy everywhere else.
    pub fn apply(&mut self, o: &Overrides, dump: bool) -> Result<(), Failure> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = o.rho {
            self.model.rho = r;
        }
        if let Some(l) = o.lambda {
            self.train.lambda = l;
        }
        if let Some(b) = o.beta {
            self.train.beta = b;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        if let Some(mode) = &o.mask_mode {
            if dump {
                self.dump.kind = mode.clone();
            } else {
                let p: MaskPolicy = mode.parse().map_err(Failure::config)?;
                self.eval.mask_mode = p;
                self.train.policy = p;
                self.model.policy = p;
            }
        }
        Ok(())
    }

    /// Pipeline settings with the run seed applied to every stage.
    pub fn pipeline(&self) -> PipelineConfig {
        let mut p = PipelineConfig {
            seed: self.seed,
            model: self.model.clone(),
            data: self.data.clone(),
            warmup: self.warmup.clone(),
            train: self.train.clone(),
        };
        p.model.seed = self.seed;
        p.train.seed = self.seed;
        p
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.pipeline().validate().map_err(Failure::config)?;
        if self.ablate.rho.is_empty() || self.ablate.lambda.is_empty() {
            return Err(Failure::config("ablation grids must be nonempty"));
        }
        for &r in &self.ablate.rho {
            check_rho(r).map_err(Failure::config)?;
        }
        for &l in &self.ablate.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Failure::config(format!("ablation lambda {l} must be finite and >= 0")));
            }
        }
        if self.dump.images.is_empty() || self.dump.images.len() != self.dump.texts.len() {
            return Err(Failure::config("dump layout needs one text length per image"));
        }
        if self.dump.images.contains(&0) {
            return Err(Failure::config("dump layout images need at least one token"));
        }
        Ok(())
    }

    /// Effective settings as TOML, echoed into every artifact manifest.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

pub fn check_dump_kind(kind: &str) -> Result<(), Failure> {
    if DUMP_KINDS.contains(&kind) {
        Ok(())
    } else {
        Err(Failure::config(format!(
            "unknown mask kind {kind:?} (valid kinds: {})",
            DUMP_KINDS.join(", ")
        )))
    }
}
