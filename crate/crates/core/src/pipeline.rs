//! End-to-end runs: backbone warm-up, pair generation, preference training,
//! and the likelihood-only baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{MaskKind, MaskPolicy};
use crate::model::{Model, ModelConfig};
use crate::prefgen::{make_pairs, PairSet};
use crate::synthbench::{evaluate, generate_dataset, DatasetSpec, EvalReport, PairLayout, Sample};
use crate::training::{examples_from_gold, examples_from_pairs, train, Objective, OptimizerKind, TrainConfig, TrainOutput};

/// Dataset shape shared by every split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub eval_size: usize,
    pub bias: f64,
    pub task_mix: [f64; 4],
    pub min_images: usize,
    pub max_images: usize,
    pub density: f64,
    pub pair_layout: PairLayout,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            train_size: 2000,
            eval_size: 500,
            bias: d.bias,
            task_mix: d.task_mix,
            min_images: d.min_images,
            max_images: d.max_images,
            density: d.density,
            pair_layout: d.pair_layout,
        }
    }
}

impl DataConfig {
    pub fn dataset(&self, seed: u64, size: usize) -> DatasetSpec {
        DatasetSpec {
            seed,
            size,
            task_mix: self.task_mix,
            bias: self.bias,
            min_images: self.min_images,
            max_images: self.max_images,
            density: self.density,
            pair_layout: self.pair_layout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset(0, self.train_size).validate()?;
        self.dataset(0, self.eval_size).validate()
    }
}

/// Supervised warm-up of a freshly initialized model on gold answers under
/// causal masks; stands in for a pretrained backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            size: 24000,
            epochs: 3,
            lr: 1e-3,
            batch_size: 4,
        }
    }
}

impl WarmupConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            policy: MaskKind::Causal.into(),
            objective: Objective::NllOnly,
            optimizer: OptimizerKind::Adam,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub warmup: WarmupConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            warmup: WarmupConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Independent sub-seeds per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Train,
    Eval,
}

pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    let k = match stage {
        Stage::Warmup => 1,
        Stage::Train => 2,
        Stage::Eval => 3,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        self.warmup.train_config(0).validate()?;
        if self.data.max_images > self.model.max_images {
            return Err(Error::InvalidArgument(format!(
                "datasets may hold {} images but the model takes at most {}",
                self.data.max_images, self.model.max_images
            )));
        }
        let longest = self.data.max_images * self.model.tokens_per_image() + 4;
        if longest > self.model.max_len {
            return Err(Error::InvalidArgument(format!(
                "prompts reach {longest} tokens, above max_len {}",
                self.model.max_len
            )));
        }
        Ok(())
    }

    pub fn train_set(&self) -> Result<Vec<Sample>> {
        generate_dataset(&self.data.dataset(stage_seed(self.seed, Stage::Train), self.data.train_size))
    }

    pub fn eval_set(&self) -> Result<Vec<Sample>> {
        generate_dataset(&self.data.dataset(stage_seed(self.seed, Stage::Eval), self.data.eval_size))
    }

    pub fn warmup_set(&self) -> Result<Vec<Sample>> {
        generate_dataset(&self.data.dataset(stage_seed(self.seed, Stage::Warmup), self.warmup.size))
    }

    /// Same settings with the likelihood-only objective under causal masks.
    pub fn baseline_train(&self) -> TrainConfig {
        TrainConfig {
            objective: Objective::NllOnly,
            policy: MaskKind::Causal.into(),
            ..self.train.clone()
        }
    }
}

/// Initializes from `cfg.model` and runs the warm-up; `epochs = 0` returns
/// the initialization.
pub fn warm_up(cfg: &PipelineConfig) -> Result<Model> {
    cfg.validate()?;
    let model = Model::init(cfg.model.clone())?;
    if cfg.warmup.epochs == 0 || cfg.warmup.size == 0 {
        return Ok(model);
    }
    let data = cfg.warmup_set()?;
    let out = train(&model, &examples_from_gold(&data), &cfg.warmup.train_config(cfg.seed))?;
    if let Some(epoch) = out.diverged {
        return Err(Error::Diverged { epoch });
    }
    Ok(out.model)
}

/// Pairs from `base` on `train_set`, chosen side under the model's policy.
pub fn build_pairs(base: &Model, train_set: &[Sample]) -> Result<PairSet> {
    make_pairs(base, train_set, base.config.policy)
}

#[derive(Clone, Debug)]
pub struct PreferenceRun {
    pub pairs: PairSet,
    pub output: TrainOutput,
}

/// Pair generation followed by preference training from `base`.
pub fn preference_stage(base: &Model, train_set: &[Sample], train_cfg: &TrainConfig) -> Result<PreferenceRun> {
    let pairs = build_pairs(base, train_set)?;
    let examples = examples_from_pairs(train_set, &pairs.pairs)?;
    let output = train(base, &examples, train_cfg)?;
    Ok(PreferenceRun { pairs, output })
}

/// Likelihood-only training on the chosen answers of `pairs`.
pub fn baseline_stage(base: &Model, train_set: &[Sample], pairs: &PairSet, cfg: &TrainConfig) -> Result<TrainOutput> {
    let examples = examples_from_pairs(train_set, &pairs.pairs)?;
    train(base, &examples, cfg)
}

/// Accuracy and prior agreement of one model under several policies.
pub fn eval_policies(model: &Model, data: &[Sample], policies: &[MaskPolicy]) -> Result<Vec<EvalReport>> {
    policies.iter().map(|&p| evaluate(model, data, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
        let mut bad = PipelineConfig::default();
        bad.model.max_images = 3;
        assert!(bad.validate().is_err());
        let mut long = PipelineConfig::default();
        long.model.max_len = 20;
        assert!(long.validate().is_err());
    }

    #[test]
    fn splits_are_distinct_and_reproducible() {
        let cfg = PipelineConfig {
            data: DataConfig { train_size: 20, eval_size: 20, ..DataConfig::default() },
            ..PipelineConfig::default()
        };
        let a = cfg.train_set().unwrap();
        assert_eq!(a, cfg.train_set().unwrap());
        assert_ne!(a, cfg.eval_set().unwrap());
    }

    #[test]
    fn zero_warmup_is_init() {
        let cfg = PipelineConfig {
            warmup: WarmupConfig { epochs: 0, ..WarmupConfig::default() },
            ..PipelineConfig::default()
        };
        assert_eq!(warm_up(&cfg).unwrap(), Model::init(cfg.model.clone()).unwrap());
    }
}
