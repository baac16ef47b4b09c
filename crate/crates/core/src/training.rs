//! Preference and likelihood objectives, optimizers, and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::params_hash;
use crate::error::{Error, Result};
use crate::masks::MaskPolicy;
use crate::model::{Model, ParamVars, Parameters, Prompt};
use crate::numerics::{finite_diff, relative_error, sigmoid, softplus, Tape, Tensor, Var};
use crate::prefgen::{resolve, PreferencePair};
use crate::synthbench::Sample;

fn check_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `β(logp⁺ − ref⁺) − β(logp⁻ − ref⁻)`.
pub fn dpo_margin(lp_plus: f64, ref_plus: f64, lp_minus: f64, ref_minus: f64, beta: f64) -> f64 {
    beta * (lp_plus - ref_plus) - beta * (lp_minus - ref_minus)
}

/// `−ln σ(margin)`.
pub fn dpo_loss(lp_plus: f64, ref_plus: f64, lp_minus: f64, ref_minus: f64, beta: f64) -> Result<f64> {
    Ok(dpo_loss_grad(lp_plus, ref_plus, lp_minus, ref_minus, beta)?.0)
}

/// Loss plus its derivatives with respect to `lp_plus` and `lp_minus`.
pub fn dpo_loss_grad(
    lp_plus: f64,
    ref_plus: f64,
    lp_minus: f64,
    ref_minus: f64,
    beta: f64,
) -> Result<(f64, f64, f64)> {
    check_finite(&[lp_plus, ref_plus, lp_minus, ref_minus, beta], "dpo_loss input")?;
    if beta <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    let m = dpo_margin(lp_plus, ref_plus, lp_minus, ref_minus, beta);
    let s = sigmoid(-m);
    Ok((softplus(-m), -beta * s, beta * s))
}

/// Negative sum of per-token log-probabilities.
pub fn nll_loss(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::InvalidArgument("nll_loss needs at least one token".into()));
    }
    check_finite(token_logprobs, "nll_loss input")?;
    Ok(-token_logprobs.iter().sum::<f64>())
}

pub fn total_loss(dpo: f64, nll: f64, lambda: f64) -> f64 {
    dpo + lambda * nll
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// DPO plus λ-weighted NLL of the chosen answer.
    Preference,
    /// NLL of the chosen answer alone.
    NllOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub policy: MaskPolicy,
    pub objective: Objective,
    pub optimizer: OptimizerKind,
    /// Divide the NLL term by the answer length.
    pub length_normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lambda: 2.5,
            lr: 1e-4,
            epochs: 5,
            batch_size: 16,
            seed: 0,
            policy: MaskPolicy::CROSS_ATTENTIVE,
            objective: Objective::Preference,
            optimizer: OptimizerKind::Adam,
            length_normalize: false,
        }
    }
}

impl TrainConfig {
    /// A learning rate of exactly 0 is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        Ok(())
    }
}

/// Frozen copy of the parameters a run starts from.
#[derive(Clone, Debug)]
pub struct ReferenceSnapshot {
    model: Model,
    hash: String,
}

impl ReferenceSnapshot {
    pub fn capture(model: &Model) -> Self {
        Self {
            model: model.clone(),
            hash: params_hash(&model.params),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Hash taken at capture time.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Hash of the parameters as they are now.
    pub fn current_hash(&self) -> String {
        params_hash(&self.model.params)
    }
}

/// A prompt with its chosen and (possibly empty) rejected answers.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub prompt: Prompt,
    pub plus: Vec<u32>,
    pub minus: Vec<u32>,
}

pub fn examples_from_pairs(dataset: &[Sample], pairs: &[PreferencePair]) -> Result<Vec<Example>> {
    Ok(resolve(dataset, pairs)?
        .into_iter()
        .map(|(s, p)| Example {
            prompt: s.prompt(),
            plus: p.y_plus,
            minus: p.y_minus,
        })
        .collect())
}

/// Gold-answer examples without a rejected side, for likelihood-only training.
pub fn examples_from_gold(dataset: &[Sample]) -> Vec<Example> {
    dataset
        .iter()
        .map(|s| Example {
            prompt: s.prompt(),
            plus: vec![s.gold],
            minus: Vec::new(),
        })
        .collect()
}

/// Reference log-probabilities `(ref⁺, ref⁻)` per example.
pub fn reference_logprobs(reference: &Model, examples: &[Example], cfg: &TrainConfig) -> Result<Vec<(f64, f64)>> {
    if cfg.objective == Objective::NllOnly {
        return Ok(vec![(0.0, 0.0); examples.len()]);
    }
    examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::inference();
            let vars = reference.params.register(&mut tape);
            let lps = reference.answer_logprobs_on_tape(&mut tape, &vars, &ex.prompt, &[&ex.plus, &ex.minus], cfg.policy)?;
            Ok((tape.value(lps[0]).sum(), tape.value(lps[1]).sum()))
        })
        .collect()
}

/// Loss of one example on a tape.
pub struct ExampleLoss {
    pub total: Var,
    pub dpo: f64,
    pub nll: f64,
    /// β-scaled DPO margin; 0 for likelihood-only training.
    pub margin: f64,
}

pub fn example_loss_on_tape(
    model: &Model,
    tape: &mut Tape,
    vars: &ParamVars,
    ex: &Example,
    reference: (f64, f64),
    cfg: &TrainConfig,
) -> Result<ExampleLoss> {
    let preference = cfg.objective == Objective::Preference;
    if preference && ex.minus.is_empty() {
        return Err(Error::InvalidArgument("preference training needs a rejected answer".into()));
    }
    let answers: Vec<&[u32]> = if preference { vec![&ex.plus, &ex.minus] } else { vec![&ex.plus] };
    let lps = model.answer_logprobs_on_tape(tape, vars, &ex.prompt, &answers, cfg.policy)?;
    let lp_plus = tape.sum(lps[0]);
    let mut nll = tape.neg(lp_plus);
    if cfg.length_normalize {
        nll = tape.scale(nll, 1.0 / ex.plus.len() as f64);
    }
    let nll_value = tape.value(nll).item();
    if !preference {
        return Ok(ExampleLoss {
            total: nll,
            dpo: 0.0,
            nll: nll_value,
            margin: 0.0,
        });
    }
    let lp_minus = tape.sum(lps[1]);
    let diff = tape.sub(lp_plus, lp_minus)?;
    let ref_diff = tape.constant(Tensor::scalar(reference.0 - reference.1));
    let shifted = tape.sub(diff, ref_diff)?;
    let margin = tape.scale(shifted, cfg.beta);
    let neg_margin = tape.neg(margin);
    let dpo = tape.softplus(neg_margin);
    let weighted = tape.scale(nll, cfg.lambda);
    let total = tape.add(dpo, weighted)?;
    Ok(ExampleLoss {
        total,
        dpo: tape.value(dpo).item(),
        nll: nll_value,
        margin: tape.value(margin).item(),
    })
}

/// Loss value and flat gradient (in [`Parameters::named`] order) of one example.
pub fn example_gradient(model: &Model, ex: &Example, reference: (f64, f64), cfg: &TrainConfig) -> Result<(ExampleStats, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape);
    let loss = example_loss_on_tape(model, &mut tape, &vars, ex, reference, cfg)?;
    let stats = ExampleStats {
        total: tape.value(loss.total).item(),
        dpo: loss.dpo,
        nll: loss.nll,
        margin: loss.margin,
    };
    let grads = tape.backward(loss.total)?;
    let mut flat = Vec::with_capacity(model.params.num_values());
    for v in vars.vars() {
        match grads.get(v) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat(0.0).take(tape.value(v).len())),
        }
    }
    Ok((stats, flat))
}

/// Loss value only, without gradients.
pub fn example_loss_value(model: &Model, ex: &Example, reference: (f64, f64), cfg: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::inference();
    let vars = model.params.register(&mut tape);
    let loss = example_loss_on_tape(model, &mut tape, &vars, ex, reference, cfg)?;
    Ok(tape.value(loss.total).item())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExampleStats {
    pub total: f64,
    pub dpo: f64,
    pub nll: f64,
    pub margin: f64,
}

/// Adaptive-moment or plain gradient descent over a flat parameter vector.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, m: Vec<f64>, v: Vec<f64>, t: i32 },
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam { lr, m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_B1.powi(*t);
                let c2 = 1.0 - ADAM_B2.powi(*t);
                for i in 0..params.len() {
                    m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * grad[i];
                    v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * grad[i] * grad[i];
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    params[i] -= *lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub total_loss: f64,
    pub dpo_loss: f64,
    pub nll_loss: f64,
    /// Mean β-scaled margin.
    pub margin: f64,
    /// Fraction of examples with a positive margin.
    pub reward_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Final model, or the last finite one when training diverged.
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    /// Epoch in which a non-finite loss or parameter appeared.
    pub diverged: Option<usize>,
    pub reference: ReferenceSnapshot,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Minibatch descent on the configured objective. The reference snapshot is
/// captured from `model` before the first update.
pub fn train(model: &Model, examples: &[Example], cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with_observer(model, examples, cfg, |_, _| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_observer(
    model: &Model,
    examples: &[Example],
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochMetrics, &Model),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one example".into()));
    }
    let reference = ReferenceSnapshot::capture(model);
    let refs = reference_logprobs(reference.model(), examples, cfg)?;
    let mut current = model.clone();
    let mut flat = current.params.flatten();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, flat.len());
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut diverged = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let last_good = current.params.clone();
        let mut sums = ExampleStats::default();
        let mut wins = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(ExampleStats, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| example_gradient(&current, &examples[i], refs[i], cfg))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; flat.len()];
            for (stats, g) in &results {
                if !stats.total.is_finite() {
                    current.params = last_good;
                    diverged = Some(epoch);
                    break 'epochs;
                }
                sums.total += stats.total;
                sums.dpo += stats.dpo;
                sums.nll += stats.nll;
                sums.margin += stats.margin;
                wins += (stats.margin > 0.0) as usize;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            opt.step(&mut flat, &grad);
            if !flat.iter().all(|x| x.is_finite()) {
                current.params = last_good;
                diverged = Some(epoch);
                break 'epochs;
            }
            current.params.assign_flat(&flat)?;
        }
        let n = examples.len() as f64;
        let m = EpochMetrics {
            epoch,
            total_loss: sums.total / n,
            dpo_loss: sums.dpo / n,
            nll_loss: sums.nll / n,
            margin: sums.margin / n,
            reward_accuracy: wins as f64 / n,
        };
        observe(&m, &current);
        metrics.push(m);
    }
    debug_assert_eq!(reference.current_hash(), reference.hash());
    Ok(TrainOutput {
        model: current,
        metrics,
        diverged,
        reference,
    })
}

/// Builds examples from pairs and trains on them.
pub fn train_on_pairs(model: &Model, dataset: &[Sample], pairs: &[PreferencePair], cfg: &TrainConfig) -> Result<TrainOutput> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairSet { total: 0, discarded: 0 });
    }
    let examples = examples_from_pairs(dataset, pairs)?;
    train(model, &examples, cfg)
}

/// Fraction of examples whose chosen answer is the greedy first token.
pub fn chosen_accuracy(model: &Model, examples: &[Example], policy: MaskPolicy) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no examples".into()));
    }
    let hits: Vec<bool> = examples
        .par_iter()
        .map(|ex| {
            let logits = model.next_token_logits(&ex.prompt, &[], policy)?;
            Ok(crate::model::argmax(&logits) as u32 == ex.plus[0])
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
}

/// Compares tape gradients of one example's loss with central differences.
///
/// `coords` limits the number of checked coordinates (sampled with `seed`);
/// `None` checks every parameter.
pub fn grad_check(
    model: &Model,
    ex: &Example,
    reference: (f64, f64),
    cfg: &TrainConfig,
    coords: Option<usize>,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = example_gradient(model, ex, reference, cfg)?;
    let base = model.params.flatten();
    let n = base.len();
    let picked: Vec<usize> = match coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..k).map(|_| rng.gen_range(0..n)).collect();
            idx.sort_unstable();
            idx.dedup();
            idx
        }
        _ => (0..n).collect(),
    };
    let start: Vec<f64> = picked.iter().map(|&i| base[i]).collect();
    let mut probe = model.clone();
    let mut full = base.clone();
    let mut failure = None;
    let numeric = finite_diff(
        |sub| {
            for (&i, &x) in picked.iter().zip(sub) {
                full[i] = x;
            }
            probe.params.assign_flat(&full).expect("same layout");
            match example_loss_value(&probe, ex, reference, cfg) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &start,
        step,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    let names = flat_names(&model.params);
    let mut worst = (0.0, String::new());
    for (k, &i) in picked.iter().enumerate() {
        let r = relative_error(analytic[i], numeric[k]);
        if !(r <= worst.0) {
            worst = (r, names[i].clone());
        }
    }
    Ok(GradCheckReport {
        checked: picked.len(),
        max_relative_error: worst.0,
        worst_parameter: worst.1,
    })
}

/// `name[index]` for every flat coordinate.
fn flat_names(params: &Parameters) -> Vec<String> {
    params
        .named()
        .into_iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| format!("{name}[{i}]")))
        .collect()
}
