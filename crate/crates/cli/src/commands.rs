//! One function per verb. Every verb validates its config, then writes its
//! artifacts plus a `<verb>.json` manifest carrying the effective config.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crossview_core::checkpoint;
use crossview_core::masks::{
    causal_mask, cross_image_mask, select_key_tokens, selective_cross_mask, truncated_mask, AttentionMask, MaskKind,
    MaskPolicy,
};
use crossview_core::model::{Grid, Model, ModelConfig, Prompt};
use crossview_core::pipeline::{build_pairs, warm_up};
use crossview_core::prefgen::{read_pairs, write_pairs, PairSet};
use crossview_core::sequence::TokenSequence;
use crossview_core::synthbench::{evaluate, read_dataset, write_dataset, EvalReport, Sample, TaskKind};
use crossview_core::training::{
    examples_from_pairs, grad_check, train, Example, Objective, TrainConfig,
};
use crossview_core::Error;

use crate::config::{check_dump_kind, RunConfig};
use crate::Failure;

/// Largest relative error `grad-check` accepts.
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

fn prepare_out(cfg: &RunConfig) -> Result<(), Failure> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", cfg.out.display())))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), Error>) -> Result<(), Failure> {
    let ctx = |e: &dyn std::fmt::Display| Failure::runtime(format!("writing {}: {e}", path.display()));
    let file = File::create(path).map_err(|e| ctx(&e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|e| ctx(&e))?;
    w.flush().map_err(|e| ctx(&e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::runtime(format!("writing {}: {e}", path.display())))
}

fn write_manifest(cfg: &RunConfig, verb: &str, summary: Value) -> Result<(), Failure> {
    let doc = json!({ "verb": verb, "config": cfg.echo(), "summary": summary });
    let mut text = serde_json::to_string_pretty(&doc).map_err(Failure::runtime)?;
    text.push('\n');
    write_bytes(&out_path(cfg, &format!("{verb}.json")), text.as_bytes())
}

fn read_samples(path: &Path) -> Result<Vec<Sample>, Failure> {
    let f = File::open(path).map_err(|e| Failure::runtime(format!("reading {}: {e}", path.display())))?;
    read_dataset(BufReader::new(f)).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn train_set(cfg: &RunConfig) -> Result<Vec<Sample>, Failure> {
    match &cfg.paths.train_data {
        Some(p) => read_samples(p),
        None => Ok(cfg.pipeline().train_set()?),
    }
}

fn eval_set(cfg: &RunConfig) -> Result<Vec<Sample>, Failure> {
    match &cfg.paths.eval_data {
        Some(p) => read_samples(p),
        None => Ok(cfg.pipeline().eval_set()?),
    }
}

/// Mask and selection settings from the run config; architecture kept.
fn with_run_masks(mut model: Model, cfg: &RunConfig) -> Model {
    model.config.policy = cfg.model.policy;
    model.config.rho = cfg.model.rho;
    model.config.intensity = cfg.model.intensity;
    model
}

fn load_checkpoint(path: &Path) -> Result<Model, Failure> {
    checkpoint::load(path).map_err(|e| Failure::runtime(format!("checkpoint {}: {e}", path.display())))
}

/// The backbone: `paths.base` when set, otherwise a fresh warm-up, which is
/// also saved as `base.ckpt`.
fn backbone(cfg: &RunConfig) -> Result<Model, Failure> {
    let model = match &cfg.paths.base {
        Some(p) => {
            let m = load_checkpoint(p)?;
            let mut want = cfg.pipeline().model;
            want.policy = m.config.policy;
            want.rho = m.config.rho;
            want.intensity = m.config.intensity;
            want.seed = m.config.seed;
            if m.config != want {
                return Err(Failure::runtime(format!(
                    "base checkpoint {} does not match the [model] settings",
                    p.display()
                )));
            }
            m
        }
        None => {
            let m = warm_up(&cfg.pipeline())?;
            checkpoint::save(&m, &out_path(cfg, "base.ckpt"))?;
            m
        }
    };
    Ok(with_run_masks(model, cfg))
}

fn pairs_for(cfg: &RunConfig, base: &Model, data: &[Sample]) -> Result<PairSet, Failure> {
    match &cfg.paths.pairs {
        Some(p) => {
            let f = File::open(p).map_err(|e| Failure::runtime(format!("reading {}: {e}", p.display())))?;
            let pairs = read_pairs(BufReader::new(f)).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
            if pairs.is_empty() {
                return Err(Failure::runtime(format!("{}: pair file is empty", p.display())));
            }
            Ok(PairSet { total: pairs.len(), discarded: 0, pairs })
        }
        None => build_pairs(base, data).map_err(|e| match e {
            Error::EmptyPairSet { .. } => Failure::runtime(format!("prefgen filter: {e}")),
            other => other.into(),
        }),
    }
}

fn hash_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::runtime(format!("reading {}: {e}", path.display())))?;
    Ok(checkpoint::trailer_hash(&bytes)?)
}

#[derive(Serialize)]
struct SplitSummary {
    samples: usize,
    gold_is_prior: f64,
    per_kind: Vec<(TaskKind, usize)>,
}

fn split_summary(data: &[Sample]) -> SplitSummary {
    let follow = data.iter().filter(|s| s.gold == s.prior).count();
    SplitSummary {
        samples: data.len(),
        gold_is_prior: if data.is_empty() { 0.0 } else { follow as f64 / data.len() as f64 },
        per_kind: TaskKind::ALL
            .iter()
            .map(|&k| (k, data.iter().filter(|s| s.kind == k).count()))
            .collect(),
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), Failure> {
    let p = cfg.pipeline();
    let train = p.train_set()?;
    let eval = p.eval_set()?;
    prepare_out(cfg)?;
    write_with(&out_path(cfg, "train.jsonl"), |w| write_dataset(w, &train))?;
    write_with(&out_path(cfg, "eval.jsonl"), |w| write_dataset(w, &eval))?;
    let (t, e) = (split_summary(&train), split_summary(&eval));
    println!("train: {} samples, gold follows prior in {:.3}", t.samples, t.gold_is_prior);
    println!("eval:  {} samples, gold follows prior in {:.3}", e.samples, e.gold_is_prior);
    write_manifest(cfg, "gen-data", json!({ "train": t, "eval": e }))
}

fn pair_summary(set: &PairSet) -> Value {
    json!({
        "total": set.total,
        "kept": set.pairs.len(),
        "discarded": set.discarded,
        "discard_rate": set.discard_rate(),
        "oracle_corrected": set.oracle_corrected(),
    })
}

pub fn gen_pairs(cfg: &RunConfig) -> Result<(), Failure> {
    let data = train_set(cfg)?;
    prepare_out(cfg)?;
    let base = backbone(cfg)?;
    let set = pairs_for(cfg, &base, &data)?;
    write_with(&out_path(cfg, "pairs.jsonl"), |w| write_pairs(w, &set.pairs))?;
    println!(
        "pairs: {} kept of {} ({:.1}% discarded, {} oracle-corrected)",
        set.pairs.len(),
        set.total,
        100.0 * set.discard_rate(),
        set.oracle_corrected()
    );
    write_manifest(cfg, "gen-pairs", pair_summary(&set))
}

pub fn train_cmd(cfg: &RunConfig) -> Result<(), Failure> {
    let data = train_set(cfg)?;
    prepare_out(cfg)?;
    let base = backbone(cfg)?;
    let set = pairs_for(cfg, &base, &data)?;
    write_with(&out_path(cfg, "pairs.jsonl"), |w| write_pairs(w, &set.pairs))?;
    let examples = examples_from_pairs(&data, &set.pairs)?;
    let tc = cfg.pipeline().train;
    let out = train(&base, &examples, &tc)?;
    write_with(&out_path(cfg, "metrics.jsonl"), |w| {
        for m in &out.metrics {
            serde_json::to_writer(&mut *w, m)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    let ckpt = out_path(cfg, "model.ckpt");
    checkpoint::save(&out.model, &ckpt)?;
    for m in &out.metrics {
        println!(
            "epoch {:>3}  loss {:.5}  dpo {:.5}  nll {:.5}  margin {:+.4}  reward-acc {:.3}",
            m.epoch, m.total_loss, m.dpo_loss, m.nll_loss, m.margin, m.reward_accuracy
        );
    }
    let summary = json!({
        "pairs": pair_summary(&set),
        "examples": examples.len(),
        "final": out.metrics.last(),
        "diverged_at": out.diverged,
        "checkpoint_hash": hash_file(&ckpt)?,
        "params_hash": checkpoint::params_hash(&out.model.params),
        "reference_hash": out.reference.hash(),
        "reference_unchanged": out.reference.hash() == out.reference.current_hash(),
    });
    write_manifest(cfg, "train", summary)?;
    println!("checkpoint {}", ckpt.display());
    match out.diverged {
        Some(epoch) => Err(Error::Diverged { epoch }.into()),
        None => Ok(()),
    }
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> Result<(), Failure> {
    let path = checkpoint_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.checkpoint.clone())
        .unwrap_or_else(|| out_path(cfg, "model.ckpt"));
    let model = with_run_masks(load_checkpoint(&path)?, cfg);
    let data = eval_set(cfg)?;
    let policy = cfg.eval.mask_mode;
    let report = evaluate(&model, &data, policy)?;
    prepare_out(cfg)?;
    let body = json!({ "checkpoint_hash": hash_file(&path)?, "report": report });
    println!("{}", serde_json::to_string_pretty(&report).map_err(Failure::runtime)?);
    write_manifest(cfg, &format!("eval-{policy}"), body)
}

/// Builds the dump mask for a layout: tied selection scores, so key tokens
/// are the leading positions of each image.
pub fn layout_mask(images: &[usize], texts: &[usize], kind: &str, rho: f64) -> Result<AttentionMask, Failure> {
    check_dump_kind(kind)?;
    let seq = TokenSequence::from_lengths(images, texts, 0).map_err(Failure::config)?;
    let mask = match kind {
        "causal" => causal_mask(seq.len()),
        "cross" => cross_image_mask(&seq),
        "truncated" => truncated_mask(&seq),
        _ => {
            let scores: Vec<Option<f64>> = (0..seq.len()).map(|i| seq.image_of(i).map(|_| 0.0)).collect();
            let keys = select_key_tokens(&scores, &seq, rho).map_err(Failure::config)?;
            selective_cross_mask(&seq, &keys)
        }
    };
    Ok(mask?)
}

pub fn dump_mask(cfg: &RunConfig) -> Result<(), Failure> {
    let d = &cfg.dump;
    let mask = layout_mask(&d.images, &d.texts, &d.kind, cfg.model.rho)?;
    prepare_out(cfg)?;
    let text = mask.dump(&d.kind);
    let file = out_path(cfg, &format!("mask-{}.txt", d.kind));
    write_bytes(&file, text.as_bytes())?;
    print!("{text}");
    write_manifest(cfg, "dump-mask", json!({ "file": format!("mask-{}.txt", d.kind), "size": mask.size() }))
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub sweep: &'static str,
    pub rho: f64,
    pub lambda: f64,
    pub pairs: usize,
    pub discard_rate: f64,
    pub reward_accuracy: f64,
    pub margin: f64,
    pub causal_accuracy: f64,
    pub policy_accuracy: f64,
    pub prior_agreement: f64,
}

pub const ABLATION_HEADER: &str =
    "sweep\trho\tlambda\tpairs\tdiscard_rate\treward_accuracy\tmargin\tcausal_accuracy\tpolicy_accuracy\tprior_agreement";

impl AblationRow {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.6}\t{:.4}\t{:.4}\t{:.4}",
            self.sweep,
            self.rho,
            self.lambda,
            self.pairs,
            self.discard_rate,
            self.reward_accuracy,
            self.margin,
            self.causal_accuracy,
            self.policy_accuracy,
            self.prior_agreement
        )
    }
}

fn ablation_point(
    sweep: &'static str,
    base: &Model,
    rho: f64,
    tc: &TrainConfig,
    train_data: &[Sample],
    eval_data: &[Sample],
    policy: MaskPolicy,
) -> Result<(AblationRow, EvalReport), Failure> {
    let mut base = base.clone();
    base.config.rho = rho;
    let set = build_pairs(&base, train_data).map_err(|e| match e {
        Error::EmptyPairSet { .. } => Failure::runtime(format!("prefgen filter at rho={rho}: {e}")),
        other => other.into(),
    })?;
    let out = train(&base, &examples_from_pairs(train_data, &set.pairs)?, tc)?;
    if let Some(epoch) = out.diverged {
        return Err(Error::Diverged { epoch }.into());
    }
    let causal = evaluate(&out.model, eval_data, MaskKind::Causal.into())?;
    let report = evaluate(&out.model, eval_data, policy)?;
    let row = AblationRow {
        sweep,
        rho,
        lambda: tc.lambda,
        pairs: set.pairs.len(),
        discard_rate: set.discard_rate(),
        reward_accuracy: out.metrics.last().map_or(0.0, |m| m.reward_accuracy),
        margin: out.metrics.last().map_or(0.0, |m| m.margin),
        causal_accuracy: causal.accuracy,
        policy_accuracy: report.accuracy,
        prior_agreement: report.prior_agreement,
    };
    Ok((row, report))
}

/// Runs the ρ sweep (λ from the config) and then the λ sweep (ρ from the
/// config) from one shared backbone.
pub fn ablation_rows(cfg: &RunConfig) -> Result<Vec<AblationRow>, Failure> {
    let train_data = train_set(cfg)?;
    let eval_data = eval_set(cfg)?;
    let base = backbone(cfg)?;
    let tc = cfg.pipeline().train;
    let policy = cfg.eval.mask_mode;
    let mut rows = Vec::new();
    for &rho in &cfg.ablate.rho {
        rows.push(ablation_point("rho", &base, rho, &tc, &train_data, &eval_data, policy)?.0);
    }
    for &lambda in &cfg.ablate.lambda {
        let tc = TrainConfig { lambda, ..tc.clone() };
        rows.push(ablation_point("lambda", &base, cfg.model.rho, &tc, &train_data, &eval_data, policy)?.0);
    }
    Ok(rows)
}

pub fn ablate(cfg: &RunConfig) -> Result<(), Failure> {
    prepare_out(cfg)?;
    let rows = ablation_rows(cfg)?;
    let mut table = String::from(ABLATION_HEADER);
    table.push('\n');
    for r in &rows {
        table.push_str(&r.tsv());
        table.push('\n');
    }
    write_bytes(&out_path(cfg, "ablation.tsv"), table.as_bytes())?;
    print!("{table}");
    write_manifest(cfg, "ablate", json!({ "rows": rows }))
}

/// Reduced model used by `grad-check`: 2 layers, width 8, 11-token sequences.
pub fn grad_check_model(seed: u64) -> Result<Model, Failure> {
    Ok(Model::init(ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 8,
        vocab: 16,
        grid_size: 2,
        colors: 1,
        shapes: 2,
        max_len: 16,
        seed,
        ..ModelConfig::default()
    })?)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckLine {
    pub policy: String,
    pub objective: Objective,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
}

/// Finite-difference check of the total loss under each mask policy and
/// objective; every parameter coordinate is compared.
pub fn grad_check_suite(cfg: &RunConfig) -> Result<Vec<GradCheckLine>, Failure> {
    let model = grad_check_model(cfg.seed)?;
    let other = grad_check_model(cfg.seed.wrapping_add(1))?;
    let g1 = Grid::new(2, vec![0, 1, 2, 0])?;
    let g2 = Grid::new(2, vec![2, 2, 0, 1])?;
    let ex = Example {
        prompt: Prompt::with_question(vec![g1, g2], vec![5, 6]),
        plus: vec![9],
        minus: vec![4],
    };
    let policies = [
        MaskPolicy::Uniform(MaskKind::Causal),
        MaskPolicy::CROSS_ATTENTIVE,
        MaskPolicy::Alternating { odd: MaskKind::CrossSelective },
        MaskPolicy::Uniform(MaskKind::Truncated),
    ];
    let mut lines = Vec::new();
    for policy in policies {
        for objective in [Objective::Preference, Objective::NllOnly] {
            let tc = TrainConfig {
                policy,
                objective,
                ..cfg.pipeline().train
            };
            let reference = (
                other.sequence_logprob(&ex.prompt, &ex.plus, policy)?,
                other.sequence_logprob(&ex.prompt, &ex.minus, policy)?,
            );
            let r = grad_check(&model, &ex, reference, &tc, None, cfg.seed, 1e-5)?;
            lines.push(GradCheckLine {
                policy: policy.name(),
                objective,
                checked: r.checked,
                max_relative_error: r.max_relative_error,
                worst_parameter: r.worst_parameter,
            });
        }
    }
    Ok(lines)
}

pub fn grad_check_cmd(cfg: &RunConfig) -> Result<(), Failure> {
    let lines = grad_check_suite(cfg)?;
    prepare_out(cfg)?;
    let mut worst = 0.0f64;
    for l in &lines {
        println!(
            "{:<18} {:<11} {:>5} coords  max rel err {:.3e} ({})",
            l.policy,
            serde_json::to_value(l.objective).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            l.checked,
            l.max_relative_error,
            l.worst_parameter
        );
        worst = worst.max(l.max_relative_error);
    }
    write_manifest(cfg, "grad-check", json!({ "tolerance": GRAD_TOLERANCE, "checks": lines }))?;
    if worst > GRAD_TOLERANCE {
        return Err(Failure::runtime(format!(
            "gradient check failed: max relative error {worst:.3e} above {GRAD_TOLERANCE:e}"
        )));
    }
    println!("ok: max relative error {worst:.3e}");
    Ok(())
}
