//! Synthetic multi-image relational tasks.
//!
//! Every sample holds 2 to 4 grids and a question about two of them. The gold
//! answer needs evidence from both referenced images; the label distribution
//! is skewed so that one answer per task kind (the "prior") is right with
//! probability `bias`. A model that ignores the images and always gives the
//! prior scores `bias`; wrong answers that equal the prior are counted as
//! prior-driven hallucinations.
//!
//! Question layout: `[task, IMG_a, IMG_b, QMARK]`, with `a < b`. In the
//! same-color and same-shape tasks both referenced images hold one object.
//! By default the question refers to the two leading images and any later
//! images are distractors; [`PairLayout::Random`] picks the pair at random.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::MaskPolicy;
use crate::model::{Grid, Model, Prompt};

/// Vocabulary layout shared by the benchmark and the model.
pub mod vocab {
    pub const PAD: u32 = 0;
    pub const END: u32 = 1;
    pub const IMAGE: u32 = 2;
    pub const QMARK: u32 = 3;
    pub const TASK_SAME_COLOR: u32 = 4;
    pub const TASK_SAME_SHAPE: u32 = 5;
    pub const TASK_COUNT_COMPARE: u32 = 6;
    pub const TASK_DIFFERENCE_SPOT: u32 = 7;
    /// `IMG_1` .. `IMG_4`.
    pub const IMG_BASE: u32 = 8;
    /// `CELL_0` .. `CELL_8`.
    pub const CELL_BASE: u32 = 12;
    pub const YES: u32 = 21;
    pub const NO: u32 = 22;
    pub const FIRST: u32 = 23;
    pub const SECOND: u32 = 24;
    pub const SIZE: usize = 64;

    pub fn img(k: usize) -> u32 {
        IMG_BASE + k as u32 - 1
    }

    pub fn cell(c: usize) -> u32 {
        CELL_BASE + c as u32
    }
}

pub const GRID_SIDE: usize = 3;
pub const COLORS: u8 = 4;
pub const SHAPES: u8 = 4;
/// Cell codes: 0 is empty, `1 + color * SHAPES + shape` otherwise.
pub const CELL_CODES: usize = 1 + (COLORS * SHAPES) as usize;
/// Cell whose change is the prior answer of the difference-spot task.
pub const PRIOR_DIFF_CELL: usize = 4;

pub fn object(color: u8, shape: u8) -> u8 {
    1 + color * SHAPES + shape
}

pub fn color_of(code: u8) -> Option<u8> {
    (code > 0).then(|| (code - 1) / SHAPES)
}

pub fn shape_of(code: u8) -> Option<u8> {
    (code > 0).then(|| (code - 1) % SHAPES)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SameColor,
    SameShape,
    CountCompare,
    DifferenceSpot,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::SameColor,
        TaskKind::SameShape,
        TaskKind::CountCompare,
        TaskKind::DifferenceSpot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SameColor => "same-color",
            TaskKind::SameShape => "same-shape",
            TaskKind::CountCompare => "count-compare",
            TaskKind::DifferenceSpot => "difference-spot",
        }
    }

    pub fn token(self) -> u32 {
        match self {
            TaskKind::SameColor => vocab::TASK_SAME_COLOR,
            TaskKind::SameShape => vocab::TASK_SAME_SHAPE,
            TaskKind::CountCompare => vocab::TASK_COUNT_COMPARE,
            TaskKind::DifferenceSpot => vocab::TASK_DIFFERENCE_SPOT,
        }
    }

    pub fn from_token(t: u32) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.token() == t)
            .ok_or_else(|| Error::InvalidArgument(format!("token {t} is not a task kind")))
    }

    /// Answer a text-only prior gives for this kind.
    pub fn prior_answer(self) -> u32 {
        match self {
            TaskKind::SameColor | TaskKind::SameShape => vocab::YES,
            TaskKind::CountCompare => vocab::FIRST,
            TaskKind::DifferenceSpot => vocab::cell(PRIOR_DIFF_CELL),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: u64,
    pub kind: TaskKind,
    pub images: Vec<Grid>,
    pub question: Vec<u32>,
    pub gold: u32,
    pub prior: u32,
}

impl Sample {
    pub fn prompt(&self) -> Prompt {
        Prompt::with_question(self.images.clone(), self.question.clone())
    }
}

/// Which two images a question refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairLayout {
    /// Images 1 and 2; any further images are distractors.
    Leading,
    /// A uniformly random pair `a < b`.
    Random,
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub size: usize,
    /// Relative weights of same-color, same-shape, count-compare, difference-spot.
    pub task_mix: [f64; 4],
    /// Probability that the gold answer equals the prior answer.
    pub bias: f64,
    pub min_images: usize,
    pub max_images: usize,
    /// Probability that a background cell holds an object.
    pub density: f64,
    pub pair_layout: PairLayout,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 2000,
            task_mix: [1.0; 4],
            bias: 0.8,
            min_images: 2,
            max_images: 4,
            density: 0.2,
            pair_layout: PairLayout::Leading,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.size == 0 {
            return bad("dataset size must be >= 1".into());
        }
        if !(0.5..=0.95).contains(&self.bias) {
            return bad(format!("bias must lie in [0.5, 0.95], got {}", self.bias));
        }
        if self.min_images < 2 || self.max_images > 4 || self.min_images > self.max_images {
            return bad(format!(
                "image count range [{}, {}] must lie inside [2, 4]",
                self.min_images, self.max_images
            ));
        }
        if self.task_mix.iter().any(|w| !(*w >= 0.0)) || self.task_mix.iter().sum::<f64>() <= 0.0 {
            return bad("task mix weights must be nonnegative with positive sum".into());
        }
        if !(0.0..=1.0).contains(&self.density) {
            return bad(format!("density must lie in [0, 1], got {}", self.density));
        }
        Ok(())
    }
}

/// Independent random stream for sample `index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_object(rng: &mut impl Rng) -> u8 {
    object(rng.gen_range(0..COLORS), rng.gen_range(0..SHAPES))
}

fn random_grid(rng: &mut impl Rng, density: f64) -> Grid {
    let cells = (0..GRID_SIDE * GRID_SIDE)
        .map(|_| if rng.gen_bool(density) { random_object(rng) } else { 0 })
        .collect();
    Grid { side: GRID_SIDE, cells }
}

fn grid_with_count(rng: &mut impl Rng, count: usize) -> Grid {
    let mut order: Vec<usize> = (0..GRID_SIDE * GRID_SIDE).collect();
    order.shuffle(rng);
    let mut cells = vec![0; GRID_SIDE * GRID_SIDE];
    for &c in &order[..count] {
        cells[c] = random_object(rng);
    }
    Grid { side: GRID_SIDE, cells }
}

fn single_object(rng: &mut impl Rng, code: u8) -> Grid {
    let mut cells = vec![0; GRID_SIDE * GRID_SIDE];
    let at = rng.gen_range(0..cells.len());
    cells[at] = code;
    Grid { side: GRID_SIDE, cells }
}

fn pick_kind(rng: &mut impl Rng, mix: &[f64; 4]) -> TaskKind {
    let total: f64 = mix.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (k, w) in TaskKind::ALL.into_iter().zip(mix) {
        if x < *w {
            return k;
        }
        x -= w;
    }
    *TaskKind::ALL.iter().rev().find(|_| true).expect("nonempty")
}

/// One sample from its own random stream.
pub fn generate_sample(ds: &DatasetSpec, index: u64) -> Sample {
    let mut rng = sample_rng(ds.seed, index);
    let kind = pick_kind(&mut rng, &ds.task_mix);
    let n = rng.gen_range(ds.min_images..=ds.max_images);
    let mut images: Vec<Grid> = (0..n).map(|_| random_grid(&mut rng, ds.density)).collect();
    let (a, b) = match ds.pair_layout {
        PairLayout::Leading => (0, 1),
        PairLayout::Random => {
            let a = rng.gen_range(0..n - 1);
            (a, rng.gen_range(a + 1..n))
        }
    };
    let follow_prior = rng.gen_bool(ds.bias);
    let mut question = vec![kind.token(), vocab::img(a + 1), vocab::img(b + 1)];

    let gold = match kind {
        TaskKind::SameColor | TaskKind::SameShape => {
            let (ca, sa) = (rng.gen_range(0..COLORS), rng.gen_range(0..SHAPES));
            let other = |rng: &mut ChaCha8Rng, v: u8, n: u8| (v + rng.gen_range(1..n)) % n;
            let (cb, sb) = if kind == TaskKind::SameColor {
                let cb = if follow_prior { ca } else { other(&mut rng, ca, COLORS) };
                (cb, rng.gen_range(0..SHAPES))
            } else {
                let sb = if follow_prior { sa } else { other(&mut rng, sa, SHAPES) };
                (rng.gen_range(0..COLORS), sb)
            };
            images[a] = single_object(&mut rng, object(ca, sa));
            images[b] = single_object(&mut rng, object(cb, sb));
            if follow_prior { vocab::YES } else { vocab::NO }
        }
        TaskKind::CountCompare => {
            let cells = GRID_SIDE * GRID_SIDE;
            let mut x = rng.gen_range(0..=cells);
            let mut y = rng.gen_range(0..cells);
            if y >= x {
                y += 1;
            }
            // x != y; order them so the prior decides which image has more
            if (x > y) != follow_prior {
                std::mem::swap(&mut x, &mut y);
            }
            images[a] = grid_with_count(&mut rng, x);
            images[b] = grid_with_count(&mut rng, y);
            if follow_prior { vocab::FIRST } else { vocab::SECOND }
        }
        TaskKind::DifferenceSpot => {
            let cells = GRID_SIDE * GRID_SIDE;
            let c = if follow_prior {
                PRIOR_DIFF_CELL
            } else {
                let r = rng.gen_range(0..cells - 1);
                if r >= PRIOR_DIFF_CELL { r + 1 } else { r }
            };
            images[b] = images[a].clone();
            let old = images[a].cells[c];
            let mut new = if rng.gen_bool(0.25) { 0 } else { random_object(&mut rng) };
            while new == old {
                new = random_object(&mut rng);
            }
            images[b].cells[c] = new;
            vocab::cell(c)
        }
    };
    question.push(vocab::QMARK);
    Sample {
        id: index,
        kind,
        images,
        question,
        gold,
        prior: kind.prior_answer(),
    }
}

/// Deterministic dataset; sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(ds: &DatasetSpec) -> Result<Vec<Sample>> {
    ds.validate()?;
    Ok((0..ds.size as u64)
        .into_par_iter()
        .map(|i| generate_sample(ds, i))
        .collect())
}

fn parse_question(sample: &Sample) -> Result<(TaskKind, usize, usize)> {
    let q = &sample.question;
    let bad = |d: &str| Error::InvalidArgument(format!("sample {}: {d}", sample.id));
    let kind = TaskKind::from_token(*q.first().ok_or_else(|| bad("empty question"))?)?;
    let img = |t: Option<&u32>| -> Result<usize> {
        let t = *t.ok_or_else(|| bad("truncated question"))?;
        let k = t.checked_sub(vocab::IMG_BASE).map(|k| k as usize + 1);
        match k {
            Some(k) if k <= sample.images.len() && k <= 4 => Ok(k - 1),
            _ => Err(bad("image reference out of range")),
        }
    };
    let a = img(q.get(1))?;
    let b = img(q.get(2))?;
    if q.len() != 4 || q[3] != vocab::QMARK {
        return Err(bad("question must end with QMARK after two image references"));
    }
    Ok((kind, a, b))
}

/// Gold answer recomputed from the grids.
///
/// Same-color/same-shape: yes iff some object of `a` shares its color
/// (shape) with some object of `b`. Count-compare: first iff image `a` holds strictly more objects.
/// Difference-spot: the lowest-index cell where the two images differ.
pub fn oracle_answer(sample: &Sample) -> Result<u32> {
    let (kind, a, b) = parse_question(sample)?;
    if kind != sample.kind {
        return Err(Error::InvalidArgument(format!(
            "sample {}: question asks {} but sample is tagged {}",
            sample.id,
            TaskKind::from_token(sample.question[0])?,
            sample.kind
        )));
    }
    let (ga, gb) = (&sample.images[a], &sample.images[b]);
    Ok(match kind {
        TaskKind::SameColor | TaskKind::SameShape => {
            let attr = if kind == TaskKind::SameColor { color_of } else { shape_of };
            let values = |g: &Grid| g.cells.iter().filter_map(|&v| attr(v)).collect::<Vec<u8>>();
            let vb = values(gb);
            if values(ga).iter().any(|x| vb.contains(x)) { vocab::YES } else { vocab::NO }
        }
        TaskKind::CountCompare => {
            let count = |g: &Grid| g.cells.iter().filter(|&&v| v != 0).count();
            if count(ga) > count(gb) { vocab::FIRST } else { vocab::SECOND }
        }
        TaskKind::DifferenceSpot => {
            let c = ga
                .cells
                .iter()
                .zip(&gb.cells)
                .position(|(x, y)| x != y)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {}: images do not differ", sample.id)))?;
            vocab::cell(c)
        }
    })
}

/// Anything that answers benchmark samples under a mask policy.
pub trait Responder: Sync {
    fn respond(&self, sample: &Sample, policy: MaskPolicy) -> Result<u32>;
}

impl Responder for Model {
    /// First greedily decoded token; the end token if decoding stops at once.
    fn respond(&self, sample: &Sample, policy: MaskPolicy) -> Result<u32> {
        let out = self.generate(&sample.prompt(), policy, 1)?;
        Ok(out.first().copied().unwrap_or(self.config.end_token))
    }
}

impl<F> Responder for F
where
    F: Fn(&Sample, MaskPolicy) -> u32 + Sync,
{
    fn respond(&self, sample: &Sample, policy: MaskPolicy) -> Result<u32> {
        Ok(self(sample, policy))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub samples: usize,
    pub correct: usize,
    /// Wrong answers equal to the prior answer.
    pub prior_errors: usize,
}

impl KindStats {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.samples)
    }

    pub fn prior_agreement(&self) -> f64 {
        ratio(self.prior_errors, self.samples - self.correct)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 { 0.0 } else { a as f64 / b as f64 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Fraction of wrong answers that equal the prior answer; 0 with no errors.
    pub prior_agreement: f64,
    pub per_kind: BTreeMap<TaskKind, KindStats>,
}

/// Per-sample answers under one policy, in dataset order.
pub fn answers(responder: &dyn Responder, dataset: &[Sample], policy: MaskPolicy) -> Result<Vec<u32>> {
    dataset.par_iter().map(|s| responder.respond(s, policy)).collect()
}

/// Scores `answers` (one per sample) against gold.
pub fn score(dataset: &[Sample], answers: &[u32], policy: MaskPolicy) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let mut per_kind: BTreeMap<TaskKind, KindStats> = BTreeMap::new();
    for (s, &ans) in dataset.iter().zip(answers) {
        let st = per_kind.entry(s.kind).or_default();
        st.samples += 1;
        if ans == s.gold {
            st.correct += 1;
        } else if ans == s.prior {
            st.prior_errors += 1;
        }
    }
    let samples = dataset.len();
    let correct: usize = per_kind.values().map(|k| k.correct).sum();
    let prior_errors: usize = per_kind.values().map(|k| k.prior_errors).sum();
    Ok(EvalReport {
        policy: policy.name(),
        samples,
        correct,
        accuracy: ratio(correct, samples),
        prior_agreement: ratio(prior_errors, samples - correct),
        per_kind,
    })
}

/// Greedy-decodes every sample and scores the answers.
pub fn evaluate(responder: &dyn Responder, dataset: &[Sample], policy: MaskPolicy) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let ans = answers(responder, dataset, policy)?;
    score(dataset, &ans, policy)
}

/// One line of the dataset file. Field order is the documented record order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: u64,
    kind: TaskKind,
    grids: Vec<Vec<u8>>,
    question: Vec<u32>,
    gold: u32,
    prior: u32,
}

/// Writes one JSON record per line:
/// `{"id", "kind", "grids", "question", "gold", "prior"}`.
pub fn write_dataset(mut w: impl Write, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let rec = SampleRecord {
            id: s.id,
            kind: s.kind,
            grids: s.images.iter().map(|g| g.cells.clone()).collect(),
            question: s.question.clone(),
            gold: s.gold,
            prior: s.prior,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(r: impl BufRead) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "dataset",
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        let images = rec
            .grids
            .into_iter()
            .map(|cells| {
                let side = (cells.len() as f64).sqrt().round() as usize;
                Grid::new(side, cells)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample {
            id: rec.id,
            kind: rec.kind,
            images,
            question: rec.question,
            gold: rec.gold,
            prior: rec.prior,
        });
    }
    Ok(out)
}
