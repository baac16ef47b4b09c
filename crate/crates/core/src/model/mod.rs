//! Tiny decoder-only multimodal transformer.
//!
//! Images are square grids of cell codes. The visual encoder turns each patch
//! into one token: a linear map of the patch's one-hot content plus a learned
//! 2-D patch position. Text tokens use an embedding table. The interleaved
//! sequence gets learned absolute positions and runs through pre-norm decoder
//! blocks whose attention regime is chosen per layer by a [`MaskPolicy`].

mod config;
mod params;

use serde::{Deserialize, Serialize};

pub use config::{IntensitySource, ModelConfig};
pub use params::{LayerParams, LayerVars, ParamVars, Parameters};

use crate::attention::{multi_head_attention, HeadMask};
use crate::error::{Error, Result};
use crate::masks::{mask_for_layer, response_intensity, select_key_tokens, MaskKind, MaskPolicy, MaskSet};
use crate::numerics::{Tape, Tensor, Var};
use crate::sequence::TokenSequence;

const LN_EPS: f64 = 1e-5;

/// Square grid of cell codes, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub side: usize,
    pub cells: Vec<u8>,
}

impl Grid {
    pub fn new(side: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != side * side {
            return Err(Error::InvalidArgument(format!(
                "grid of side {side} needs {} cells, got {}",
                side * side,
                cells.len()
            )));
        }
        Ok(Self { side, cells })
    }

    pub fn empty(side: usize) -> Self {
        Self {
            side,
            cells: vec![0; side * side],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.side + c]
    }
}

/// Model input: `N` images, each followed by a (possibly empty) text segment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub images: Vec<Grid>,
    pub texts: Vec<Vec<u32>>,
}

impl Prompt {
    /// Images back to back with `question` as the final text segment.
    pub fn with_question(images: Vec<Grid>, question: Vec<u32>) -> Self {
        let n = images.len();
        let mut texts = vec![Vec::new(); n];
        if let Some(last) = texts.last_mut() {
            *last = question;
        }
        Self { images, texts }
    }
}

/// Factorized patch contents, `tokens_per_image × patch_features`.
fn patch_features(grid: &Grid, cfg: &ModelConfig) -> Result<Tensor> {
    if grid.side != cfg.grid_size {
        return Err(Error::InvalidArgument(format!(
            "grid side {} does not match configured size {}",
            grid.side, cfg.grid_size
        )));
    }
    let (p, per_side, codes) = (cfg.patch_size, cfg.patches_per_side(), cfg.cell_codes());
    let per_cell = cfg.cell_features();
    let width = cfg.patch_features();
    let mut data = vec![0.0; cfg.tokens_per_image() * width];
    for pr in 0..per_side {
        for pc in 0..per_side {
            let row = pr * per_side + pc;
            for dr in 0..p {
                for dc in 0..p {
                    let code = grid.get(pr * p + dr, pc * p + dc) as usize;
                    if code >= codes {
                        return Err(Error::InvalidArgument(format!(
                            "cell code {code} outside [0, {codes})"
                        )));
                    }
                    let base = row * width + (dr * p + dc) * per_cell;
                    if code == 0 {
                        data[base] = 1.0;
                    } else {
                        data[base + 1 + (code - 1) / cfg.shapes] = 1.0;
                        data[base + 1 + cfg.colors + (code - 1) % cfg.shapes] = 1.0;
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.tokens_per_image(), width], data)
}

/// Parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

/// Everything a forward pass produced on a tape.
pub struct Forward {
    pub seq: TokenSequence,
    /// Logits at the requested rows, `rows × vocab`.
    pub logits: Var,
}

impl Model {
    pub fn new(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = Parameters::init(&config)?;
        Ok(Self { config, params })
    }

    /// Positional layout of `prompt` followed by `extra` text tokens.
    pub fn sequence(&self, prompt: &Prompt, extra: &[u32]) -> Result<TokenSequence> {
        let tau = self.config.tokens_per_image();
        let imgs: Vec<Vec<u32>> = prompt.images.iter().map(|_| vec![self.config.image_token; tau]).collect();
        let mut seq = TokenSequence::build_interleaved(&imgs, &prompt.texts)?;
        for &t in extra {
            seq.push_text(t);
        }
        Ok(seq)
    }

    /// Visual token embeddings of one image.
    pub fn encode_image(&self, grid: &Grid) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let vars = self.params.register(&mut tape);
        let e = self.encode_image_on_tape(&mut tape, &vars, grid)?;
        Ok(tape.value(e).clone())
    }

    fn encode_image_on_tape(&self, tape: &mut Tape, vars: &ParamVars, grid: &Grid) -> Result<Var> {
        let onehot = tape.constant(patch_features(grid, &self.config)?);
        let content = tape.matmul(onehot, vars.patch_projection)?;
        tape.add(content, vars.patch_position)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            Some(&t) => Err(Error::InvalidArgument(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab
            ))),
            None => Ok(()),
        }
    }

    /// Runs the decoder on the tape and returns logits at `rows`
    /// (every position when `rows` is `None`).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        prompt: &Prompt,
        extra: &[u32],
        policy: MaskPolicy,
        rows: Option<&[usize]>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let seq = self.sequence(prompt, extra)?;
        let t = seq.len();
        if t > cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {t} tokens exceeds max length {}",
                cfg.max_len
            )));
        }
        if prompt.images.len() > cfg.max_images {
            return Err(Error::InvalidArgument(format!(
                "{} images exceed the configured maximum of {}",
                prompt.images.len(),
                cfg.max_images
            )));
        }
        for text in &prompt.texts {
            self.check_tokens(text)?;
        }
        self.check_tokens(extra)?;

        // interleave encoder outputs and text embeddings in sequence order
        let mut pieces = Vec::with_capacity(2 * prompt.images.len());
        let (_, text_blocks) = seq.blocks();
        let mut image_ids = Vec::with_capacity(t);
        let tau = cfg.tokens_per_image();
        for (k, (grid, text)) in prompt.images.iter().zip(&text_blocks).enumerate() {
            pieces.push(self.encode_image_on_tape(tape, vars, grid)?);
            image_ids.push(Some(k));
            if !text.is_empty() {
                let idx: Vec<usize> = text.iter().map(|&x| x as usize).collect();
                pieces.push(tape.gather_rows(vars.token_embedding, &idx)?);
                image_ids.push(None);
            }
        }
        let content = tape.concat_rows(&pieces)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(vars.position_embedding, &positions)?;
        let mut h = tape.add(content, pos)?;
        // image-index embedding on visual rows only
        let mut segment = Vec::with_capacity(pieces.len());
        for (piece, id) in pieces.iter().zip(&image_ids) {
            segment.push(match id {
                Some(k) => tape.gather_rows(vars.image_embedding, &vec![*k; tau])?,
                None => {
                    let rows = tape.value(*piece).rows();
                    tape.constant(Tensor::zeros(&[rows, cfg.d_model]))
                }
            });
        }
        let segment = tape.concat_rows(&segment)?;
        h = tape.add(h, segment)?;

        let keys = if policy.uses_keys() {
            let source = match cfg.intensity {
                IntensitySource::EncoderOutput => content,
                IntensitySource::InputEmbedding => h,
            };
            let scores = response_intensity(tape.value(source), &seq)?;
            Some(select_key_tokens(&scores, &seq, cfg.rho)?)
        } else {
            None
        };
        let masks = MaskSet::build(&seq, policy, keys.as_ref())?;

        for (l, lv) in vars.layers.iter().enumerate() {
            let kind = mask_for_layer(l + 1, policy)?;
            let head_mask = match kind {
                MaskKind::Causal => HeadMask::Single(&masks.causal),
                MaskKind::CrossSelective => HeadMask::Single(masks.selective.as_ref().expect("built for policy")),
                MaskKind::Truncated => HeadMask::Single(masks.truncated.as_ref().expect("built for policy")),
                MaskKind::FusedCausalSelective => HeadMask::Fused {
                    causal: &masks.causal,
                    selective: masks.selective.as_ref().expect("built for policy"),
                },
            };
            let a_in = tape.layer_norm(h, lv.ln1_scale, lv.ln1_bias, LN_EPS)?;
            let a = multi_head_attention(tape, a_in, &lv.attn, head_mask, cfg.heads)?;
            h = tape.add(h, a)?;
            let f_in = tape.layer_norm(h, lv.ln2_scale, lv.ln2_bias, LN_EPS)?;
            let f = tape.matmul(f_in, lv.ff_in)?;
            let f = tape.add_row(f, lv.ff_in_bias)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, lv.ff_out)?;
            let f = tape.add_row(f, lv.ff_out_bias)?;
            h = tape.add(h, f)?;
        }

        let selected = match rows {
            Some(r) => tape.gather_rows(h, r)?,
            None => h,
        };
        let out = tape.layer_norm(selected, vars.final_scale, vars.final_bias, LN_EPS)?;
        let logits = tape.matmul(out, vars.head)?;
        let logits = tape.add_row(logits, vars.head_bias)?;
        Ok(Forward { seq, logits })
    }

    /// Logits at every position, `T × vocab`.
    pub fn forward(&self, prompt: &Prompt, policy: impl Into<MaskPolicy>) -> Result<Tensor> {
        self.forward_with(prompt, &[], policy.into())
    }

    pub fn forward_with(&self, prompt: &Prompt, extra: &[u32], policy: MaskPolicy) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let vars = self.params.register(&mut tape);
        let f = self.forward_on_tape(&mut tape, &vars, prompt, extra, policy, None)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Logits for the token following `prompt + extra`.
    pub fn next_token_logits(&self, prompt: &Prompt, extra: &[u32], policy: MaskPolicy) -> Result<Vec<f64>> {
        let last = self.sequence(prompt, extra)?.len() - 1;
        let mut tape = Tape::inference();
        let vars = self.params.register(&mut tape);
        let f = self.forward_on_tape(&mut tape, &vars, prompt, extra, policy, Some(&[last]))?;
        Ok(tape.value(f.logits).data().to_vec())
    }

    /// Greedy decoding; stops after `max_new` tokens or at the end token
    /// (which is not included in the output).
    pub fn generate(&self, prompt: &Prompt, policy: impl Into<MaskPolicy>, max_new: usize) -> Result<Vec<u32>> {
        if max_new == 0 {
            return Err(Error::InvalidArgument("max_new must be >= 1".into()));
        }
        let policy = policy.into();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let logits = self.next_token_logits(prompt, &out, policy)?;
            let next = argmax(&logits) as u32;
            if next == self.config.end_token {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Per-token teacher-forced log-probabilities of each answer, as vectors on the tape.
    ///
    /// Answers of length one share a single forward pass.
    pub fn answer_logprobs_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        prompt: &Prompt,
        answers: &[&[u32]],
        policy: MaskPolicy,
    ) -> Result<Vec<Var>> {
        for a in answers {
            if a.is_empty() {
                return Err(Error::InvalidArgument("answer must be nonempty".into()));
            }
            self.check_tokens(a)?;
        }
        let prompt_len = self.sequence(prompt, &[])?.len();
        if answers.iter().all(|a| a.len() == 1) {
            let f = self.forward_on_tape(tape, vars, prompt, &[], policy, Some(&[prompt_len - 1]))?;
            let lp = tape.log_softmax_rows(f.logits);
            return answers
                .iter()
                .map(|a| tape.pick(lp, &[(0, a[0] as usize)]))
                .collect();
        }
        let mut out = Vec::with_capacity(answers.len());
        for a in answers {
            let rows: Vec<usize> = (0..a.len()).map(|i| prompt_len - 1 + i).collect();
            let f = self.forward_on_tape(tape, vars, prompt, &a[..a.len() - 1], policy, Some(&rows))?;
            let lp = tape.log_softmax_rows(f.logits);
            let at: Vec<(usize, usize)> = a.iter().enumerate().map(|(i, &y)| (i, y as usize)).collect();
            out.push(tape.pick(lp, &at)?);
        }
        Ok(out)
    }

    /// `log π(answer | prompt)`, summed over answer tokens.
    pub fn sequence_logprob(&self, prompt: &Prompt, answer: &[u32], policy: impl Into<MaskPolicy>) -> Result<f64> {
        let mut tape = Tape::inference();
        let vars = self.params.register(&mut tape);
        let lp = self.answer_logprobs_on_tape(&mut tape, &vars, prompt, &[answer], policy.into())?;
        Ok(tape.value(lp[0]).sum())
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 8,
            vocab: 12,
            grid_size: 2,
            max_len: 24,
            ..ModelConfig::default()
        }
    }

    fn grid(cells: &[u8]) -> Grid {
        Grid::new(2, cells.to_vec()).unwrap()
    }

    fn prompt() -> Prompt {
        Prompt::with_question(vec![grid(&[1, 2, 3, 4]), grid(&[5, 0, 6, 0])], vec![3, 4])
    }

    #[test]
    fn encode_counts_patches_and_is_deterministic() {
        let m = Model::init(small()).unwrap();
        let e = m.encode_image(&grid(&[1, 2, 3, 4])).unwrap();
        assert_eq!(e.shape(), &[4, 8]);
        assert_eq!(e, m.encode_image(&grid(&[1, 2, 3, 4])).unwrap());
    }

    #[test]
    fn encode_with_zero_projection_is_position_only() {
        let mut m = Model::init(small()).unwrap();
        m.params.patch_projection.data_mut().fill(0.0);
        let e = m.encode_image(&grid(&[1, 2, 3, 4])).unwrap();
        assert_eq!(e, m.params.patch_position);
    }

    #[test]
    fn encode_rejects_wrong_grid() {
        let m = Model::init(small()).unwrap();
        assert!(m.encode_image(&Grid::empty(3)).is_err());
        assert!(m.encode_image(&grid(&[1, 2, 3, 40])).is_err());
    }

    #[test]
    fn larger_patches() {
        let cfg = ModelConfig {
            grid_size: 4,
            patch_size: 2,
            ..small()
        };
        let m = Model::init(cfg).unwrap();
        let e = m.encode_image(&Grid::new(4, vec![1; 16]).unwrap()).unwrap();
        assert_eq!(e.rows(), 4);
    }

    #[test]
    fn forward_shape_and_determinism() {
        let m = Model::init(small()).unwrap();
        let a = m.forward(&prompt(), MaskPolicy::CROSS_ATTENTIVE).unwrap();
        assert_eq!(a.shape(), &[10, 12]);
        let b = m.forward(&prompt(), MaskPolicy::CROSS_ATTENTIVE).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_overlength() {
        let m = Model::init(ModelConfig { max_len: 9, ..small() }).unwrap();
        assert!(m.forward(&prompt(), MaskKind::Causal).is_err());
    }

    #[test]
    fn single_image_modes_coincide_exactly() {
        let m = Model::init(small()).unwrap();
        let p = Prompt::with_question(vec![grid(&[1, 2, 3, 4])], vec![3, 4, 5]);
        let base = m.forward(&p, MaskKind::Causal).unwrap();
        for policy in [
            MaskPolicy::Uniform(MaskKind::CrossSelective),
            MaskPolicy::Uniform(MaskKind::Truncated),
            MaskPolicy::Uniform(MaskKind::FusedCausalSelective),
            MaskPolicy::CROSS_ATTENTIVE,
        ] {
            assert_eq!(m.forward(&p, policy).unwrap(), base, "{policy}");
        }
    }

    #[test]
    fn rigged_head_generates_constant_token() {
        let mut m = Model::init(small()).unwrap();
        m.params.head.data_mut().fill(0.0);
        m.params.head_bias.data_mut()[7] = 5.0;
        let out = m.generate(&prompt(), MaskPolicy::CROSS_ATTENTIVE, 4).unwrap();
        assert_eq!(out, vec![7, 7, 7, 7]);
        assert_eq!(out, m.generate(&prompt(), MaskPolicy::CROSS_ATTENTIVE, 4).unwrap());
    }

    #[test]
    fn generation_stops_at_end_token() {
        let mut m = Model::init(small()).unwrap();
        m.params.head.data_mut().fill(0.0);
        m.params.head_bias.data_mut()[m.config.end_token as usize] = 5.0;
        assert!(m.generate(&prompt(), MaskKind::Causal, 3).unwrap().is_empty());
        assert!(m.generate(&prompt(), MaskKind::Causal, 0).is_err());
    }

    #[test]
    fn uniform_logits_logprob() {
        let cfg = ModelConfig {
            vocab: 2,
            end_token: 1,
            image_token: 0,
            ..small()
        };
        let mut m = Model::init(cfg).unwrap();
        m.params.head.data_mut().fill(0.0);
        let p = Prompt::with_question(vec![grid(&[1, 2, 3, 4])], vec![0]);
        let lp = m.sequence_logprob(&p, &[0, 1, 0], MaskKind::Causal).unwrap();
        assert!((lp - 3.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((lp + 2.0794).abs() < 1e-4);
    }

    #[test]
    fn logprob_rejects_bad_answers() {
        let m = Model::init(small()).unwrap();
        assert!(m.sequence_logprob(&prompt(), &[], MaskKind::Causal).is_err());
        assert!(m.sequence_logprob(&prompt(), &[99], MaskKind::Causal).is_err());
    }

    #[test]
    fn logprob_ignores_tokens_after_answer() {
        let m = Model::init(small()).unwrap();
        let base = m.sequence_logprob(&prompt(), &[5, 6], MaskKind::Causal).unwrap();
        let mut tape = Tape::inference();
        let vars = m.params.register(&mut tape);
        let f = m
            .forward_on_tape(&mut tape, &vars, &prompt(), &[5, 6, 9, 9], MaskKind::Causal.into(), None)
            .unwrap();
        let lp = tape.log_softmax_rows(f.logits);
        let v = tape.value(lp);
        let direct = v.get(9, 5) + v.get(10, 6);
        assert!((base - direct).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
