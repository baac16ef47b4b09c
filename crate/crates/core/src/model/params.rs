use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::attention::{AttentionParams, AttentionVars};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_scale: Tensor,
    pub ln1_bias: Tensor,
    pub attn: AttentionParams,
    pub ln2_scale: Tensor,
    pub ln2_bias: Tensor,
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
}

/// All trainable weights of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub patch_projection: Tensor,
    pub patch_position: Tensor,
    /// Added to every visual token of image `k` (row `k - 1`).
    pub image_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_scale: Tensor,
    pub final_bias: Tensor,
    pub head: Tensor,
    pub head_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub ln1_scale: Var,
    pub ln1_bias: Var,
    pub attn: AttentionVars,
    pub ln2_scale: Var,
    pub ln2_bias: Var,
    pub ff_in: Var,
    pub ff_in_bias: Var,
    pub ff_out: Var,
    pub ff_out_bias: Var,
}

/// [`Parameters`] registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub patch_projection: Var,
    pub patch_position: Var,
    pub image_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_scale: Var,
    pub final_bias: Var,
    pub head: Var,
    pub head_bias: Var,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

impl Parameters {
    /// Seeded random initialization.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut g = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let d = cfg.d_model;
        let emb_std = 0.3;
        let proj_std = (1.0 / d as f64).sqrt();
        let out_std = proj_std / (2.0 * cfg.layers as f64).sqrt();
        let token_embedding = g.normal(&[cfg.vocab, d], emb_std);
        let position_embedding = g.normal(&[cfg.max_len, d], 0.02);
        let patch_projection = g.normal(&[cfg.patch_features(), d], emb_std);
        let patch_position = g.normal(&[cfg.tokens_per_image(), d], emb_std);
        let image_embedding = g.normal(&[cfg.max_images, d], emb_std);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_scale: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                attn: AttentionParams {
                    wq: g.normal(&[d, d], proj_std),
                    bq: Tensor::zeros(&[d]),
                    wk: g.normal(&[d, d], proj_std),
                    bk: Tensor::zeros(&[d]),
                    wv: g.normal(&[d, d], proj_std),
                    bv: Tensor::zeros(&[d]),
                    wo: g.normal(&[d, d], out_std),
                    bo: Tensor::zeros(&[d]),
                },
                ln2_scale: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                ff_in: g.normal(&[d, cfg.d_ff], proj_std),
                ff_in_bias: Tensor::zeros(&[cfg.d_ff]),
                ff_out: g.normal(&[cfg.d_ff, d], (1.0 / cfg.d_ff as f64).sqrt() / (2.0 * cfg.layers as f64).sqrt()),
                ff_out_bias: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            token_embedding,
            position_embedding,
            patch_projection,
            patch_position,
            image_embedding,
            layers,
            final_scale: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            head: g.normal(&[d, cfg.vocab], proj_std),
            head_bias: Tensor::zeros(&[cfg.vocab]),
        })
    }

    /// Stable `(name, tensor)` listing; the order defines every flat layout.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
            ("patch_projection".into(), &self.patch_projection),
            ("patch_position".into(), &self.patch_position),
            ("image_embedding".into(), &self.image_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("ln1_scale"), &l.ln1_scale),
                (p("ln1_bias"), &l.ln1_bias),
                (p("attn.wq"), &l.attn.wq),
                (p("attn.bq"), &l.attn.bq),
                (p("attn.wk"), &l.attn.wk),
                (p("attn.bk"), &l.attn.bk),
                (p("attn.wv"), &l.attn.wv),
                (p("attn.bv"), &l.attn.bv),
                (p("attn.wo"), &l.attn.wo),
                (p("attn.bo"), &l.attn.bo),
                (p("ln2_scale"), &l.ln2_scale),
                (p("ln2_bias"), &l.ln2_bias),
                (p("ff_in"), &l.ff_in),
                (p("ff_in_bias"), &l.ff_in_bias),
                (p("ff_out"), &l.ff_out),
                (p("ff_out_bias"), &l.ff_out_bias),
            ]);
        }
        out.extend([
            ("final_scale".into(), &self.final_scale),
            ("final_bias".into(), &self.final_bias),
            ("head".into(), &self.head),
            ("head_bias".into(), &self.head_bias),
        ]);
        out
    }

    /// Mutable tensors in [`Parameters::named`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.patch_projection,
            &mut self.patch_position,
            &mut self.image_embedding,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_scale,
                &mut l.ln1_bias,
                &mut l.attn.wq,
                &mut l.attn.bq,
                &mut l.attn.wk,
                &mut l.attn.bk,
                &mut l.attn.wv,
                &mut l.attn.bv,
                &mut l.attn.wo,
                &mut l.attn.bo,
                &mut l.ln2_scale,
                &mut l.ln2_bias,
                &mut l.ff_in,
                &mut l.ff_in_bias,
                &mut l.ff_out,
                &mut l.ff_out_bias,
            ]);
        }
        out.extend([
            &mut self.final_scale,
            &mut self.final_bias,
            &mut self.head,
            &mut self.head_bias,
        ]);
        out
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_values());
        for (_, t) in self.named() {
            v.extend_from_slice(t.data());
        }
        v
    }

    /// Overwrites all values from a flat vector in [`Parameters::named`] order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter values, got {}",
                self.num_values(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Parameters::zeros(cfg);
        let mine = self.named();
        let theirs = expected.named();
        if mine.len() != theirs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter tensors, config implies {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((name, a), (_, b)) in mine.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op: "parameters",
                    detail: format!("{name}: {:?}, config implies {:?}", a.shape(), b.shape()),
                });
            }
        }
        Ok(())
    }

    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut p = Parameters::init(&ModelConfig {
            layers: cfg.layers.max(2),
            ..cfg.clone()
        })
        .unwrap_or_else(|_| panic!("zeros() needs a valid config"));
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            token_embedding: tape.param(self.token_embedding.clone()),
            position_embedding: tape.param(self.position_embedding.clone()),
            patch_projection: tape.param(self.patch_projection.clone()),
            patch_position: tape.param(self.patch_position.clone()),
            image_embedding: tape.param(self.image_embedding.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    ln1_scale: tape.param(l.ln1_scale.clone()),
                    ln1_bias: tape.param(l.ln1_bias.clone()),
                    attn: l.attn.register(tape),
                    ln2_scale: tape.param(l.ln2_scale.clone()),
                    ln2_bias: tape.param(l.ln2_bias.clone()),
                    ff_in: tape.param(l.ff_in.clone()),
                    ff_in_bias: tape.param(l.ff_in_bias.clone()),
                    ff_out: tape.param(l.ff_out.clone()),
                    ff_out_bias: tape.param(l.ff_out_bias.clone()),
                })
                .collect(),
            final_scale: tape.param(self.final_scale.clone()),
            final_bias: tape.param(self.final_bias.clone()),
            head: tape.param(self.head.clone()),
            head_bias: tape.param(self.head_bias.clone()),
        }
    }
}

impl ParamVars {
    /// Vars in [`Parameters::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![
            self.token_embedding,
            self.position_embedding,
            self.patch_projection,
            self.patch_position,
            self.image_embedding,
        ];
        for l in &self.layers {
            let a = &l.attn;
            out.extend([
                l.ln1_scale, l.ln1_bias, a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo,
                l.ln2_scale, l.ln2_bias, l.ff_in, l.ff_in_bias, l.ff_out, l.ff_out_bias,
            ]);
        }
        out.extend([self.final_scale, self.final_bias, self.head, self.head_bias]);
        out
    }
}
