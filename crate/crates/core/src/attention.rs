//! Masked scaled dot-product attention and its fused two-mask variant.

use crate::error::{shape_err, Result};
use crate::masks::AttentionMask;
use crate::numerics::{Tape, Tensor, Var};

/// Values plus the row-stochastic weights that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub values: Tensor,
    pub weights: Tensor,
}

/// Mask argument for one attention call.
#[derive(Clone, Copy, Debug)]
pub enum HeadMask<'a> {
    Single(&'a AttentionMask),
    /// `½(softmax under causal + softmax under selective)`.
    Fused {
        causal: &'a AttentionMask,
        selective: &'a AttentionMask,
    },
}

impl HeadMask<'_> {
    fn size(&self) -> usize {
        match self {
            HeadMask::Single(m) => m.size(),
            HeadMask::Fused { causal, selective } => causal.size().max(selective.size()),
        }
    }

    fn check(&self, t: usize) -> Result<()> {
        let ok = match self {
            HeadMask::Single(m) => m.size() == t,
            HeadMask::Fused { causal, selective } => causal.size() == t && selective.size() == t,
        };
        if ok {
            Ok(())
        } else {
            Err(shape_err("attention", format!("mask of size {} for {t} positions", self.size())))
        }
    }
}

/// Attention on the tape. Returns `(values, weights)`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, mask: HeadMask<'_>) -> Result<(Var, Var)> {
    let (t, d) = tape.value(q).dims2();
    let (tk, dk) = tape.value(k).dims2();
    let tv = tape.value(v).rows();
    if tk != t || tv != t || dk != d {
        return Err(shape_err(
            "attention",
            format!("Q [{t}x{d}], K [{tk}x{dk}], V with {tv} rows"),
        ));
    }
    mask.check(t)?;
    let raw = tape.matmul_t(q, k)?;
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let weights = match mask {
        HeadMask::Single(m) => tape.masked_softmax(scores, m.visibility())?,
        HeadMask::Fused { causal, selective } => {
            let a = tape.masked_softmax(scores, causal.visibility())?;
            let b = tape.masked_softmax(scores, selective.visibility())?;
            let sum = tape.add(a, b)?;
            tape.scale(sum, 0.5)
        }
    };
    let values = tape.matmul(weights, v)?;
    Ok((values, weights))
}

fn run(q: &Tensor, k: &Tensor, v: &Tensor, mask: HeadMask<'_>) -> Result<AttentionOutput> {
    let mut tape = Tape::inference();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let (values, weights) = attend(&mut tape, q, k, v, mask)?;
    Ok(AttentionOutput {
        values: tape.value(values).clone(),
        weights: tape.value(weights).clone(),
    })
}

/// `softmax(QKᵀ/√d + M) · V`.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask) -> Result<AttentionOutput> {
    run(q, k, v, HeadMask::Single(mask))
}

/// Equal-weight combination of the causal and selective attention weights.
pub fn fused_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    causal: &AttentionMask,
    selective: &AttentionMask,
) -> Result<AttentionOutput> {
    run(q, k, v, HeadMask::Fused { causal, selective })
}

/// Projection weights of one attention block. Matrices are `d_model × d_model`
/// and multiply from the right (`X · W`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// [`AttentionParams`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionParams {
    pub fn zeros(d_model: usize) -> Self {
        let m = || Tensor::zeros(&[d_model, d_model]);
        let b = || Tensor::zeros(&[d_model]);
        Self {
            wq: m(),
            bq: b(),
            wk: m(),
            bk: b(),
            wv: m(),
            bv: b(),
            wo: m(),
            bo: b(),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            wq: tape.param(self.wq.clone()),
            bq: tape.param(self.bq.clone()),
            wk: tape.param(self.wk.clone()),
            bk: tape.param(self.bk.clone()),
            wv: tape.param(self.wv.clone()),
            bv: tape.param(self.bv.clone()),
            wo: tape.param(self.wo.clone()),
            bo: tape.param(self.bo.clone()),
        }
    }
}

/// Multi-head attention: project, split heads, attend per head, concatenate, project out.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    mask: HeadMask<'_>,
    heads: usize,
) -> Result<Var> {
    let d_model = tape.value(x).cols();
    if heads == 0 || d_model % heads != 0 {
        return Err(shape_err(
            "multi_head_attention",
            format!("d_model {d_model} is not divisible by {heads} heads"),
        ));
    }
    let project = |tape: &mut Tape, w: Var, b: Var| -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    };
    let q = project(tape, p.wq, p.bq)?;
    let k = project(tape, p.wk, p.bk)?;
    let v = project(tape, p.wv, p.bv)?;
    let dh = d_model / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        outs.push(attend(tape, qh, kh, vh, mask)?.0);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let y = tape.matmul(cat, p.wo)?;
    tape.add_row(y, p.bo)
}

/// Non-differentiable convenience wrapper around [`multi_head_attention`].
pub fn multi_head_attention_values(
    x: &Tensor,
    params: &AttentionParams,
    mask: HeadMask<'_>,
    heads: usize,
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let vars = params.register(&mut tape);
    let out = multi_head_attention(&mut tape, xv, &vars, mask, heads)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{causal_mask, cross_image_mask, truncated_mask, AttentionMask};
    use crate::numerics::{finite_diff, relative_error};
    use crate::sequence::TokenSequence;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Explicit softmax-then-matmul, written independently of `attend`.
    fn oracle_weights(q: &Tensor, k: &Tensor, mask: &AttentionMask) -> Tensor {
        let t = q.rows();
        let d = q.cols() as f64;
        let mut w = Tensor::zeros(&[t, t]);
        for i in 0..t {
            let mut logits = vec![f64::NEG_INFINITY; t];
            for j in 0..t {
                if mask.is_visible(i, j) {
                    logits[j] = (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / d.sqrt();
                }
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..t {
                w.data_mut()[i * t + j] = (logits[j] - m).exp() / z;
            }
        }
        w
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn two_image() -> TokenSequence {
        TokenSequence::from_lengths(&[2, 3], &[1, 2], 0).unwrap()
    }

    #[test]
    fn single_position() {
        let v = Tensor::from_rows(&[vec![2.0, -1.0]]);
        let q = Tensor::from_rows(&[vec![0.3, 0.1]]);
        let out = masked_attention(&q, &q, &v, &causal_mask(1).unwrap()).unwrap();
        assert_eq!(out.values, v);
        assert_eq!(out.weights.data(), &[1.0]);
    }

    #[test]
    fn uniform_over_visible() {
        let z = Tensor::zeros(&[2, 1]);
        let v = Tensor::from_rows(&[vec![1.0], vec![3.0]]);
        let out = masked_attention(&z, &z, &v, &causal_mask(2).unwrap()).unwrap();
        assert_eq!(out.values.data(), &[1.0, 2.0]);
    }

    #[test]
    fn matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = two_image();
        let t = s.len();
        let (q, k, v) = (rand_t(&mut rng, t, 4), rand_t(&mut rng, t, 4), rand_t(&mut rng, t, 3));
        for mask in [causal_mask(t).unwrap(), cross_image_mask(&s).unwrap(), truncated_mask(&s).unwrap()] {
            let out = masked_attention(&q, &k, &v, &mask).unwrap();
            let w = oracle_weights(&q, &k, &mask);
            assert!(max_abs_diff(&out.weights, &w) < 1e-12);
            assert!(max_abs_diff(&out.values, &w.matmul(&v).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn fused_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = two_image();
        let t = s.len();
        let (q, k, v) = (rand_t(&mut rng, t, 4), rand_t(&mut rng, t, 4), rand_t(&mut rng, t, 3));
        let c = causal_mask(t).unwrap();
        let x = cross_image_mask(&s).unwrap();

        let same = fused_attention(&q, &k, &v, &c, &c).unwrap();
        let plain = masked_attention(&q, &k, &v, &c).unwrap();
        assert!(max_abs_diff(&same.weights, &plain.weights) < 1e-15);

        let fused = fused_attention(&q, &k, &v, &c, &x).unwrap();
        let wc = oracle_weights(&q, &k, &c);
        let wx = oracle_weights(&q, &k, &x);
        let mut avg = wc.clone();
        avg.add_assign(&wx);
        avg.scale_assign(0.5);
        assert!(max_abs_diff(&fused.weights, &avg) < 1e-12);
        for i in 0..t {
            assert!((fused.weights.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..t {
                let (in_c, in_x) = (c.is_visible(i, j), x.is_visible(i, j));
                let w = fused.weights.get(i, j);
                if !in_c && !in_x {
                    assert_eq!(w, 0.0);
                } else if in_x && !in_c {
                    assert!((w - 0.5 * wx.get(i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn truncated_blocks_cross_image_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = two_image();
        let t = s.len();
        let q = rand_t(&mut rng, t, 4);
        let out = masked_attention(&q, &q, &q, &truncated_mask(&s).unwrap()).unwrap();
        for i in s.image_span(2).unwrap() {
            for j in s.image_span(1).unwrap() {
                assert_eq!(out.weights.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let q = Tensor::zeros(&[3, 2]);
        let k = Tensor::zeros(&[3, 3]);
        assert!(masked_attention(&q, &k, &q, &causal_mask(3).unwrap()).is_err());
        assert!(masked_attention(&q, &q, &q, &causal_mask(2).unwrap()).is_err());
    }

    fn random_params(rng: &mut ChaCha8Rng, d: usize) -> AttentionParams {
        let mut p = AttentionParams::zeros(d);
        for t in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo, &mut p.bq, &mut p.bk, &mut p.bv, &mut p.bo] {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    #[test]
    fn multi_head_zero_input_zero_bias_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = random_params(&mut rng, 4);
        for b in [&mut p.bq, &mut p.bk, &mut p.bv, &mut p.bo] {
            *b = Tensor::zeros(&[4]);
        }
        let x = Tensor::zeros(&[3, 4]);
        let c = causal_mask(3).unwrap();
        let y = multi_head_attention_values(&x, &p, HeadMask::Single(&c), 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multi_head_single_head_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, 4);
        let x = rand_t(&mut rng, 5, 4);
        let c = causal_mask(5).unwrap();
        let y = multi_head_attention_values(&x, &p, HeadMask::Single(&c), 1).unwrap();
        let proj = |w: &Tensor, b: &Tensor| {
            let mut o = x.matmul(w).unwrap();
            for i in 0..o.rows() {
                for j in 0..o.cols() {
                    o.data_mut()[i * 4 + j] += b.data()[j];
                }
            }
            o
        };
        let (q, k, v) = (proj(&p.wq, &p.bq), proj(&p.wk, &p.bk), proj(&p.wv, &p.bv));
        let a = oracle_weights(&q, &k, &c).matmul(&v).unwrap();
        let mut expect = a.matmul(&p.wo).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                expect.data_mut()[i * 4 + j] += p.bo.data()[j];
            }
        }
        assert!(max_abs_diff(&y, &expect) < 1e-12);
    }

    #[test]
    fn multi_head_two_heads_matches_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_params(&mut rng, 4);
        let x = rand_t(&mut rng, 5, 4);
        let s = TokenSequence::from_lengths(&[2, 2], &[0, 1], 0).unwrap();
        let c = causal_mask(5).unwrap();
        let sel = cross_image_mask(&s).unwrap();
        let y = multi_head_attention_values(&x, &p, HeadMask::Fused { causal: &c, selective: &sel }, 2).unwrap();

        let proj = |w: &Tensor, b: &Tensor| {
            let mut o = x.matmul(w).unwrap();
            for i in 0..5 {
                for j in 0..4 {
                    o.data_mut()[i * 4 + j] += b.data()[j];
                }
            }
            o
        };
        let cols = |m: &Tensor, from: usize| {
            Tensor::from_rows(&(0..5).map(|i| m.row(i)[from..from + 2].to_vec()).collect::<Vec<_>>())
        };
        let (q, k, v) = (proj(&p.wq, &p.bq), proj(&p.wk, &p.bk), proj(&p.wv, &p.bv));
        let mut heads = Vec::new();
        for h in 0..2 {
            let (qh, kh, vh) = (cols(&q, 2 * h), cols(&k, 2 * h), cols(&v, 2 * h));
            let mut w = oracle_weights(&qh, &kh, &c);
            w.add_assign(&oracle_weights(&qh, &kh, &sel));
            w.scale_assign(0.5);
            heads.push(w.matmul(&vh).unwrap());
        }
        let cat = Tensor::from_rows(
            &(0..5).map(|i| [heads[0].row(i), heads[1].row(i)].concat()).collect::<Vec<_>>(),
        );
        let mut expect = cat.matmul(&p.wo).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                expect.data_mut()[i * 4 + j] += p.bo.data()[j];
            }
        }
        assert!(max_abs_diff(&y, &expect) < 1e-12);
    }

    #[test]
    fn multi_head_rejects_indivisible_width() {
        let p = AttentionParams::zeros(5);
        let c = causal_mask(2).unwrap();
        assert!(multi_head_attention_values(&Tensor::zeros(&[2, 5]), &p, HeadMask::Single(&c), 2).is_err());
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = two_image();
        let t = s.len();
        let c = causal_mask(t).unwrap();
        let x = cross_image_mask(&s).unwrap();
        let q0 = rand_t(&mut rng, t, 3);
        let k0 = rand_t(&mut rng, t, 3);
        let v0 = rand_t(&mut rng, t, 2);
        let w = rand_t(&mut rng, t, 2);
        for fused in [false, true] {
            let loss = |tape: &mut Tape, q: Var| {
                let k = tape.constant(k0.clone());
                let v = tape.param(v0.clone());
                let m = if fused { HeadMask::Fused { causal: &c, selective: &x } } else { HeadMask::Single(&x) };
                let (out, _) = attend(tape, q, k, v, m).unwrap();
                let wv = tape.constant(w.clone());
                let p = tape.mul(out, wv).unwrap();
                tape.sum(p)
            };
            let mut tape = Tape::new();
            let q = tape.param(q0.clone());
            let l = loss(&mut tape, q);
            let g = tape.backward(l).unwrap();
            let numeric = finite_diff(
                |p| {
                    let mut t2 = Tape::inference();
                    let q = t2.param(Tensor::new(q0.shape().to_vec(), p.to_vec()).unwrap());
                    let l = loss(&mut t2, q);
                    t2.value(l).item()
                },
                q0.data(),
                1e-5,
            )
            .unwrap();
            for (a, n) in g.get(q).unwrap().data().iter().zip(&numeric) {
                assert!(relative_error(*a, *n) < 1e-4, "{a} vs {n}");
            }
        }
    }
}
