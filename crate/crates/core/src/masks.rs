//! Attention-mask regimes over interleaved sequences.
//!
//! Four visibility patterns are built here:
//!
//! * causal: `j <= i`;
//! * cross-image: causal, plus every pair of visual tokens from different
//!   images becomes mutually visible;
//! * selective cross-image: like cross-image, restricted to pairs where both
//!   tokens are key tokens of their images;
//! * truncated: causal, minus every pair of visual tokens from different
//!   images.
//!
//! Only visual/visual pairs are affected. Text positions keep causal
//! visibility in every regime, so a question placed after the images still
//! sees all of them under truncation.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, MASK_SENTINEL};
use crate::sequence::TokenSequence;

/// Default key-token ratio.
pub const DEFAULT_RHO: f64 = 0.95;

/// `T×T` visibility matrix; `true` is additive 0, `false` the masking sentinel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    visible: Arc<[bool]>,
}

impl AttentionMask {
    /// Builds a mask from a visibility predicate. The diagonal is forced visible.
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut v = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                v.push(i == j || f(i, j));
            }
        }
        Self {
            size,
            visible: v.into(),
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::Format {
                what: "attention mask",
                detail: "rows must form a square matrix".into(),
            });
        }
        if (0..size).any(|i| !rows[i][i]) {
            return Err(Error::Format {
                what: "attention mask",
                detail: "diagonal must be visible".into(),
            });
        }
        Ok(Self {
            size,
            visible: rows.iter().flatten().copied().collect::<Vec<_>>().into(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.size + j]
    }

    /// Row-major visibility pattern.
    pub fn visibility(&self) -> &Arc<[bool]> {
        &self.visible
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Additive form: 0 where visible, [`MASK_SENTINEL`] where masked.
    pub fn to_additive(&self) -> Tensor {
        let data = self
            .visible
            .iter()
            .map(|&v| if v { 0.0 } else { MASK_SENTINEL })
            .collect();
        Tensor::new(vec![self.size, self.size], data).expect("square")
    }

    /// Every visible entry of `self` is visible in `other`.
    pub fn is_subset_of(&self, other: &AttentionMask) -> bool {
        self.size == other.size && self.visible.iter().zip(other.visible.iter()).all(|(&a, &b)| !a || b)
    }

    /// Text dump: header `T=<n> kind=<name>`, then one line per row of `1`/`0`.
    pub fn dump(&self, kind: &str) -> String {
        let mut out = format!("T={} kind={}\n", self.size, kind);
        for i in 0..self.size {
            for j in 0..self.size {
                out.push(if self.is_visible(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`AttentionMask::dump`] output into `(kind, mask)`.
    pub fn parse_dump(text: &str) -> Result<(String, AttentionMask)> {
        let bad = |detail: String| Error::Format {
            what: "mask dump",
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
        let mut parts = header.split(' ');
        let size: usize = parts
            .next()
            .and_then(|p| p.strip_prefix("T="))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad(format!("bad header {header:?}")))?;
        let kind = parts
            .next()
            .and_then(|p| p.strip_prefix("kind="))
            .ok_or_else(|| bad(format!("bad header {header:?}")))?
            .to_string();
        let mut rows = Vec::with_capacity(size);
        for line in lines.by_ref().take(size) {
            let row: Vec<bool> = line
                .chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    other => Err(bad(format!("unexpected character {other:?}"))),
                })
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        if rows.len() != size || lines.next().is_some() {
            return Err(bad(format!("expected exactly {size} rows")));
        }
        Ok((kind, AttentionMask::from_rows(&rows)?))
    }
}

/// Lower-triangular visibility.
pub fn causal_mask(len: usize) -> Result<AttentionMask> {
    if len == 0 {
        return Err(Error::InvalidArgument("causal mask needs length >= 1".into()));
    }
    Ok(AttentionMask::from_fn(len, |i, j| j <= i))
}

fn different_images(seq: &TokenSequence, i: usize, j: usize) -> Option<(usize, usize)> {
    match (seq.image_of(i), seq.image_of(j)) {
        (Some(a), Some(b)) if a != b => Some((a, b)),
        _ => None,
    }
}

/// Causal mask with all cross-image visual pairs made visible.
pub fn cross_image_mask(seq: &TokenSequence) -> Result<AttentionMask> {
    causal_mask(seq.len())?;
    Ok(AttentionMask::from_fn(seq.len(), |i, j| {
        different_images(seq, i, j).is_some() || j <= i
    }))
}

/// Causal mask with all cross-image visual pairs blocked.
pub fn truncated_mask(seq: &TokenSequence) -> Result<AttentionMask> {
    causal_mask(seq.len())?;
    Ok(AttentionMask::from_fn(seq.len(), |i, j| {
        different_images(seq, i, j).is_none() && j <= i
    }))
}

/// Causal mask with cross-image visibility between key tokens only.
pub fn selective_cross_mask(seq: &TokenSequence, keys: &KeyTokenSet) -> Result<AttentionMask> {
    keys.check_consistent(seq)?;
    causal_mask(seq.len())?;
    let mut is_key = vec![false; seq.len()];
    for &p in keys.sets.iter().flatten() {
        is_key[p] = true;
    }
    Ok(AttentionMask::from_fn(seq.len(), |i, j| {
        (different_images(seq, i, j).is_some() && is_key[i] && is_key[j]) || j <= i
    }))
}

/// L2 norm of each visual token's embedding; `None` at text positions.
pub fn response_intensity(embeddings: &Tensor, seq: &TokenSequence) -> Result<Vec<Option<f64>>> {
    if embeddings.shape().len() != 2 || embeddings.rows() != seq.len() {
        return Err(Error::Shape {
            op: "response_intensity",
            detail: format!("{} positions but embeddings {:?}", seq.len(), embeddings.shape()),
        });
    }
    Ok((0..seq.len())
        .map(|i| {
            seq.image_of(i)
                .map(|_| embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        })
        .collect())
}

/// Per-image sets of key-token positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyTokenSet {
    /// `sets[k - 1]` holds the sorted absolute positions selected in image `k`.
    pub sets: Vec<Vec<usize>>,
    pub ratio: f64,
}

impl KeyTokenSet {
    /// Every visual token of every image.
    pub fn all(seq: &TokenSequence) -> Self {
        let sets = (1..=seq.num_images())
            .map(|k| seq.image_span(k).expect("k in range").collect())
            .collect();
        Self { sets, ratio: 1.0 }
    }

    pub fn image(&self, k: usize) -> &[usize] {
        &self.sets[k - 1]
    }

    fn check_consistent(&self, seq: &TokenSequence) -> Result<()> {
        if self.sets.len() != seq.num_images() {
            return Err(Error::InvalidArgument(format!(
                "key set covers {} images, sequence has {}",
                self.sets.len(),
                seq.num_images()
            )));
        }
        for (k, set) in self.sets.iter().enumerate() {
            let span = seq.image_span(k + 1)?;
            if let Some(&p) = set.iter().find(|p| !span.contains(p)) {
                return Err(Error::InvalidArgument(format!(
                    "key position {p} is outside image {} span {span:?}",
                    k + 1
                )));
            }
        }
        Ok(())
    }
}

/// Number of key tokens kept for an image of `tau` tokens: `max(1, floor(rho * tau))`.
pub fn key_token_count(tau: usize, rho: f64) -> usize {
    ((rho * tau as f64).floor() as usize).clamp(1, tau)
}

pub fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("key-token ratio must lie in (0, 1], got {rho}")))
    }
}

/// Top-scoring visual tokens per image; ties go to the lower position.
pub fn select_key_tokens(scores: &[Option<f64>], seq: &TokenSequence, rho: f64) -> Result<KeyTokenSet> {
    check_rho(rho)?;
    if scores.len() != seq.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} positions",
            scores.len(),
            seq.len()
        )));
    }
    let mut sets = Vec::with_capacity(seq.num_images());
    for k in 1..=seq.num_images() {
        let span = seq.image_span(k)?;
        let mut ranked: Vec<(usize, f64)> = Vec::with_capacity(span.len());
        for p in span.clone() {
            let s = scores[p].ok_or_else(|| {
                Error::InvalidArgument(format!("visual position {p} has no score"))
            })?;
            ranked.push((p, s));
        }
        // stable: equal scores keep ascending position order
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut chosen: Vec<usize> = ranked
            .into_iter()
            .take(key_token_count(span.len(), rho))
            .map(|(p, _)| p)
            .collect();
        chosen.sort_unstable();
        sets.push(chosen);
    }
    Ok(KeyTokenSet { sets, ratio: rho })
}

/// Attention regime applied at one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MaskKind {
    Causal,
    CrossSelective,
    Truncated,
    /// Equal-weight average of causal and selective attention weights.
    FusedCausalSelective,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [
        MaskKind::Causal,
        MaskKind::CrossSelective,
        MaskKind::Truncated,
        MaskKind::FusedCausalSelective,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Causal => "causal",
            MaskKind::CrossSelective => "selective",
            MaskKind::Truncated => "truncated",
            MaskKind::FusedCausalSelective => "fused",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(MaskKind::Causal),
            "selective" | "cross-selective" => Ok(MaskKind::CrossSelective),
            "truncated" => Ok(MaskKind::Truncated),
            "fused" => Ok(MaskKind::FusedCausalSelective),
            other => Err(Error::InvalidArgument(format!(
                "unknown mask kind {other:?} (expected one of: causal, selective, truncated, fused)"
            ))),
        }
    }
}

/// How mask regimes are assigned to decoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MaskPolicy {
    /// Odd layers use `odd`, even layers use causal.
    Alternating { odd: MaskKind },
    /// The same regime at every layer.
    Uniform(MaskKind),
}

impl MaskPolicy {
    /// Fused attention on odd layers, causal on even layers.
    pub const CROSS_ATTENTIVE: MaskPolicy = MaskPolicy::Alternating {
        odd: MaskKind::FusedCausalSelective,
    };

    pub const NAMES: [&'static str; 6] = [
        "alternating",
        "alternating-hard",
        "causal",
        "selective",
        "truncated",
        "fused",
    ];

    pub fn name(self) -> String {
        match self {
            MaskPolicy::Alternating {
                odd: MaskKind::FusedCausalSelective,
            } => "alternating".into(),
            MaskPolicy::Alternating {
                odd: MaskKind::CrossSelective,
            } => "alternating-hard".into(),
            MaskPolicy::Alternating { odd } => format!("alternating-{odd}"),
            MaskPolicy::Uniform(k) => k.name().into(),
        }
    }

    /// Whether any layer under this policy needs key tokens.
    pub fn uses_keys(self) -> bool {
        let needs = |k: MaskKind| matches!(k, MaskKind::CrossSelective | MaskKind::FusedCausalSelective);
        match self {
            MaskPolicy::Alternating { odd } => needs(odd),
            MaskPolicy::Uniform(k) => needs(k),
        }
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl TryFrom<String> for MaskKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MaskKind> for String {
    fn from(k: MaskKind) -> String {
        k.name().into()
    }
}

impl TryFrom<String> for MaskPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MaskPolicy> for String {
    fn from(p: MaskPolicy) -> String {
        p.name()
    }
}

impl From<MaskKind> for MaskPolicy {
    fn from(k: MaskKind) -> Self {
        MaskPolicy::Uniform(k)
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alternating" => Ok(MaskPolicy::CROSS_ATTENTIVE),
            "alternating-hard" => Ok(MaskPolicy::Alternating {
                odd: MaskKind::CrossSelective,
            }),
            other => match other.strip_prefix("alternating-") {
                Some(odd) => odd.parse().map(|odd| MaskPolicy::Alternating { odd }),
                None => other.parse().map(MaskPolicy::Uniform),
            }
            .map_err(|_| {
                Error::InvalidArgument(format!(
                    "unknown mask mode {other:?} (expected one of: {})",
                    MaskPolicy::NAMES.join(", ")
                ))
            }),
        }
    }
}

/// Regime for decoder layer `layer_index` (1-based).
pub fn mask_for_layer(layer_index: usize, policy: MaskPolicy) -> Result<MaskKind> {
    if layer_index == 0 {
        return Err(Error::InvalidArgument("layer indices start at 1".into()));
    }
    Ok(match policy {
        MaskPolicy::Alternating { odd } if layer_index % 2 == 1 => odd,
        MaskPolicy::Alternating { .. } => MaskKind::Causal,
        MaskPolicy::Uniform(k) => k,
    })
}

/// Masks needed to evaluate one sequence, built once and shared by all layers.
#[derive(Clone, Debug)]
pub struct MaskSet {
    pub causal: AttentionMask,
    pub selective: Option<AttentionMask>,
    pub truncated: Option<AttentionMask>,
}

impl MaskSet {
    pub fn build(seq: &TokenSequence, policy: MaskPolicy, keys: Option<&KeyTokenSet>) -> Result<Self> {
        let kinds: Vec<MaskKind> = match policy {
            MaskPolicy::Alternating { odd } => vec![odd, MaskKind::Causal],
            MaskPolicy::Uniform(k) => vec![k],
        };
        let selective = if policy.uses_keys() {
            let keys = keys.ok_or_else(|| {
                Error::InvalidArgument(format!("mask policy {policy} needs key tokens"))
            })?;
            Some(selective_cross_mask(seq, keys)?)
        } else {
            None
        };
        let truncated = if kinds.contains(&MaskKind::Truncated) {
            Some(truncated_mask(seq)?)
        } else {
            None
        };
        Ok(Self {
            causal: causal_mask(seq.len())?,
            selective,
            truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> TokenSequence {
        TokenSequence::from_lengths(&[2, 2], &[0, 1], 0).unwrap()
    }

    fn extra_beyond_causal(m: &AttentionMask) -> Vec<(usize, usize)> {
        let c = causal_mask(m.size()).unwrap();
        let mut v = Vec::new();
        for i in 0..m.size() {
            for j in 0..m.size() {
                if m.is_visible(i, j) && !c.is_visible(i, j) {
                    v.push((i, j));
                }
            }
        }
        v
    }

    #[test]
    fn causal_examples() {
        assert_eq!(causal_mask(1).unwrap().dump("causal"), "T=1 kind=causal\n1\n");
        let m = causal_mask(3).unwrap();
        assert_eq!(m.dump("causal"), "T=3 kind=causal\n100\n110\n111\n");
        for t in 1..10 {
            let m = causal_mask(t).unwrap();
            for i in 0..t {
                assert_eq!((0..t).filter(|&j| m.is_visible(i, j)).count(), i + 1);
            }
        }
        assert!(causal_mask(0).is_err());
    }

    #[test]
    fn cross_example() {
        let m = cross_image_mask(&layout()).unwrap();
        assert_eq!(extra_beyond_causal(&m), vec![(0, 2), (0, 3), (1, 2), (1, 3)]);
        let single = TokenSequence::from_lengths(&[4], &[2], 0).unwrap();
        assert_eq!(cross_image_mask(&single).unwrap(), causal_mask(6).unwrap());
    }

    #[test]
    fn truncated_example() {
        let s = layout();
        let m = truncated_mask(&s).unwrap();
        let c = causal_mask(5).unwrap();
        for (i, j) in [(2, 0), (2, 1), (3, 0), (3, 1)] {
            assert!(c.is_visible(i, j) && !m.is_visible(i, j));
        }
        for j in 0..5 {
            assert!(m.is_visible(4, j));
        }
    }

    #[test]
    fn selective_example() {
        let s = layout();
        let keys = KeyTokenSet {
            sets: vec![vec![1], vec![2]],
            ratio: 0.5,
        };
        let m = selective_cross_mask(&s, &keys).unwrap();
        assert_eq!(extra_beyond_causal(&m), vec![(1, 2)]);
        let all = KeyTokenSet::all(&s);
        assert_eq!(selective_cross_mask(&s, &all).unwrap(), cross_image_mask(&s).unwrap());
    }

    #[test]
    fn selective_rejects_inconsistent_keys() {
        let s = layout();
        let wrong_count = KeyTokenSet { sets: vec![vec![0]], ratio: 0.5 };
        assert!(selective_cross_mask(&s, &wrong_count).is_err());
        let outside = KeyTokenSet { sets: vec![vec![2], vec![3]], ratio: 0.5 };
        assert!(selective_cross_mask(&s, &outside).is_err());
    }

    #[test]
    fn intensity_is_l2_norm() {
        let s = TokenSequence::from_lengths(&[2], &[1], 0).unwrap();
        let e = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(response_intensity(&e, &s).unwrap(), vec![Some(5.0), Some(0.0), None]);
        assert!(response_intensity(&Tensor::zeros(&[2, 2]), &s).is_err());
    }

    #[test]
    fn selection_examples() {
        let s = TokenSequence::from_lengths(&[3], &[0], 0).unwrap();
        let keys = select_key_tokens(&[Some(5.0), Some(5.0), Some(1.0)], &s, 0.67).unwrap();
        assert_eq!(keys.sets, vec![vec![0, 1]]);
        let keys = select_key_tokens(&[Some(1.0), Some(2.0), Some(3.0)], &s, 1.0).unwrap();
        assert_eq!(keys.sets, vec![vec![0, 1, 2]]);

        let s2 = TokenSequence::from_lengths(&[2], &[0], 0).unwrap();
        let keys = select_key_tokens(&[Some(0.1), Some(0.9)], &s2, 0.3).unwrap();
        assert_eq!(keys.sets, vec![vec![1]]);

        assert!(select_key_tokens(&[Some(0.1), Some(0.9)], &s2, 0.0).is_err());
        assert!(select_key_tokens(&[Some(0.1), Some(0.9)], &s2, 1.5).is_err());
        assert!(select_key_tokens(&[Some(0.1), None], &s2, 0.5).is_err());
    }

    #[test]
    fn layer_alternation() {
        let p = MaskPolicy::Alternating { odd: MaskKind::CrossSelective };
        assert_eq!(mask_for_layer(1, p).unwrap(), MaskKind::CrossSelective);
        assert_eq!(mask_for_layer(2, p).unwrap(), MaskKind::Causal);
        assert_eq!(mask_for_layer(3, p).unwrap(), MaskKind::CrossSelective);
        assert_eq!(
            mask_for_layer(1, MaskPolicy::CROSS_ATTENTIVE).unwrap(),
            MaskKind::FusedCausalSelective
        );
        for l in 1..6 {
            assert_eq!(
                mask_for_layer(l, MaskPolicy::Uniform(MaskKind::Truncated)).unwrap(),
                MaskKind::Truncated
            );
        }
        assert!(mask_for_layer(0, p).is_err());
    }

    #[test]
    fn policy_names_round_trip() {
        for name in MaskPolicy::NAMES {
            let p: MaskPolicy = name.parse().unwrap();
            assert_eq!(p.name(), name);
        }
        for odd in MaskKind::ALL {
            let p = MaskPolicy::Alternating { odd };
            assert_eq!(p.name().parse::<MaskPolicy>().unwrap(), p);
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(serde_json::from_str::<MaskPolicy>(&json).unwrap(), p);
        }
        assert_eq!(serde_json::to_string(&MaskPolicy::CROSS_ATTENTIVE).unwrap(), "\"alternating\"");
        let err = "sideways".parse::<MaskPolicy>().unwrap_err().to_string();
        assert!(err.contains("alternating-hard"), "{err}");
        assert!(serde_json::from_str::<MaskKind>("\"sideways\"").is_err());
    }

    #[test]
    fn dump_round_trip_and_rejects_garbage() {
        let s = TokenSequence::from_lengths(&[3, 2, 1], &[1, 0, 2], 0).unwrap();
        let m = cross_image_mask(&s).unwrap();
        let (kind, back) = AttentionMask::parse_dump(&m.dump("cross")).unwrap();
        assert_eq!(kind, "cross");
        assert_eq!(back, m);
        assert!(AttentionMask::parse_dump("T=2 kind=x\n10\n").is_err());
        assert!(AttentionMask::parse_dump("T=2 kind=x\n10\n1a\n").is_err());
        assert!(AttentionMask::parse_dump("T=2 kind=x\n00\n11\n").is_err());
    }

    #[test]
    fn additive_form() {
        let a = causal_mask(2).unwrap().to_additive();
        assert_eq!(a.data(), &[0.0, MASK_SENTINEL, 0.0, 0.0]);
    }
}
