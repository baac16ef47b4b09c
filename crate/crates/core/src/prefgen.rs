//! Chosen/rejected answer pairs.
//!
//! The chosen answer comes from generation under the cross-image policy,
//! replaced by the oracle answer when it is wrong. The rejected answer is
//! generated with cross-image attention cut off ([`MaskKind::Truncated`]).
//! Pairs whose two answers coincide are dropped.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{MaskKind, MaskPolicy};
use crate::synthbench::{oracle_answer, Responder, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlusSource {
    /// The generated answer was already correct.
    Model,
    /// The generated answer was wrong and got replaced by the oracle answer.
    OracleCorrected,
}

/// One training pair. The rejected side is always generated under
/// [`MaskKind::Truncated`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub sample_id: u64,
    pub y_plus: Vec<u32>,
    pub y_minus: Vec<u32>,
    pub plus_source: PlusSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PreferencePair>,
    pub total: usize,
    pub discarded: usize,
}

impl PairSet {
    pub fn discard_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.discarded as f64 / self.total as f64
        }
    }

    pub fn oracle_corrected(&self) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.plus_source == PlusSource::OracleCorrected)
            .count()
    }
}

/// Builds pairs in dataset order. `positive` is the policy used for the
/// chosen side.
pub fn make_pairs(responder: &dyn Responder, dataset: &[Sample], positive: MaskPolicy) -> Result<PairSet> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot build pairs from an empty dataset".into()));
    }
    let built: Vec<Option<PreferencePair>> = dataset
        .par_iter()
        .map(|s| {
            let gold = oracle_answer(s)?;
            let candidate = responder.respond(s, positive)?;
            let minus = responder.respond(s, MaskKind::Truncated.into())?;
            let plus_source = if candidate == gold {
                PlusSource::Model
            } else {
                PlusSource::OracleCorrected
            };
            Ok((minus != gold).then(|| PreferencePair {
                sample_id: s.id,
                y_plus: vec![gold],
                y_minus: vec![minus],
                plus_source,
            }))
        })
        .collect::<Result<_>>()?;
    let total = built.len();
    let pairs: Vec<PreferencePair> = built.into_iter().flatten().collect();
    let discarded = total - pairs.len();
    if pairs.is_empty() {
        return Err(Error::EmptyPairSet { total, discarded });
    }
    Ok(PairSet { pairs, total, discarded })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeDifficulty {
    pub causal_accuracy: f64,
    pub truncated_accuracy: f64,
}

impl NegativeDifficulty {
    /// Causal minus truncated accuracy.
    pub fn gap(&self) -> f64 {
        self.causal_accuracy - self.truncated_accuracy
    }
}

/// Accuracy of greedy answers under plain causal and under truncated masks.
pub fn negative_difficulty_report(responder: &dyn Responder, dataset: &[Sample]) -> Result<NegativeDifficulty> {
    use crate::synthbench::evaluate;
    let causal = evaluate(responder, dataset, MaskKind::Causal.into())?;
    let truncated = evaluate(responder, dataset, MaskKind::Truncated.into())?;
    Ok(NegativeDifficulty {
        causal_accuracy: causal.accuracy,
        truncated_accuracy: truncated.accuracy,
    })
}

/// Pairs joined with their samples, in pair order.
pub fn resolve<'a>(dataset: &'a [Sample], pairs: &[PreferencePair]) -> Result<Vec<(&'a Sample, PreferencePair)>> {
    let by_id: HashMap<u64, &Sample> = dataset.iter().map(|s| (s.id, s)).collect();
    pairs
        .iter()
        .map(|p| {
            by_id
                .get(&p.sample_id)
                .map(|s| (*s, p.clone()))
                .ok_or_else(|| Error::InvalidArgument(format!("pair refers to unknown sample {}", p.sample_id)))
        })
        .collect()
}

/// One JSON record per line: `{"sample_id", "y_plus", "y_minus", "plus_source"}`.
pub fn write_pairs(mut w: impl Write, pairs: &[PreferencePair]) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs(r: impl BufRead) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PreferencePair = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "pairs",
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        if p.y_plus.is_empty() || p.y_minus.is_empty() || p.y_plus == p.y_minus {
            return Err(Error::Format {
                what: "pairs",
                detail: format!("line {}: answers must be nonempty and distinct", lineno + 1),
            });
        }
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::{generate_dataset, DatasetSpec};

    fn data(n: usize) -> Vec<Sample> {
        generate_dataset(&DatasetSpec { size: n, seed: 3, ..DatasetSpec::default() }).unwrap()
    }

    #[test]
    fn gold_vs_prior_keeps_model_pairs() {
        let d = data(200);
        let rigged = |s: &Sample, p: MaskPolicy| {
            if p == MaskPolicy::Uniform(MaskKind::Truncated) { s.prior } else { s.gold }
        };
        let set = make_pairs(&rigged, &d, MaskPolicy::CROSS_ATTENTIVE).unwrap();
        let expected = d.iter().filter(|s| s.gold != s.prior).count();
        assert_eq!(set.pairs.len(), expected);
        assert_eq!(set.discarded, 200 - expected);
        for p in &set.pairs {
            assert_eq!(p.plus_source, PlusSource::Model);
            assert_ne!(p.y_plus, p.y_minus);
        }
    }

    #[test]
    fn agreeing_regimes_are_discarded() {
        let d = data(20);
        let gold = |s: &Sample, _: MaskPolicy| s.gold;
        match make_pairs(&gold, &d, MaskPolicy::CROSS_ATTENTIVE) {
            Err(Error::EmptyPairSet { total: 20, discarded: 20 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_positive_is_corrected() {
        let d = data(50);
        let wrong = |_: &Sample, _: MaskPolicy| 63;
        let set = make_pairs(&wrong, &d, MaskPolicy::CROSS_ATTENTIVE).unwrap();
        assert_eq!(set.pairs.len(), 50);
        assert_eq!(set.oracle_corrected(), 50);
        for (p, s) in set.pairs.iter().zip(&d) {
            assert_eq!(p.y_plus, vec![s.gold]);
            assert_eq!(p.y_minus, vec![63]);
        }
    }

    #[test]
    fn gold_model_has_no_gap() {
        let d = data(40);
        let gold = |s: &Sample, _: MaskPolicy| s.gold;
        let r = negative_difficulty_report(&gold, &d).unwrap();
        assert_eq!((r.causal_accuracy, r.truncated_accuracy, r.gap()), (1.0, 1.0, 0.0));
    }

    #[test]
    fn pair_file_round_trip() {
        let d = data(30);
        let wrong = |_: &Sample, _: MaskPolicy| 40;
        let set = make_pairs(&wrong, &d, MaskPolicy::CROSS_ATTENTIVE).unwrap();
        let mut buf = Vec::new();
        write_pairs(&mut buf, &set.pairs).unwrap();
        assert_eq!(read_pairs(&buf[..]).unwrap(), set.pairs);
        let line = std::str::from_utf8(&buf).unwrap().lines().next().unwrap().to_string();
        assert!(line.starts_with("{\"sample_id\":0,\"y_plus\":["), "{line}");
        assert!(read_pairs(&b"{\"sample_id\":0,\"y_plus\":[3],\"y_minus\":[3],\"plus_source\":\"model\"}\n"[..]).is_err());
        assert_eq!(resolve(&d, &set.pairs).unwrap().len(), 30);
        assert!(resolve(&d[..1], &set.pairs).is_err());
    }
}
