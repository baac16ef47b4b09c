//! Interleaved image/text token sequences.
//!
//! A sequence is laid out as `I_1, T_1, I_2, T_2, ..., I_N, T_N`, where each
//! image block holds at least one visual token and text blocks may be empty.
//! Image indices are 1-based, positions 0-based.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Segment membership of one position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentTag {
    /// Visual token of image `k` (1-based).
    Visual(usize),
    /// Token of text segment `k` (1-based, the segment following image `k`).
    Text(usize),
}

impl SegmentTag {
    pub fn image(self) -> Option<usize> {
        match self {
            SegmentTag::Visual(k) => Some(k),
            SegmentTag::Text(_) => None,
        }
    }

    pub fn is_visual(self) -> bool {
        matches!(self, SegmentTag::Visual(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    token_ids: Vec<u32>,
    embeddings: Option<Tensor>,
    tags: Vec<SegmentTag>,
    image_lengths: Vec<usize>,
    text_lengths: Vec<usize>,
    image_starts: Vec<usize>,
}

impl TokenSequence {
    /// Concatenates blocks in interleaved order.
    pub fn build_interleaved(image_blocks: &[Vec<u32>], text_blocks: &[Vec<u32>]) -> Result<Self> {
        if image_blocks.is_empty() {
            return Err(Error::InvalidArgument("sequence needs at least one image".into()));
        }
        if image_blocks.len() != text_blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "{} image blocks but {} text blocks",
                image_blocks.len(),
                text_blocks.len()
            )));
        }
        if let Some(k) = image_blocks.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("image {} has no visual tokens", k + 1)));
        }

        let mut seq = TokenSequence {
            token_ids: Vec::new(),
            embeddings: None,
            tags: Vec::new(),
            image_lengths: Vec::with_capacity(image_blocks.len()),
            text_lengths: Vec::with_capacity(text_blocks.len()),
            image_starts: Vec::with_capacity(image_blocks.len()),
        };
        for (k, (img, txt)) in image_blocks.iter().zip(text_blocks).enumerate() {
            seq.image_starts.push(seq.token_ids.len());
            seq.token_ids.extend_from_slice(img);
            seq.tags.extend(std::iter::repeat(SegmentTag::Visual(k + 1)).take(img.len()));
            seq.token_ids.extend_from_slice(txt);
            seq.tags.extend(std::iter::repeat(SegmentTag::Text(k + 1)).take(txt.len()));
            seq.image_lengths.push(img.len());
            seq.text_lengths.push(txt.len());
        }
        Ok(seq)
    }

    /// Builds the positional layout only, filling every id with `fill`.
    pub fn from_lengths(image_lengths: &[usize], text_lengths: &[usize], fill: u32) -> Result<Self> {
        let imgs: Vec<Vec<u32>> = image_lengths.iter().map(|&n| vec![fill; n]).collect();
        let txts: Vec<Vec<u32>> = text_lengths.iter().map(|&n| vec![fill; n]).collect();
        Self::build_interleaved(&imgs, &txts)
    }

    /// Attaches per-position embeddings (`T×d`).
    pub fn with_embeddings(mut self, embeddings: Tensor) -> Result<Self> {
        if embeddings.rows() != self.len() || embeddings.shape().len() != 2 {
            return Err(Error::Shape {
                op: "with_embeddings",
                detail: format!("{} positions but embeddings {:?}", self.len(), embeddings.shape()),
            });
        }
        self.embeddings = Some(embeddings);
        Ok(self)
    }

    /// Appends a token to the final text segment.
    pub fn push_text(&mut self, token: u32) {
        let n = self.image_lengths.len();
        self.token_ids.push(token);
        self.tags.push(SegmentTag::Text(n));
        self.text_lengths[n - 1] += 1;
        self.embeddings = None;
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_images(&self) -> usize {
        self.image_lengths.len()
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn tags(&self) -> &[SegmentTag] {
        &self.tags
    }

    pub fn embeddings(&self) -> Option<&Tensor> {
        self.embeddings.as_ref()
    }

    pub fn image_lengths(&self) -> &[usize] {
        &self.image_lengths
    }

    pub fn text_lengths(&self) -> &[usize] {
        &self.text_lengths
    }

    /// Tag at position `i`.
    pub fn segment_of(&self, i: usize) -> Result<SegmentTag> {
        self.tags
            .get(i)
            .copied()
            .ok_or(Error::OutOfRange { index: i, len: self.len() })
    }

    /// Image index of position `i` when it is visual; `None` for text.
    /// Panics when `i` is out of range.
    pub fn image_of(&self, i: usize) -> Option<usize> {
        self.tags[i].image()
    }

    /// Half-open range of the positions of image `k` (1-based).
    pub fn image_span(&self, k: usize) -> Result<Range<usize>> {
        if k == 0 || k > self.num_images() {
            return Err(Error::OutOfRange { index: k, len: self.num_images() });
        }
        let start = self.image_starts[k - 1];
        Ok(start..start + self.image_lengths[k - 1])
    }

    /// Splits the ids back into `(image_blocks, text_blocks)`.
    pub fn blocks(&self) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
        let mut imgs = Vec::new();
        let mut txts = Vec::new();
        let mut pos = 0;
        for (&il, &tl) in self.image_lengths.iter().zip(&self.text_lengths) {
            imgs.push(self.token_ids[pos..pos + il].to_vec());
            pos += il;
            txts.push(self.token_ids[pos..pos + tl].to_vec());
            pos += tl;
        }
        (imgs, txts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> TokenSequence {
        TokenSequence::build_interleaved(&[vec![1, 1], vec![2, 2]], &[vec![], vec![9]]).unwrap()
    }

    #[test]
    fn single_image_layout() {
        let s = TokenSequence::build_interleaved(&[vec![5, 6]], &[vec![7]]).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.tags(), &[SegmentTag::Visual(1), SegmentTag::Visual(1), SegmentTag::Text(1)]);
    }

    #[test]
    fn two_image_layout_with_empty_text() {
        use SegmentTag::*;
        let s = layout();
        assert_eq!(s.len(), 5);
        assert_eq!(s.tags(), &[Visual(1), Visual(1), Visual(2), Visual(2), Text(2)]);
        assert_eq!(s.segment_of(2).unwrap(), Visual(2));
        assert_eq!(s.segment_of(4).unwrap(), Text(2));
        assert!(s.segment_of(5).is_err());
        assert_eq!(s.image_span(1).unwrap(), 0..2);
        assert_eq!(s.image_span(2).unwrap(), 2..4);
        assert!(s.image_span(0).is_err());
        assert!(s.image_span(3).is_err());
    }

    #[test]
    fn rejects_bad_blocks() {
        assert!(TokenSequence::build_interleaved(&[], &[]).is_err());
        assert!(TokenSequence::build_interleaved(&[vec![]], &[vec![1]]).is_err());
        assert!(TokenSequence::build_interleaved(&[vec![1]], &[]).is_err());
    }

    #[test]
    fn push_text_extends_last_segment() {
        let mut s = layout();
        s.push_text(4);
        assert_eq!(s.text_lengths(), &[0, 2]);
        assert_eq!(s.segment_of(5).unwrap(), SegmentTag::Text(2));
    }

    fn blocks_strategy() -> impl Strategy<Value = (Vec<Vec<u32>>, Vec<Vec<u32>>)> {
        (1usize..5).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::collection::vec(0u32..50, 1..7), n),
                prop::collection::vec(prop::collection::vec(0u32..50, 0..4), n),
            )
        })
    }

    /// Linear scan over block boundaries, independent of the stored tags.
    fn scan_tag(imgs: &[Vec<u32>], txts: &[Vec<u32>], i: usize) -> SegmentTag {
        let mut pos = 0;
        for k in 0..imgs.len() {
            if i < pos + imgs[k].len() {
                return SegmentTag::Visual(k + 1);
            }
            pos += imgs[k].len();
            if i < pos + txts[k].len() {
                return SegmentTag::Text(k + 1);
            }
            pos += txts[k].len();
        }
        unreachable!()
    }

    proptest! {
        #[test]
        fn blocks_round_trip((imgs, txts) in blocks_strategy()) {
            let s = TokenSequence::build_interleaved(&imgs, &txts).unwrap();
            let total: usize = imgs.iter().chain(&txts).map(Vec::len).sum();
            prop_assert_eq!(s.len(), total);
            prop_assert_eq!(s.blocks(), (imgs.clone(), txts.clone()));
            for k in 1..=imgs.len() {
                prop_assert_eq!(s.image_span(k).unwrap().len(), imgs[k - 1].len());
            }
        }

        #[test]
        fn tags_match_scan_and_spans((imgs, txts) in blocks_strategy()) {
            let s = TokenSequence::build_interleaved(&imgs, &txts).unwrap();
            for i in 0..s.len() {
                let tag = s.segment_of(i).unwrap();
                prop_assert_eq!(tag, scan_tag(&imgs, &txts, i));
                for k in 1..=imgs.len() {
                    let inside = s.image_span(k).unwrap().contains(&i);
                    prop_assert_eq!(tag == SegmentTag::Visual(k), inside);
                }
            }
        }
    }
}
