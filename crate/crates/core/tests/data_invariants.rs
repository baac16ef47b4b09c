use std::collections::BTreeMap;

use proptest::prelude::*;

use crossview_core::masks::MaskPolicy;
use crossview_core::model::{Model, ModelConfig};
use crossview_core::prefgen::{make_pairs, read_pairs, write_pairs};
use crossview_core::synthbench::{
    generate_dataset, oracle_answer, read_dataset, vocab, write_dataset, DatasetSpec, PairLayout, Sample, TaskKind,
};

fn settings(seed: u64, size: usize, layout: PairLayout) -> DatasetSpec {
    DatasetSpec { seed, size, pair_layout: layout, ..DatasetSpec::default() }
}

fn layouts() -> impl Strategy<Value = PairLayout> {
    prop_oneof![Just(PairLayout::Leading), Just(PairLayout::Random)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn swapping_the_question_pair(seed in any::<u64>(), layout in layouts()) {
        for s in generate_dataset(&settings(seed, 50, layout)).unwrap() {
            let mut swapped = s.clone();
            swapped.question.swap(1, 2);
            let g = oracle_answer(&swapped).unwrap();
            match s.kind {
                TaskKind::CountCompare => {
                    let flipped = if s.gold == vocab::FIRST { vocab::SECOND } else { vocab::FIRST };
                    prop_assert_eq!(g, flipped);
                }
                _ => prop_assert_eq!(g, s.gold),
            }
        }
    }

    #[test]
    fn relabeling_images_is_equivariant(seed in any::<u64>(), layout in layouts(), rot in 1usize..4) {
        for s in generate_dataset(&settings(seed, 50, layout)).unwrap() {
            let n = s.images.len();
            // image k moves to slot (k + rot) mod n
            let to = |k: usize| (k + rot) % n;
            let mut moved = s.clone();
            for (k, g) in s.images.iter().enumerate() {
                moved.images[to(k)] = g.clone();
            }
            for t in &mut moved.question[1..3] {
                *t = vocab::IMG_BASE + to((*t - vocab::IMG_BASE) as usize) as u32;
            }
            prop_assert_eq!(oracle_answer(&moved).unwrap(), s.gold);
        }
    }

    #[test]
    fn datasets_are_reproducible_and_round_trip(seed in any::<u64>(), size in 1usize..80, layout in layouts()) {
        let a = generate_dataset(&settings(seed, size, layout)).unwrap();
        prop_assert_eq!(a.len(), size);
        prop_assert_eq!(&a, &generate_dataset(&settings(seed, size, layout)).unwrap());
        let mut buf = Vec::new();
        write_dataset(&mut buf, &a).unwrap();
        prop_assert_eq!(read_dataset(&buf[..]).unwrap(), a);
        let mut again = Vec::new();
        write_dataset(&mut again, &read_dataset(&buf[..]).unwrap()).unwrap();
        prop_assert_eq!(again, buf);
    }
}

/// Gives each sample the images of the next sample of the same task.
fn shuffled(data: &[Sample]) -> Vec<(Sample, Sample)> {
    let mut by_kind: BTreeMap<TaskKind, Vec<&Sample>> = BTreeMap::new();
    for s in data {
        by_kind.entry(s.kind).or_default().push(s);
    }
    let mut out = Vec::new();
    for group in by_kind.values() {
        for (i, s) in group.iter().enumerate() {
            let donor = group[(i + 1) % group.len()];
            let mut t = (*s).clone();
            t.images = donor.images.clone();
            out.push(((*s).clone(), t));
        }
    }
    out
}

#[test]
fn gold_depends_on_the_images() {
    for layout in [PairLayout::Leading, PairLayout::Random] {
        let s = settings(5, 2000, layout);
        let data = generate_dataset(&s).unwrap();
        let (mut changed, mut counted) = (0usize, 0usize);
        for (orig, moved) in shuffled(&data) {
            if let Ok(g) = oracle_answer(&moved) {
                counted += 1;
                changed += usize::from(g != orig.gold);
            }
        }
        assert!(counted > 1000, "{counted}");
        let rate = changed as f64 / counted as f64;
        assert!(rate >= 1.0 - s.bias, "{layout:?}: gold changed for {rate:.3} of shuffled samples");
    }
}

#[test]
fn random_init_discards_under_sixty_percent() {
    let data = generate_dataset(&settings(9, 500, PairLayout::Leading)).unwrap();
    let model = Model::init(ModelConfig::default()).unwrap();
    let set = make_pairs(&model, &data, MaskPolicy::CROSS_ATTENTIVE).unwrap();
    assert_eq!(set.total, 500);
    assert!(set.discard_rate() < 0.6, "discard rate {}", set.discard_rate());
    for p in &set.pairs {
        assert_ne!(p.y_plus, p.y_minus);
    }
    let mut buf = Vec::new();
    write_pairs(&mut buf, &set.pairs).unwrap();
    assert_eq!(read_pairs(&buf[..]).unwrap(), set.pairs);
    let again = make_pairs(&model, &data, MaskPolicy::CROSS_ATTENTIVE).unwrap();
    assert_eq!(again, set);
}
