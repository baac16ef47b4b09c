use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossview_core::masks::{MaskKind, MaskPolicy};
use crossview_core::model::{Grid, Model, ModelConfig, Prompt};
use crossview_core::training::{dpo_loss, dpo_loss_grad, grad_check, total_loss, Example, Objective, TrainConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dpo_analytics(
        lp_p in -30.0f64..0.0,
        lp_m in -30.0f64..0.0,
        ref_p in -30.0f64..0.0,
        ref_m in -30.0f64..0.0,
        beta in 0.01f64..2.0,
        shift in -10.0f64..10.0,
    ) {
        let at_ref = dpo_loss(lp_p, lp_p, lp_m, lp_m, beta).unwrap();
        prop_assert!((at_ref - std::f64::consts::LN_2).abs() <= 1e-12);

        let (loss, d_plus, d_minus) = dpo_loss_grad(lp_p, ref_p, lp_m, ref_m, beta).unwrap();
        prop_assert!(d_plus < 0.0);
        prop_assert!(d_minus > 0.0);
        prop_assert!((d_plus + d_minus).abs() <= 1e-15);

        let shifted = dpo_loss(lp_p + shift, ref_p, lp_m + shift, ref_m, beta).unwrap();
        prop_assert!((shifted - loss).abs() <= 1e-12);
        let both = dpo_loss(lp_p + shift, ref_p + shift, lp_m, ref_m, beta).unwrap();
        prop_assert!((both - loss).abs() <= 1e-12);
        prop_assert_eq!(total_loss(loss, 1.5, 0.0), loss);
    }
}

fn reduced(seed: u64) -> Model {
    Model::init(ModelConfig {
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
    })
    .unwrap()
}

fn random_grid(rng: &mut ChaCha8Rng) -> Grid {
    Grid::new(2, (0..4).map(|_| rng.gen_range(0..3u8)).collect()).unwrap()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let policies = [
        MaskPolicy::CROSS_ATTENTIVE,
        MaskPolicy::Alternating { odd: MaskKind::CrossSelective },
        MaskKind::Truncated.into(),
    ];
    for (i, policy) in policies.into_iter().enumerate() {
        let model = reduced(i as u64);
        let reference = reduced(100 + i as u64);
        let ex = Example {
            prompt: Prompt::with_question(vec![random_grid(&mut rng), random_grid(&mut rng)], vec![5, 6]),
            plus: vec![rng.gen_range(3..16)],
            minus: vec![rng.gen_range(3..16)],
        };
        // 4 + 4 visual tokens, 2 question tokens, 1 answer token.
        assert!(model.sequence(&ex.prompt, &ex.plus).unwrap().len() <= 12);
        let cfg = TrainConfig { policy, objective: Objective::Preference, ..TrainConfig::default() };
        let refs = (
            reference.sequence_logprob(&ex.prompt, &ex.plus, policy).unwrap(),
            reference.sequence_logprob(&ex.prompt, &ex.minus, policy).unwrap(),
        );
        let r = grad_check(&model, &ex, refs, &cfg, None, 0, 1e-5).unwrap();
        assert_eq!(r.checked, model.params.num_values());
        assert!(r.max_relative_error < 1e-4, "{policy}: {} at {}", r.max_relative_error, r.worst_parameter);
    }
}

fn image_one_rows(model: &Model, second: Grid, policy: MaskPolicy) -> Vec<f64> {
    let first = Grid::new(3, vec![1, 0, 5, 0, 9, 0, 0, 0, 13]).unwrap();
    let prompt = Prompt::with_question(vec![first, second], vec![4, 8, 9, 3]);
    let logits = model.forward(&prompt, policy).unwrap();
    let tau = model.config.tokens_per_image();
    (0..tau).flat_map(|i| logits.row(i).to_vec()).collect()
}

#[test]
fn information_flow_trichotomy() {
    let model = Model::init(ModelConfig { rho: 1.0, seed: 4, ..ModelConfig::default() }).unwrap();
    let a = Grid::new(3, vec![0, 2, 0, 0, 0, 0, 7, 0, 0]).unwrap();
    let b = Grid::new(3, vec![16, 0, 0, 3, 0, 11, 0, 0, 4]).unwrap();
    let differs = |policy: MaskPolicy| {
        let x = image_one_rows(&model, a.clone(), policy);
        let y = image_one_rows(&model, b.clone(), policy);
        x.iter().zip(&y).any(|(p, q)| p.to_bits() != q.to_bits())
    };
    assert!(!differs(MaskKind::Truncated.into()), "truncated leaks image 2 into image 1");
    assert!(!differs(MaskKind::Causal.into()), "causal leaks image 2 into image 1");
    assert!(differs(MaskKind::CrossSelective.into()), "selective with rho=1 blocks image 2");
    assert!(differs(MaskPolicy::CROSS_ATTENTIVE));
}
