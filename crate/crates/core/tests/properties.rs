use prefalign::adapter::{adapt, encode_feedback, AdaptiveBlockParams, FeedbackEncoderParams};
use prefalign::clinician::select_proposal;
use prefalign::mask::{BinaryMask, Rle, SoftMask};
use prefalign::mixture::{GaussianMixture, GmmDelta};
use prefalign::phantom::fuse_annotations;
use prefalign::proposals::{build_proposals, FeedbackSignal, Label};
use proptest::prelude::*;

fn mixture(m: usize, d: usize) -> impl Strategy<Value = GaussianMixture> {
    (
        prop::collection::vec(-5.0..5.0f64, m * d),
        prop::collection::vec(1e-3..10.0f64, m * d),
        prop::collection::vec(0.01..1.0f64, m),
    )
        .prop_map(move |(mu, var, raw)| {
            let total: f64 = raw.iter().sum();
            GaussianMixture::new(
                mu.chunks(d).map(<[f64]>::to_vec).collect(),
                var.chunks(d).map(<[f64]>::to_vec).collect(),
                raw.iter().map(|w| w / total).collect(),
            )
            .unwrap()
        })
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| BinaryMask::new(h, w, bits).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn apply_delta_keeps_invariants(
        gmm in mixture(4, 3),
        flat in prop::collection::vec(-300.0..300.0f64, GmmDelta::flat_len(4, 3)),
        step in 1e-3..2.0f64,
    ) {
        let delta = GmmDelta::from_flat(4, 3, &flat).unwrap();
        let next = gmm.apply_delta(&delta, step, 1e-6).unwrap();
        next.check_invariants(1e-6).unwrap();
    }

    #[test]
    fn responsibilities_ignore_a_common_shift(gmm in mixture(5, 2), z in prop::collection::vec(-8.0..8.0f64, 2), c in -50.0..50.0f64) {
        let r = gmm.responsibilities(&z).unwrap();
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let shifted: Vec<f64> = gmm.component_log_joint(&z).unwrap().iter().map(|v| v + c).collect();
        let again = prefalign::mixture::softmax(&shifted);
        for (a, b) in r.iter().zip(&again) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rle_round_trips(m in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| mask(h, w))) {
        let rle = Rle::encode(&m);
        prop_assert_eq!(rle.decode().unwrap(), m.clone());
        let json = serde_json::to_string(&rle).unwrap();
        prop_assert_eq!(serde_json::from_str::<Rle>(&json).unwrap(), rle);
    }

    #[test]
    fn fusion_is_permutation_invariant(masks in prop::collection::vec(mask(4, 5), 1..6), rot in 0usize..6) {
        let mut rotated = masks.clone();
        let k = rot % masks.len();
        rotated.rotate_left(k);
        prop_assert_eq!(fuse_annotations(&masks, None).unwrap(), fuse_annotations(&rotated, None).unwrap());
        let copies = vec![masks[0].clone(); 1 + rot];
        prop_assert_eq!(fuse_annotations(&copies, None).unwrap(), masks[0].clone());
    }

    #[test]
    fn proposal_diffs_and_partitions(
        data in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 12), 4..10),
        app in mask(3, 4),
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let candidates: Vec<SoftMask> = data.into_iter().map(|d| SoftMask::new(3, 4, d).unwrap()).collect();
        let proposals = build_proposals(&candidates, &app, k, seed).unwrap();
        prop_assert_eq!(proposals.len(), k);
        prop_assert_eq!(proposals.iter().map(|p| p.member_count).sum::<usize>(), candidates.len());
        for p in &proposals {
            for r in 0..3 {
                for c in 0..4 {
                    let expected = p.representative_binary.get(r, c) as i8 - app.get(r, c) as i8;
                    prop_assert_eq!(p.diff.get(r, c), expected);
                }
            }
        }
        prop_assert_eq!(build_proposals(&candidates, &app, k, seed).unwrap(), proposals);
    }

    #[test]
    fn selection_ignores_proposal_order(
        data in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 12), 6..10),
        gt in mask(3, 4),
        seed in any::<u64>(),
    ) {
        let candidates: Vec<SoftMask> = data.into_iter().map(|d| SoftMask::new(3, 4, d).unwrap()).collect();
        let proposals = build_proposals(&candidates, &BinaryMask::filled(3, 4, false), 3, seed).unwrap();
        let chosen = select_proposal(&proposals, &gt).unwrap();
        let mut reversed = proposals.clone();
        reversed.reverse();
        prop_assert_eq!(select_proposal(&reversed, &gt).unwrap(), chosen);
        let best = proposals.iter().map(|p| prefalign::metrics::dice(&p.representative_binary, &gt).unwrap()).fold(f64::MIN, f64::max);
        prop_assert_eq!(prefalign::metrics::dice(&proposals[chosen].representative_binary, &gt).unwrap(), best);
    }

    #[test]
    fn adaptation_composes_safely(
        gmm in mixture(3, 2),
        seed in any::<u64>(),
        scale in 0.01..5.0f64,
        point in (0usize..16, 0usize..16),
        fg in any::<bool>(),
    ) {
        let encoder = FeedbackEncoderParams::random(4, 8, seed);
        let blocks = AdaptiveBlockParams::random(3, 2, 4, 8, seed ^ 1, scale);
        let e = encode_feedback(&FeedbackSignal { point, label: Label::from_bool(fg) }, 16, 16, &encoder).unwrap();
        let delta = adapt(&gmm, &e, &blocks).unwrap();
        prop_assert_eq!(delta.components(), 3);
        prop_assert_eq!(delta.dim(), 2);
        let next = gmm.apply_delta(&delta, 0.1, 1e-6).unwrap();
        next.check_invariants(1e-6).unwrap();
        prop_assert_eq!(adapt(&gmm, &e, &blocks).unwrap(), delta);
    }
}

#[test]
fn distinct_points_give_distinct_embeddings() {
    for seed in 0..100 {
        let encoder = FeedbackEncoderParams::random(16, 32, seed);
        let a = encode_feedback(&FeedbackSignal { point: (3, 5), label: Label::Foreground }, 64, 64, &encoder).unwrap();
        let b = encode_feedback(&FeedbackSignal { point: (40, 21), label: Label::Foreground }, 64, 64, &encoder).unwrap();
        assert_ne!(a, b, "seed {seed}");
    }
}
