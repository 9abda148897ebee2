use dval_core::alignment::{cosine_scores, dual_view_scores, topk_mean, AlignmentConfig};
use dval_core::losses::{db_loss, ClassStats, CountPolicy, DbLossParams, Group};
use dval_core::metrics::{average_precision, evaluate};
use dval_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn positive_weights_for_ten_five_one() {
    let s = ClassStats::<f64>::from_counts(&[10, 5, 1], 10, &DbLossParams::default(), CountPolicy::Clamp).unwrap();
    assert_eq!(s.pos_weight, vec![1.0, 0.5, 0.1]);
}

#[test]
fn bias_vanishes_at_half_frequency() {
    let s = ClassStats::<f64>::from_counts(&[50, 10], 100, &DbLossParams::default(), CountPolicy::Strict).unwrap();
    assert_eq!(s.upsilon[0], 0.0);
    assert!(s.upsilon[1] > 0.0);
}

#[test]
fn grouping_thresholds() {
    let s = ClassStats::<f64>::from_counts(&[200, 50, 5], 300, &DbLossParams::default(), CountPolicy::Strict).unwrap();
    assert_eq!(s.groups, vec![Group::Head, Group::Medium, Group::Tail]);
    assert_eq!(Group::from_count(101), Group::Head);
    assert_eq!(Group::from_count(100), Group::Medium);
    assert_eq!(Group::from_count(20), Group::Medium);
    assert_eq!(Group::from_count(19), Group::Tail);
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

struct Views {
    tg: Tensor<f64>,
    tl: Tensor<f64>,
    ig: Tensor<f64>,
    il: Tensor<f64>,
}

fn views(seed: u64, b: usize, c: usize, n: usize, d: usize) -> Views {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Views {
        tg: gaussian(&mut rng, &[c, d]),
        tl: gaussian(&mut rng, &[c, d]),
        ig: gaussian(&mut rng, &[b, d]),
        il: gaussian(&mut rng, &[b, n, d]),
    }
}

fn fused(v: &Views, alpha: f64, k: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let tape = Tape::<f64>::new();
    let cfg = AlignmentConfig {
        alpha,
        k,
        logit_scale: 10.0,
    };
    let s = dual_view_scores(
        tape.constant(&v.tg),
        tape.constant(&v.tl),
        tape.constant(&v.ig),
        tape.constant(&v.il),
        &cfg,
    )
    .unwrap();
    (s.s_fused.value(), s.s_global.value(), s.s_local.value())
}

#[test]
fn degenerate_fusion_is_bitwise() {
    for seed in 0..10 {
        let (b, c, n, d) = (3, 4, 9, 5);
        let v = views(seed, b, c, n, d);

        let (f, g, _) = fused(&v, 1.0, 3);
        assert!(f.bit_eq(&g));
        // Global view alone, computed without the local branch.
        let tape = Tape::<f64>::new();
        let (g2, _) = cosine_scores(tape.constant(&v.tg), tape.constant(&v.ig), tape.constant(&v.il)).unwrap();
        assert!(f.bit_eq(&g2.value()));

        let (f0, _, local) = fused(&v, 0.0, 3);
        let tape = Tape::<f64>::new();
        assert!(f0.bit_eq(&topk_mean(tape.constant(&local), 3).unwrap().value()));

        let (f1, _, local) = fused(&v, 0.0, 1);
        let max: Vec<f64> = local
            .data()
            .chunks(n)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        assert!(f1.bit_eq(&Tensor::new([b, c], max).unwrap()));

        let (fn_, _, local) = fused(&v, 0.0, n);
        let mean: Vec<f64> = local.data().chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
        assert!(fn_.bit_eq(&Tensor::new([b, c], mean).unwrap()));
    }
}

#[test]
fn ap_invariant_under_monotone_transforms() {
    let transforms: [fn(f64) -> f64; 5] = [
        |x| 10.0 * x,
        |x| 2.0 * x + 3.0,
        f64::exp,
        |x| x * x * x + x,
        f64::atan,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let n = rng.random_range(2..40);
        // Coarse grid so ties are present and survive every transform.
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-32..32) as f64 / 16.0).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let base = average_precision(&s, &y).unwrap();
        for f in transforms {
            let t: Vec<f64> = s.iter().map(|&x| f(x)).collect();
            assert_eq!(average_precision(&t, &y).unwrap(), base);
        }
    }
}

#[test]
fn evaluation_summary_from_known_aps() {
    // Rows are images. Class 0 ranks its positive first (AP 1); class 1 second (AP 0.5).
    let scores = Tensor::<f64>::from_f64([2, 2], &[0.9, 0.2, 0.1, 0.8]).unwrap();
    let labels = [true, true, false, false];
    let r = evaluate(&scores, &labels, &[150, 5]).unwrap();
    assert_eq!(r.ap, vec![Some(1.0), Some(0.5)]);
    assert_eq!(r.map_total, 0.75);
    assert_eq!(r.ap_variance, 625.0);
    assert_eq!(r.map_head, Some(1.0));
    assert_eq!(r.map_medium, None);
    assert_eq!(r.map_tail, Some(0.5));
}

proptest! {
    #[test]
    fn ap_lies_in_unit_interval(s in prop::collection::vec(-5.0f64..5.0, 1..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<bool> = s.iter().map(|_| rng.random_bool(0.5)).collect();
        if let Some(ap) = average_precision(&s, &y).unwrap() {
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }
    }

    #[test]
    fn topk_mean_between_mean_and_max(row in prop::collection::vec(-5.0f64..5.0, 1..20), kk in 1usize..20) {
        let n = row.len();
        let k = kk.min(n);
        let tape = Tape::<f64>::new();
        let got = topk_mean(tape.constant_from([1, n], row.clone()).unwrap(), k).unwrap().item();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = row.iter().sum::<f64>() / n as f64;
        prop_assert!(got <= max + 1e-12 && got >= mean - 1e-12);
    }

    #[test]
    fn db_loss_is_nonnegative_and_weights_bounded(
        counts in prop::collection::vec(1usize..300, 1..6),
        s in prop::collection::vec(-10.0f64..10.0, 6),
        mask in any::<u8>(),
    ) {
        let c = counts.len();
        let n = 301;
        let stats = ClassStats::<f64>::from_counts(&counts, n, &DbLossParams::default(), CountPolicy::Strict).unwrap();
        let max = stats.pos_weight.iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(max, 1.0);
        prop_assert!(stats.r.iter().all(|&r| r > 0.0));
        let y: Vec<bool> = (0..c).map(|i| mask >> i & 1 == 1).collect();
        let tape = Tape::<f64>::new();
        let v = tape.constant_from([1, c], s[..c].to_vec()).unwrap();
        let l = db_loss(v, &y, &stats, &DbLossParams::default(), true).unwrap().item();
        prop_assert!(l.is_finite() && l >= 0.0);
    }
}
