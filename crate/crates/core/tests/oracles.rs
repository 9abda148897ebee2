//! Independent loop implementations checked against the tape versions.

use dval_core::alignment::topk_mean;
use dval_core::losses::{db_loss, loss_kd, loss_sc, ClassStats, CountPolicy, DbLossParams};
use dval_core::metrics::average_precision;
use dval_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;
const INSTANCES: usize = 50;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn softplus(x: f64) -> f64 {
    x.exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct evaluation of the balanced loss with weights derived from raw counts.
fn db_oracle(s: &[f64], y: &[bool], b: usize, counts: &[usize], n: usize, p: &DbLossParams, pw: bool) -> f64 {
    let c = counts.len();
    let inv: Vec<f64> = counts.iter().map(|&k| 1.0 / k as f64).collect();
    let inv_sum: f64 = inv.iter().sum();
    let max = *counts.iter().max().unwrap() as f64;
    let mut total = 0.0;
    for row in 0..b {
        let mut acc = 0.0;
        for i in 0..c {
            let r = p.tau + sigmoid(p.beta * (inv[i] / inv_sum - p.mu));
            let v = p.kappa * (1.0 / (counts[i] as f64 / n as f64) - 1.0).ln();
            let w = if pw { counts[i] as f64 / max } else { 1.0 };
            let z = s[row * c + i] - v;
            let term = if y[row * c + i] {
                softplus(-w * z)
            } else {
                softplus(p.lambda * z) / p.lambda
            };
            acc += r * term;
        }
        total += acc / c as f64;
    }
    total / b as f64
}

#[test]
fn db_loss_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..INSTANCES {
        let (b, c) = (rng.random_range(1..=4), rng.random_range(1..=6));
        let n = rng.random_range(10..500);
        let counts: Vec<usize> = (0..c).map(|_| rng.random_range(1..n)).collect();
        let p = DbLossParams {
            tau: rng.random_range(0.0..0.5),
            beta: rng.random_range(1.0..20.0),
            mu: rng.random_range(0.0..1.0),
            kappa: rng.random_range(0.0..0.5),
            lambda: rng.random_range(0.5..8.0),
        };
        let s = uniform(&mut rng, b * c, -10.0, 10.0);
        let y: Vec<bool> = (0..b * c).map(|_| rng.random_bool(0.5)).collect();
        let stats = ClassStats::<f64>::from_counts(&counts, n, &p, CountPolicy::Strict).unwrap();
        for pw in [false, true] {
            let tape = Tape::<f64>::new();
            let v = tape.constant_from([b, c], s.clone()).unwrap();
            let got = db_loss(v, &y, &stats, &p, pw).unwrap().item();
            let want = db_oracle(&s, &y, b, &counts, n, &p, pw);
            assert!((got - want).abs() <= TOL, "trial {trial} pw {pw}: {got} vs {want}");
        }
    }
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn kd_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..INSTANCES {
        let (b, d) = (rng.random_range(1..=4), rng.random_range(1..=16));
        let s = uniform(&mut rng, b * d, -3.0, 3.0);
        let t = uniform(&mut rng, b * d, -3.0, 3.0);
        // Per-sample mean, then batch mean.
        let want = (0..b)
            .map(|i| mean_abs(&s[i * d..(i + 1) * d], &t[i * d..(i + 1) * d]))
            .sum::<f64>()
            / b as f64;
        let tape = Tape::<f64>::new();
        let got = loss_kd(
            tape.constant_from([b, d], s).unwrap(),
            tape.constant_from([b, d], t).unwrap(),
        )
        .unwrap()
        .item();
        assert!((got - want).abs() <= TOL);
    }
}

#[test]
fn sc_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let (c, d) = (rng.random_range(1..=6), rng.random_range(1..=16));
        let h = uniform(&mut rng, c * d, -2.0, 2.0);
        let g = uniform(&mut rng, c * d, -2.0, 2.0);
        let mut want = 0.0;
        for i in 0..c * d {
            want += (g[i] - h[i]).abs();
        }
        want /= (c * d) as f64;
        let tape = Tape::<f64>::new();
        let got = loss_sc(
            tape.constant_from([c, d], h).unwrap(),
            tape.constant_from([c, d], g).unwrap(),
        )
        .unwrap()
        .item();
        assert!((got - want).abs() <= TOL);
    }
}

#[test]
fn topk_mean_matches_sorting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..INSTANCES {
        let (b, c, n) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=16));
        let k = rng.random_range(1..=n);
        // Coarse values so ties occur.
        let x: Vec<f64> = (0..b * c * n).map(|_| rng.random_range(0..6) as f64 * 0.25).collect();
        let tape = Tape::<f64>::new();
        let got = topk_mean(tape.constant_from([b, c, n], x.clone()).unwrap(), k)
            .unwrap()
            .value();
        assert_eq!(got.shape(), &[b, c]);
        for (r, row) in x.chunks(n).enumerate() {
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let want = sorted[..k].iter().sum::<f64>() / k as f64;
            assert!((got.data()[r] - want).abs() <= TOL);
        }
    }
}

/// Precision at each positive's rank, with ranks computed by pairwise counting.
fn ap_oracle(s: &[f64], y: &[bool]) -> Option<f64> {
    let n = s.len();
    let ahead = |i: usize, j: usize| s[j] > s[i] || (s[j] == s[i] && j < i);
    let positives: Vec<usize> = (0..n).filter(|&i| y[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &p in &positives {
        let rank = 1 + (0..n).filter(|&j| ahead(p, j)).count();
        let hits = 1 + positives.iter().filter(|&&q| ahead(p, q)).count();
        sum += hits as f64 / rank as f64;
    }
    Some(sum / positives.len() as f64)
}

#[test]
fn average_precision_matches_rank_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=8);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let got = average_precision(&s, &y).unwrap();
        match (got, ap_oracle(&s, &y)) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= TOL),
            (None, None) => {}
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn average_precision_enumerates_all_small_labelings() {
    // Every labeling of a fixed 6-element ranking.
    let s = [0.9, 0.1, 0.5, 0.5, 0.7, 0.3];
    for mask in 0u32..64 {
        let y: Vec<bool> = (0..6).map(|i| mask >> i & 1 == 1).collect();
        let got = average_precision(&s, &y).unwrap();
        assert_eq!(got.is_some(), mask != 0);
        if let (Some(a), Some(b)) = (got, ap_oracle(&s, &y)) {
            assert!((a - b).abs() <= TOL);
        }
    }
    let t = Tensor::<f64>::from_f64([2], &[1.0, 0.0]).unwrap();
    assert_eq!(average_precision(t.data(), &[false, true]).unwrap(), Some(0.5));
}
