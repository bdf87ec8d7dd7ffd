mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use wlas::model::{attend, AttentionParams};
use wlas::NdArray;

fn random_params(g: &mut impl Rng, s: usize, d: usize, a: usize, scale: f64) -> AttentionParams {
    AttentionParams {
        w_dec: random_array(g, &[s, a], scale),
        v_enc: random_array(g, &[d, a], scale),
        w: random_array(g, &[a, 1], scale),
        b: random_array(g, &[1, a], scale),
    }
}

#[test]
fn weights_are_a_distribution_over_1000_calls() {
    let mut g = rng(2024);
    for call in 0..1000 {
        let (s, d, a, n) = (g.gen_range(1..6), g.gen_range(1..6), g.gen_range(1..5), g.gen_range(1..30));
        let scale = [0.1, 1.0, 5.0][call % 3];
        let p = random_params(&mut g, s, d, a, scale);
        let (alpha, ctx) = attend(&random_array(&mut g, &[1, s], 2.0), &random_array(&mut g, &[n, d], 2.0), &p).unwrap();
        assert_eq!(alpha.len(), n);
        assert_eq!(ctx.len(), d);
        let total: f64 = alpha.iter().sum();
        assert!((total - 1.0).abs() <= 1e-6, "call {call}: sum {total}");
        assert!(alpha.iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn zero_scoring_vector_gives_exactly_uniform_weights() {
    let mut g = rng(9);
    for n in [1, 2, 3, 7, 25] {
        let mut p = random_params(&mut g, 4, 3, 5, 1.0);
        p.w = NdArray::zeros(&[5, 1]);
        let (alpha, _) = attend(&random_array(&mut g, &[1, 4], 1.0), &random_array(&mut g, &[n, 3], 1.0), &p).unwrap();
        assert!(alpha.iter().all(|&x| x == 1.0 / n as f64), "{alpha:?}");
    }
}

#[test]
fn single_step_attends_fully() {
    let mut g = rng(1);
    let p = random_params(&mut g, 2, 3, 2, 1.0);
    let out = NdArray::row(vec![0.5, -1.0, 2.0]);
    let (alpha, ctx) = attend(&NdArray::row(vec![0.3, 0.1]), &out, &p).unwrap();
    assert_eq!(alpha, vec![1.0]);
    assert_eq!(ctx, out.data());
}

#[test]
fn context_matches_brute_force() {
    let mut g = rng(77);
    let (s, d, a) = (3, 2, 4);
    let p = random_params(&mut g, s, d, a, 1.0);
    let q = random_array(&mut g, &[1, s], 1.0);
    let o = random_array(&mut g, &[3, d], 1.0);
    let (alpha, ctx) = attend(&q, &o, &p).unwrap();

    let mut e = Vec::new();
    for i in 0..3 {
        let mut score = 0.0;
        for k in 0..a {
            let mut pre = p.b.data()[k];
            for j in 0..s {
                pre += q.data()[j] * p.w_dec.data()[j * a + k];
            }
            for j in 0..d {
                pre += o.data()[i * d + j] * p.v_enc.data()[j * a + k];
            }
            score += p.w.data()[k] * pre.tanh();
        }
        e.push(score);
    }
    let z: f64 = e.iter().map(|x| x.exp()).sum();
    for i in 0..3 {
        assert!((alpha[i] - e[i].exp() / z).abs() < 1e-12);
    }
    for j in 0..d {
        let c: f64 = (0..3).map(|i| alpha[i] * o.data()[i * d + j]).sum();
        assert!((ctx[j] - c).abs() < 1e-12);
    }
}

#[test]
fn empty_encoder_outputs_are_rejected() {
    let p = random_params(&mut rng(0), 2, 2, 2, 1.0);
    assert!(attend(&NdArray::row(vec![0.0, 0.0]), &NdArray::zeros(&[0, 2]), &p).is_err());
}

proptest! {
    #[test]
    fn weights_stay_normalized_for_extreme_scores(seed in any::<u64>(), scale in 0.01f64..50.0, n in 1usize..40) {
        let mut g = rng(seed);
        let p = random_params(&mut g, 3, 3, 3, scale);
        let (alpha, _) = attend(&random_array(&mut g, &[1, 3], scale), &random_array(&mut g, &[n, 3], scale), &p).unwrap();
        let total: f64 = alpha.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-6);
        prop_assert!(alpha.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
