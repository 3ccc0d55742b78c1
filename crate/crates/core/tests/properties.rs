mod common;

use common::{gaussian, max_abs_diff, model, permutation, rng, template};
use conan::attention::attend_token;
use conan::eval::{verification_metrics, MatchResult};
use conan::loss::{supcon, CrossBatchMemory};
use conan::numerics::{softmax, Axis};
use conan::pooling::{pool_with_context, softmax_weights};
use conan::summary::compute_stats;
use conan::{aggregate_template, Distribution, Tensor};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..=32, k in 1usize..=32, n in 1usize..=32, seed: u64) {
        let mut r = rng(seed);
        let a = Tensor::matrix(m, k, gaussian(&mut r, m * k)).unwrap();
        let b = Tensor::matrix(k, n, gaussian(&mut r, k * n)).unwrap();
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let (mut acc, mut mag) = (0.0, 0.0);
                for l in 0..k {
                    acc += a.get(i, l) * b.get(l, j);
                    mag += (a.get(i, l) * b.get(l, j)).abs();
                }
                prop_assert!((c.get(i, j) - acc).abs() <= 1e-12 * mag.max(1e-300));
            }
        }
    }

    #[test]
    fn softmax_is_positive_and_normalized(
        x in prop::collection::vec(-10.0f64..10.0, 1..40),
        t in 0.05f64..100.0,
    ) {
        let w = softmax(&Tensor::row(x).unwrap(), Axis::Rows, t).unwrap();
        prop_assert!(w.data().iter().all(|&v| v > 0.0));
        prop_assert!((w.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn statistics_ignore_row_order(n in 1usize..12, d in 1usize..6, seed: u64) {
        let mut r = rng(seed);
        let t = template(&mut r, d, n, Distribution::Gallery);
        let p = t.permuted(&permutation(&mut r, n));
        prop_assert_eq!(compute_stats(&t.matrix().unwrap()).unwrap(), compute_stats(&p.matrix().unwrap()).unwrap());
    }

    #[test]
    fn attention_token_ignores_row_order(n in 1usize..10, seed: u64) {
        let mut r = rng(seed);
        let m = model(8, 2, seed);
        let t = template(&mut r, 8, n, Distribution::Probe);
        let p = t.permuted(&permutation(&mut r, n));
        let (c, weights) = attend_token(&t.matrix().unwrap(), t.distribution, &m.attention).unwrap();
        let (cp, _) = attend_token(&p.matrix().unwrap(), p.distribution, &m.attention).unwrap();
        prop_assert!(max_abs_diff(&c, &cp) <= 1e-10);
        for a in &weights {
            for i in 0..a.rows() {
                prop_assert!((a.row_slice(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn token_depends_on_the_distribution(n in 1usize..6, seed: u64) {
        let mut r = rng(seed);
        let m = model(8, 4, seed);
        let x = template(&mut r, 8, n, Distribution::Probe).matrix().unwrap();
        let (cp, _) = attend_token(&x, Distribution::Probe, &m.attention).unwrap();
        let (cg, _) = attend_token(&x, Distribution::Gallery, &m.attention).unwrap();
        prop_assert!(max_abs_diff(&cp, &cg) > 0.0);
    }

    #[test]
    fn aggregation_is_permutation_equivariant(n in 1usize..10, seed: u64) {
        let mut r = rng(seed);
        let m = model(8, 4, seed);
        let dist = if seed % 2 == 0 { Distribution::Probe } else { Distribution::Gallery };
        let t = template(&mut r, 8, n, dist);
        let perm = permutation(&mut r, n);
        let a = aggregate_template(&m, &t).unwrap();
        let b = aggregate_template(&m, &t.permuted(&perm)).unwrap();
        prop_assert!(max_abs_diff(&a.pooled, &b.pooled) <= 1e-10);
        let moved: Vec<f64> = perm.iter().map(|&i| a.weights[i]).collect();
        prop_assert!(max_abs_diff(&moved, &b.weights) <= 1e-10);
    }

    #[test]
    fn colder_temperature_sharpens_weights(
        sims in prop::collection::btree_set(-1000i32..=1000, 2..12),
        hot in 0.5f64..5.0,
        ratio in 0.4f64..0.95,
    ) {
        // Distinct integers in thousandths keep the similarities untied.
        let sims: Vec<f64> = sims.into_iter().map(|s| s as f64 / 1000.0).collect();
        let a = softmax_weights(&sims, hot).unwrap();
        let b = softmax_weights(&sims, hot * ratio).unwrap();
        let max = |w: &[f64]| w.iter().copied().fold(f64::MIN, f64::max);
        let min = |w: &[f64]| w.iter().copied().fold(f64::MAX, f64::min);
        prop_assert!(max(&b) > max(&a));
        prop_assert!(min(&b) < min(&a));
    }

    #[test]
    fn weights_ignore_context_scale(n in 1usize..10, alpha in 1e-3f64..1e3, seed: u64) {
        let mut r = rng(seed);
        let x = template(&mut r, 6, n, Distribution::Gallery).matrix().unwrap();
        let c = gaussian(&mut r, 6);
        let scaled: Vec<f64> = c.iter().map(|v| v * alpha).collect();
        let a = pool_with_context(&x, &c, 0.067).unwrap();
        let b = pool_with_context(&x, &scaled, 0.067).unwrap();
        prop_assert!(max_abs_diff(&a.weights, &b.weights) <= 1e-12);
    }

    #[test]
    fn supcon_ignores_anchor_order(subjects in 2usize..5, memory in 0usize..6, seed: u64) {
        let mut r = rng(seed);
        let b = subjects * 2;
        let z = Tensor::matrix(b, 5, gaussian(&mut r, b * 5)).unwrap();
        let labels: Vec<String> = (0..b).map(|i| format!("s{}", i / 2)).collect();
        let mut mem = CrossBatchMemory::new(memory);
        for k in 0..memory {
            mem.push(gaussian(&mut r, 5), format!("s{}", k % (subjects + 1)));
        }
        let perm = permutation(&mut r, b);
        let zp = Tensor::from_rows(&perm.iter().map(|&i| z.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let lp: Vec<String> = perm.iter().map(|&i| labels[i].clone()).collect();
        let a = supcon(&z, &labels, &mem, 0.1).unwrap();
        let c = supcon(&zp, &lp, &mem, 0.1).unwrap();
        prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn verification_depends_only_on_score_order(
        scores in prop::collection::btree_set(-1000i32..=1000, 4..60),
        seed: u64,
    ) {
        let mut r = rng(seed);
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 1000.0).collect();
        let mut mated: Vec<bool> = scores.iter().map(|_| rand::Rng::random_bool(&mut r, 0.3)).collect();
        mated[0] = true;
        mated[1] = false;
        let fars = [0.5, 0.1, 0.01];
        let raw = verification_metrics(&scores, &mated, &fars).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + s).collect();
        prop_assert_eq!(raw, verification_metrics(&warped, &mated, &fars).unwrap());
    }

    #[test]
    fn match_scores_are_symmetric(seed: u64) {
        let mut r = rng(seed);
        let a = template(&mut r, 6, 2, Distribution::Probe);
        let b = template(&mut r, 6, 3, Distribution::Gallery);
        let (va, vb) = (gaussian(&mut r, 6), gaussian(&mut r, 6));
        let ab = MatchResult::from_aggregates(&[&a], std::slice::from_ref(&va), std::slice::from_ref(&b), std::slice::from_ref(&vb)).unwrap();
        let ba = MatchResult::from_aggregates(&[&b], &[vb], &[a], &[va]).unwrap();
        prop_assert!((ab.scores[0][0] - ba.scores[0][0]).abs() <= 1e-12);
    }
}

/// Weights at the default temperature against 50-digit values from
/// `tests/scripts/softmax_reference.py`.
#[test]
fn default_temperature_weights_match_high_precision_reference() {
    let cases: [(&[f64], &[f64]); 3] = [
        (
            &[0.31, -0.12, 0.05, 0.29, -0.4],
            &[
                0.566_822_635_941_504_6,
                0.000_925_090_226_226_823,
                0.011_698_368_977_762_089,
                0.420_539_739_675_123_6,
                0.000_014_165_179_382_842_126,
            ],
        ),
        (
            &[0.9, 0.899, -0.95, 0.0],
            &[
                0.503_730_901_975_395_3,
                0.496_268_359_453_313_05,
                5.134_347_839_332_574e-13,
                7.385_707_782_244_469e-7,
            ],
        ),
        (
            &[-0.2, -0.2, 0.7],
            &[
                1.466_196_752_170_605_7e-6,
                1.466_196_752_170_605_7e-6,
                0.999_997_067_606_495_6,
            ],
        ),
    ];
    for (sims, want) in cases {
        let got = softmax_weights(sims, 0.067).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-12 * w, "{sims:?}: {g:e} vs {w:e}");
        }
    }
}
