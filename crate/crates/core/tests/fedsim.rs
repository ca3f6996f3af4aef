mod common;

use std::collections::BTreeSet;

use common::tiny_toy;
use fedpt::data::LabeledDataset;
use fedpt::fedsim::{
    client_seed, dirichlet_partition, dirichlet_sample, largest_remainder, metrics_csv, partition_with_proportions,
    run_federation, train_centralized, Algorithm, Federation, FederationConfig,
};
use fedpt::nn::{Layer, ModelSpec};
use fedpt::seed::rng_from;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn base_config(clients: usize, rounds: usize) -> FederationConfig {
    FederationConfig {
        clients,
        alpha: 0.5,
        rounds,
        local_epochs: 2,
        batch_size: 8,
        lr: 0.05,
        seed: 11,
        ..FederationConfig::default()
    }
}

fn cnn(data: &LabeledDataset) -> ModelSpec {
    ModelSpec::small_cnn(3, data.image_shape()[2], data.classes).unwrap()
}

fn check_partition(shards: &[fedpt::fedsim::ClientShard], n: usize) {
    let mut seen = BTreeSet::new();
    let mut total = 0;
    for s in shards {
        total += s.len();
        for &i in &s.indices {
            assert!(seen.insert(i), "item {i} assigned twice");
        }
    }
    assert_eq!(total, n);
    assert_eq!(seen.len(), n);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn partitions_are_disjoint_and_cover(clients in 1usize..20, log_alpha in -3.0f64..4.0, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..500).map(|i| (i * 7 + i / 3) % 10).collect();
        let shards = dirichlet_partition(&labels, 10, clients, 10f64.powf(log_alpha), &mut rng_from(seed)).unwrap();
        prop_assert_eq!(shards.len(), clients);
        check_partition(&shards, labels.len());
        for s in &shards {
            let mut hist = vec![0; 10];
            for &i in &s.indices {
                hist[labels[i]] += 1;
            }
            prop_assert_eq!(&hist, &s.class_counts);
            prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn largest_remainder_sums_and_bounds(raw in prop::collection::vec(0.0f64..1.0, 1..12), n in 0usize..1000) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 0.0);
        let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let counts = largest_remainder(&q, n);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, p) in counts.iter().zip(&q) {
            let exact = p * n as f64;
            prop_assert!((*c as f64) >= exact.floor() - 1e-9 && (*c as f64) <= exact.floor() + 1.0);
        }
    }
}

#[test]
fn forced_proportions_follow_largest_remainder() {
    // 10 items of class 0 and 7 of class 1.
    let labels: Vec<usize> = (0..17).map(|i| usize::from(i >= 10)).collect();
    let q = vec![vec![0.25, 0.25, 0.5], vec![0.26, 0.26, 0.48]];
    let shards = partition_with_proportions(&labels, 2, &q).unwrap();
    // Class 0: 2.5, 2.5, 5 → floors 2, 2, 5 and one leftover to the first tie.
    // Class 1: 1.82, 1.82, 3.36 → floors 1, 1, 3 and the leftover to the largest remainders.
    assert_eq!(shards[0].class_counts, vec![3, 2]);
    assert_eq!(shards[1].class_counts, vec![2, 2]);
    assert_eq!(shards[2].class_counts, vec![5, 3]);
    check_partition(&shards, 17);
}

#[test]
fn dirichlet_moments_match_theory() {
    let (alpha, m, draws) = (0.3, 4, 20_000);
    let mut rng = rng_from(5);
    let mut sum = vec![0.0; m];
    let mut sq = vec![0.0; m];
    for _ in 0..draws {
        let q = dirichlet_sample(alpha, m, &mut rng).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..m {
            sum[k] += q[k];
            sq[k] += q[k] * q[k];
        }
    }
    let mean = 1.0 / m as f64;
    let var = mean * (1.0 - mean) / (m as f64 * alpha + 1.0);
    let se = (var / draws as f64).sqrt();
    for k in 0..m {
        let mk = sum[k] / draws as f64;
        assert!((mk - mean).abs() < 4.0 * se, "coordinate {k}: mean {mk}");
        let vk = sq[k] / draws as f64 - mk * mk;
        assert!((vk - var).abs() / var < 0.05, "coordinate {k}: variance {vk} vs {var}");
    }
}

#[test]
fn single_client_equals_centralized_sgd() {
    let d = tiny_toy(1);
    let spec = cnn(&d.train);
    let init = spec.init(&mut rng_from(3));
    let cfg = FederationConfig {
        participation: 1.0,
        ..base_config(1, 5)
    };
    let fed = run_federation(&spec, &d.train, &d.test, init.clone(), &cfg).unwrap();
    let central = train_centralized(&spec, &d.train, init, &cfg).unwrap();
    assert_eq!(fed.weights, central);
}

#[test]
fn decomposition_identity_holds_every_round() {
    let d = tiny_toy(2);
    let spec = cnn(&d.train);
    let init = spec.init(&mut rng_from(4));
    let cfg = FederationConfig {
        alpha: 0.1,
        participation: 0.6,
        ..base_config(5, 4)
    };
    let out = run_federation(&spec, &d.train, &d.test, init, &cfg).unwrap();
    let mut prev = None;
    for m in &out.metrics {
        assert_eq!(m.acc_global_prev + m.delta_l + m.delta_g, m.acc_global);
        if let Some(p) = prev {
            assert_eq!(m.acc_global_prev, p);
        }
        prev = Some(m.acc_global);
        let total: usize = m.clients.iter().map(|c| c.size).sum();
        let recomputed = m.clients.iter().map(|c| c.size as f64 * c.accuracy).sum::<f64>() / total as f64;
        assert!((recomputed - m.acc_local_mean).abs() <= 1e-12);
        assert!(((recomputed - m.acc_global_prev) - m.delta_l).abs() <= 1e-12);
    }
    let first = out.metrics.first().unwrap().acc_global_prev;
    let last = out.metrics.last().unwrap().acc_global;
    let sum: f64 = out.metrics.iter().map(|m| m.delta_l + m.delta_g).sum();
    assert!((first + sum - last).abs() < 1e-12);
}

/// Softmax regression trained by hand on flat vectors.
struct Oracle {
    classes: usize,
    features: usize,
}

impl Oracle {
    fn grad(&self, w: &[f64], x: &[&[f64]], y: &[usize]) -> Vec<f64> {
        let (c, f) = (self.classes, self.features);
        let mut g = vec![0.0; w.len()];
        for (xi, &yi) in x.iter().zip(y) {
            let logits: Vec<f64> = (0..c)
                .map(|o| w[c * f + o] + (0..f).map(|i| w[o * f + i] * xi[i]).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for o in 0..c {
                let d = (e[o] / z - if o == yi { 1.0 } else { 0.0 }) / x.len() as f64;
                for i in 0..f {
                    g[o * f + i] += d * xi[i];
                }
                g[c * f + o] += d;
            }
        }
        g
    }
}

#[test]
fn three_clients_two_rounds_match_hand_stepped_oracle() {
    let d = tiny_toy(3);
    let side = d.train.image_shape()[2];
    let spec = ModelSpec::new(vec![3, side, side], vec![Layer::Dense { out: 3 }]).unwrap();
    let init = spec.init(&mut rng_from(9));
    let cfg = FederationConfig {
        participation: 1.0,
        lr: 0.1,
        ..base_config(3, 2)
    };
    let fed = Federation::new(&spec, &d.train, &d.test, cfg.clone()).unwrap();
    let out = fed.run(init.clone()).unwrap();

    let oracle = Oracle {
        classes: 3,
        features: 3 * side * side,
    };
    let n_total: usize = fed.shards.iter().map(|s| s.len()).sum();
    let mut global = init.flatten();
    for t in 1..=2 {
        let mut next = vec![0.0; global.len()];
        for (m, shard) in fed.shards.iter().enumerate() {
            if shard.is_empty() {
                continue;
            }
            let mut w = global.clone();
            let mut v = vec![0.0; w.len()];
            let mut rng = rng_from(client_seed(cfg.seed, t, m));
            let mut order = shard.indices.clone();
            for _ in 0..cfg.local_epochs {
                order.shuffle(&mut rng);
                for batch in order.chunks(cfg.batch_size) {
                    let x: Vec<&[f64]> = batch.iter().map(|&i| d.train.images.row(i)).collect();
                    let y: Vec<usize> = batch.iter().map(|&i| d.train.labels[i]).collect();
                    let g = oracle.grad(&w, &x, &y);
                    for k in 0..w.len() {
                        v[k] = cfg.momentum * v[k] + g[k] + cfg.weight_decay * w[k];
                        w[k] -= cfg.lr * v[k];
                    }
                }
            }
            let share = shard.len() as f64 / n_total as f64;
            for k in 0..w.len() {
                next[k] += share * w[k];
            }
        }
        global = next;
    }
    let got = out.weights.flatten();
    let err = got.iter().zip(&global).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "max deviation {err}");
}

#[test]
fn huge_proximal_weight_pins_clients_to_the_global_model() {
    let d = tiny_toy(4);
    let spec = cnn(&d.train);
    let init = spec.init(&mut rng_from(1));
    let cfg = FederationConfig {
        algorithm: Algorithm::FedProx { mu: 1e6 },
        ..base_config(3, 2)
    };
    let out = run_federation(&spec, &d.train, &d.test, init.clone(), &cfg).unwrap();
    assert!(out.weights.max_abs_diff(&init) < 1e-3);
}

#[test]
fn zero_proximal_weight_is_fedavg() {
    let d = tiny_toy(5);
    let spec = cnn(&d.train);
    let init = spec.init(&mut rng_from(2));
    let avg = run_federation(&spec, &d.train, &d.test, init.clone(), &base_config(3, 2)).unwrap();
    let prox_cfg = FederationConfig {
        algorithm: Algorithm::FedProx { mu: 0.0 },
        ..base_config(3, 2)
    };
    let prox = run_federation(&spec, &d.train, &d.test, init, &prox_cfg).unwrap();
    assert_eq!(avg.weights, prox.weights);
    assert_eq!(metrics_csv(&avg.metrics), metrics_csv(&prox.metrics));
}

#[test]
fn zero_local_epochs_keep_the_global_model() {
    let d = tiny_toy(6);
    let spec = cnn(&d.train);
    let init = spec.init(&mut rng_from(3));
    let cfg = FederationConfig {
        local_epochs: 0,
        ..base_config(4, 3)
    };
    let out = run_federation(&spec, &d.train, &d.test, init.clone(), &cfg).unwrap();
    assert_eq!(out.weights, init);
    for m in &out.metrics {
        assert_eq!(m.delta_g, 0.0);
        assert_eq!(m.delta_l, 0.0);
    }
}

#[test]
fn zero_rounds_return_the_initial_model() {
    let d = tiny_toy(7);
    let spec = cnn(&d.train);
    let init = spec.init(&mut rng_from(4));
    let out = run_federation(&spec, &d.train, &d.test, init.clone(), &base_config(4, 0)).unwrap();
    assert_eq!(out.weights, init);
    assert!(out.metrics.is_empty());
    assert_eq!(metrics_csv(&out.metrics).lines().count(), 1);
}

#[test]
fn reruns_produce_identical_metrics() {
    let d = tiny_toy(8);
    let spec = cnn(&d.train);
    let init = spec.init(&mut rng_from(5));
    let cfg = FederationConfig {
        participation: 0.5,
        ..base_config(4, 3)
    };
    let a = run_federation(&spec, &d.train, &d.test, init.clone(), &cfg).unwrap();
    let b = run_federation(&spec, &d.train, &d.test, init, &cfg).unwrap();
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.weights, b.weights);
}

#[test]
fn participation_sets_have_the_configured_size() {
    let d = tiny_toy(9);
    let spec = cnn(&d.train);
    for (p, k) in [(0.3, 3), (0.05, 1), (1.0, 10), (0.55, 6)] {
        let cfg = FederationConfig {
            participation: p,
            ..base_config(10, 1)
        };
        let fed = Federation::new(&spec, &d.train, &d.test, cfg).unwrap();
        for t in 1..=20 {
            let ids = fed.participants(t);
            assert_eq!(ids.len(), k);
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
            assert!(ids.iter().all(|&i| i < 10));
        }
    }
}

#[test]
fn different_seeds_change_the_partition() {
    let d = tiny_toy(10);
    let spec = cnn(&d.train);
    let a = Federation::new(&spec, &d.train, &d.test, base_config(4, 1)).unwrap();
    let b = Federation::new(
        &spec,
        &d.train,
        &d.test,
        FederationConfig {
            seed: 12,
            ..base_config(4, 1)
        },
    )
    .unwrap();
    let ids = |f: &Federation| f.shards.iter().map(|s| s.indices.clone()).collect::<Vec<_>>();
    assert_ne!(ids(&a), ids(&b));
}

/// Fraction of (class, client) counts inside ±15 % of the balanced share.
fn in_band(counts: impl Iterator<Item = usize>) -> (usize, usize) {
    counts.fold((0, 0), |(hit, n), c| {
        (hit + usize::from((85..=115).contains(&c)), n + 1)
    })
}

#[test]
fn near_iid_split_matches_a_monte_carlo_band_rate() {
    use rand_distr::{Distribution, Gamma};
    let (classes, clients, per_class, alpha) = (10, 10, 1000, 100.0);
    let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    let (mut hit, mut n) = (0, 0);
    for seed in 0..20 {
        let shards = dirichlet_partition(&labels, classes, clients, alpha, &mut rng_from(seed)).unwrap();
        let (h, k) = in_band(shards.iter().flat_map(|s| s.class_counts.iter().copied()));
        hit += h;
        n += k;
    }
    let rate = hit as f64 / n as f64;

    let gamma = Gamma::new(alpha, 1.0).unwrap();
    let mut rng = rng_from(999);
    let (mut ohit, mut on) = (0, 0);
    for _ in 0..5000 {
        let g: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let s: f64 = g.iter().sum();
        let q: Vec<f64> = g.iter().map(|v| v / s).collect();
        let (h, k) = in_band(largest_remainder(&q, per_class).into_iter());
        ohit += h;
        on += k;
    }
    let oracle = ohit as f64 / on as f64;
    let se = (rate * (1.0 - rate) / n as f64 + oracle * (1.0 - oracle) / on as f64).sqrt();
    assert!(
        (rate - oracle).abs() < 5.0 * se,
        "in-band rate {rate:.4} vs oracle {oracle:.4} (SE {se:.4})"
    );
    assert!(oracle > 0.8 && oracle < 0.95, "oracle rate {oracle}");
}
