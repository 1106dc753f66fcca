//! Randomized properties checked against independent reference code.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pat_core::evaluator::{distance_matrix, evaluate, Meta, Metric};
use pat_core::losses::{total_loss, triplet_loss_batch_hard, LossWeights};
use pat_core::model::{PatConfig, PatModel};
use pat_core::nn::AttentionParams;
use pat_core::trainer::{Adam, BETA1, BETA2, EPSILON};
use pat_core::{Graph, ParamStore, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn assert_stochastic_rows(data: &[f64], row: usize) {
    for (i, r) in data.chunks(row).enumerate() {
        let s: f64 = r.iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
        assert!(r.iter().all(|&v| v >= 0.0), "row {i} has a negative weight");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn attention_rows_are_distributions(
        seed in any::<u64>(),
        batch in 1usize..4,
        nq in 1usize..7,
        nk in 1usize..9,
        heads in 1usize..4,
        d_k in 1usize..5,
        scale in 0.1f64..20.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = heads * d_k;
        let mut store = ParamStore::<f64>::new();
        let attn = AttentionParams::new(&mut store, "a", d, heads, d_k, d_k, &mut rng);
        let mut g = Graph::new();
        let q = g.constant(random_tensor(&mut rng, &[batch, nq, d], scale));
        let kv = g.constant(random_tensor(&mut rng, &[batch, nk, d], scale));
        let out = attn.forward(&mut g, &store, q, kv, kv).unwrap();
        prop_assert_eq!(g.shape(out.weights), &[batch, heads, nq, nk][..]);
        assert_stochastic_rows(g.value(out.weights).data(), nk);
    }

    #[test]
    fn part_masks_are_distributions(
        seed in any::<u64>(),
        prototypes in 1usize..5,
        heads in 1usize..3,
        half_d in 2usize..5,
        positional in any::<bool>(),
        scale in 0.0f64..3.0,
    ) {
        let cfg = PatConfig {
            image_height: 16,
            image_width: 8,
            stem_channels: vec![4, 8],
            stem_strides: vec![2, 2],
            d_model: heads * half_d * 2,
            heads,
            d_ff: 8,
            enc_layers: 1,
            dec_layers: 1,
            prototypes,
            positional_embedding: positional,
            use_encoder: true,
            use_decoder: true,
        };
        let model = PatModel::<f64>::new(cfg, 3, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let img = Tensor::from_fn(&[16, 8, 3], |_| rng.gen_range(0.0..1.0) * scale);
        let masks = model.forward(&img).unwrap().masks.unwrap();
        prop_assert_eq!(masks.count(), prototypes);
        assert_stochastic_rows(masks.weights.data(), masks.h * masks.w);
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss by enumerating every (positive, negative) pair
/// of every anchor: the hinge is monotone in `d_ap - d_an`, so the largest
/// hinge over all pairs is the batch-hard one.
fn triplet_reference(x: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                worst = worst.max((margin + euclid(&x[a], &x[p]) - euclid(&x[a], &x[q])).max(0.0));
            }
        }
        total += worst;
    }
    total / n as f64
}

fn batch_labels() -> impl Strategy<Value = Vec<usize>> {
    // 2..=4 identities with 2..=3 samples each, at most 12 in total
    prop::collection::vec(2usize..4, 2..5).prop_flat_map(|counts| {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(id, &c)| std::iter::repeat(id).take(c)).collect();
        Just(labels).prop_shuffle()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn triplet_matches_exhaustive_enumeration(
        labels in batch_labels(),
        seed in any::<u64>(),
        d in 1usize..6,
        margin in 0.0f64..2.0,
    ) {
        prop_assume!(labels.len() <= 12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = labels.iter().map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut g = Graph::<f64>::new();
        let flat: Vec<f64> = x.concat();
        let v = g.constant(Tensor::new(&[labels.len(), d], flat).unwrap());
        let loss = triplet_loss_batch_hard(&mut g, v, &labels, margin).unwrap();
        let want = triplet_reference(&x, &labels, margin);
        prop_assert!((g.value(loss).item() - want).abs() < 1e-12, "{} vs {}", g.value(loss).item(), want);
    }
}

/// CMC and AP straight from the definitions, for tie-free distances.
fn retrieval_reference(dist: &[Vec<f64>], q: &[Meta], gal: &[Meta], max_rank: usize) -> (Vec<f64>, f64, usize) {
    let mut hits = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    for (qi, row) in dist.iter().enumerate() {
        let mut order: Vec<usize> = (0..gal.len())
            .filter(|&j| !(gal[j].identity == q[qi].identity && gal[j].camera == q[qi].camera))
            .collect();
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap());
        let relevant: Vec<bool> = order.iter().map(|&j| gal[j].identity == q[qi].identity).collect();
        let n_rel = relevant.iter().filter(|&&r| r).count();
        if n_rel == 0 {
            continue;
        }
        valid += 1;
        let first = relevant.iter().position(|&r| r).unwrap();
        for (k, h) in hits.iter_mut().enumerate() {
            if first <= k {
                *h += 1;
            }
        }
        let mut found = 0;
        let mut ap = 0.0;
        for (rank, &r) in relevant.iter().enumerate() {
            if r {
                found += 1;
                ap += found as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += ap / n_rel as f64;
    }
    let cmc = hits.iter().map(|&h| if valid == 0 { 0.0 } else { h as f64 / valid as f64 }).collect();
    (cmc, if valid == 0 { 0.0 } else { ap_sum / valid as f64 }, dist.len() - valid)
}

fn metas(rng: &mut ChaCha8Rng, n: usize) -> Vec<Meta> {
    (0..n)
        .map(|_| Meta {
            identity: rng.gen_range(0..4),
            camera: rng.gen_range(0..2),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn evaluate_matches_brute_force(seed in any::<u64>(), nq in 1usize..6, ng in 1usize..21, tie_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = metas(&mut rng, nq);
        let gal = metas(&mut rng, ng);
        // distinct values, so the order is fully determined
        let dist: Vec<Vec<f64>> = (0..nq)
            .map(|_| {
                let mut perm: Vec<usize> = (0..ng).collect();
                for i in (1..ng).rev() {
                    perm.swap(i, rng.gen_range(0..=i));
                }
                perm.iter().map(|&p| p as f64 / ng as f64).collect()
            })
            .collect();
        let max_rank = ng.min(10);
        let t = Tensor::new(&[nq, ng], dist.concat()).unwrap();
        let got = evaluate(&t, &q, &gal, max_rank, tie_seed).unwrap();
        let (cmc, map, dropped) = retrieval_reference(&dist, &q, &gal, max_rank);
        prop_assert_eq!(got.dropped.len(), dropped);
        prop_assert!(got.cmc.len() == cmc.len());
        for (a, b) in got.cmc.iter().zip(&cmc) {
            prop_assert!((a - b).abs() < 1e-12, "cmc {:?} vs {:?}", got.cmc, cmc);
        }
        prop_assert!((got.map - map).abs() < 1e-12, "map {} vs {}", got.map, map);
        prop_assert!(got.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(got.cmc.iter().chain([&got.map]).all(|&v| (0.0..=1.0).contains(&v)));

        // permuting the gallery changes nothing
        let mut perm: Vec<usize> = (0..ng).collect();
        for i in (1..ng).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pg: Vec<Meta> = perm.iter().map(|&j| gal[j]).collect();
        let pd: Vec<f64> = dist.iter().flat_map(|row| perm.iter().map(|&j| row[j]).collect::<Vec<_>>()).collect();
        let again = evaluate(&Tensor::new(&[nq, ng], pd).unwrap(), &q, &pg, max_rank, tie_seed ^ 7).unwrap();
        prop_assert_eq!(&again.cmc, &got.cmc);
        prop_assert!((again.map - got.map).abs() < 1e-12);
    }

    #[test]
    fn cosine_ranking_ignores_global_scale(seed in any::<u64>(), scale in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f32>> {
            (0..n).map(|_| (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect()
        };
        let (qe, ge) = (emb(&mut rng, 4), emb(&mut rng, 12));
        let (q, gal) = (metas(&mut rng, 4), metas(&mut rng, 12));
        let scaled = |e: &[Vec<f32>]| e.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect::<Vec<Vec<f32>>>();
        let d1 = distance_matrix(&qe, &ge, Metric::Cosine).unwrap();
        let d2 = distance_matrix(&scaled(&qe), &scaled(&ge), Metric::Cosine).unwrap();
        let r1 = evaluate(&d1, &q, &gal, 10, 3).unwrap();
        let r2 = evaluate(&d2, &q, &gal, 10, 3).unwrap();
        prop_assert_eq!(&r1.cmc, &r2.cmc);
        prop_assert!((r1.map - r2.map).abs() < 1e-9);
    }
}

#[test]
fn handcrafted_average_precision() {
    // matches at ranks 1 and 3 of 5: AP = (1/1 + 2/3) / 2
    let d = Tensor::from_f64(&[1, 5], &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
    let q = [Meta { identity: 0, camera: 0 }];
    let g: Vec<Meta> = [0, 1, 0, 2, 3].iter().map(|&identity| Meta { identity, camera: 1 }).collect();
    let r = evaluate(&d, &q, &g, 5, 0).unwrap();
    assert!((r.map - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(r.cmc, vec![1.0; 5]);
}

fn loss_model(use_decoder: bool, seed: u64) -> PatModel<f64> {
    let cfg = PatConfig {
        image_height: 16,
        image_width: 8,
        stem_channels: vec![4, 8],
        stem_strides: vec![2, 2],
        d_model: 8,
        heads: 2,
        d_ff: 8,
        enc_layers: 1,
        dec_layers: 1,
        prototypes: 3,
        positional_embedding: true,
        use_encoder: true,
        use_decoder,
    };
    PatModel::new(cfg, 3, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn total_loss_is_the_sum_of_its_terms(seed in any::<u64>(), use_decoder in any::<bool>(), use_diversity in any::<bool>()) {
        let model = loss_model(use_decoder, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[6, 16, 8, 3], |_| rng.gen_range(0.0..1.0)));
        let fv = model.forward_graph(&mut g, x).unwrap();
        let terms = total_loss(&mut g, &model.store, &fv, &[0, 0, 1, 1, 2, 2], &model.heads, &LossWeights::default(), use_diversity).unwrap();
        let val = |v| g.value(v).item();
        let mut sum = val(terms.encoder);
        if let Some(d) = terms.diversity {
            sum += val(d);
        }
        if let Some(d) = terms.discriminability {
            sum += val(d);
        }
        prop_assert_eq!(val(terms.total), sum);
        prop_assert_eq!(terms.diversity.is_some(), use_decoder && use_diversity);
        prop_assert_eq!(terms.discriminability.is_some(), use_decoder);
    }
}

#[test]
fn adam_matches_reference_update() {
    // f(x) = 0.5 (3 x0^2 + 0.2 x1^2)
    let curv = [3.0, 0.2];
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap(), true);
    let mut opt = Adam::new(1, 0.0);
    let (mut x, mut m, mut v) = ([1.0f64, -2.0], [0.0f64; 2], [0.0f64; 2]);
    let lr = 0.05;
    for t in 1..=10 {
        let g: Vec<f64> = store.get(id).data().iter().zip(curv).map(|(p, c)| c * p).collect();
        opt.step(&mut store, &[(id, &g)], lr).unwrap();
        for i in 0..2 {
            let gi = curv[i] * x[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = m[i] / (1.0 - BETA1.powi(t));
            let v_hat = v[i] / (1.0 - BETA2.powi(t));
            x[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        for (a, b) in store.get(id).data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-10, "step {t}: {a} vs {b}");
        }
    }
}
