use proptest::prelude::*;

use trl_core::autodiff::{Tape, Tensor, Var};
use trl_core::metalearn::{build_objective, MetaConfig, MetaLearner};
use trl_core::relation::{build_matrix, export_normalized, RelationMatrix};
use trl_core::tasks::{Strategy as Sampler, TaskBatch, TaskFamily, TaskGenerator};

fn plain_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn matrix_of(omega: &[Vec<f64>], zs: &[Vec<f64>]) -> RelationMatrix {
    let tape = Tape::new();
    let omega: Vec<Var> = omega.iter().map(|w| tape.var(Tensor::vector(w.clone()))).collect();
    let reps: Vec<Var> = zs.iter().map(|z| tape.var(Tensor::vector(z.clone()))).collect();
    build_matrix(&omega, &reps).unwrap().values()
}

/// `n` representations of width `d` and `k` similarity heads.
fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (2usize..6, 1usize..5, 2usize..8).prop_flat_map(|(n, k, d)| {
        let z = proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, d), n);
        let w = proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, d), k);
        (z, w)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matrix_is_symmetric_and_bounded((zs, omega) in batch_strategy()) {
        let m = matrix_of(&omega, &zs);
        prop_assert!(m.is_symmetric());
        for row in &m.m {
            for &v in row {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn unit_masks_reduce_to_cosine((zs, omega) in batch_strategy()) {
        let ones = vec![vec![1.0; zs[0].len()]; omega.len()];
        let m = matrix_of(&ones, &zs);
        for i in 0..zs.len() {
            for j in 0..zs.len() {
                if i != j {
                    prop_assert!((m.m[i][j] - plain_cosine(&zs[i], &zs[j])).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn scaling_a_representation_changes_nothing((zs, omega) in batch_strategy(), c in 0.01f64..100.0) {
        let base = matrix_of(&omega, &zs);
        let mut scaled = zs.clone();
        for v in &mut scaled[0] {
            *v *= c;
        }
        let m = matrix_of(&omega, &scaled);
        for i in 0..zs.len() {
            for j in 0..zs.len() {
                prop_assert!((m.m[i][j] - base.m[i][j]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn exported_rows_sum_to_one((zs, omega) in batch_strategy()) {
        let m = matrix_of(&omega, &zs);
        for row in export_normalized(&m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&w| w >= 0.0));
        }
    }
}

// Straight-line reference for the consistency term.

struct Layer {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

fn layer_from(w: &Tensor, b: &Tensor) -> Layer {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![vec![0.0; cols]; rows];
    for r in 0..rows {
        for c in 0..cols {
            out[r][c] = w.data()[r * cols + c];
        }
    }
    Layer {
        w: out,
        b: b.data().to_vec(),
    }
}

fn affine(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let mut y = layer.b.clone();
    for (r, xr) in x.iter().enumerate() {
        for c in 0..y.len() {
            y[c] += xr * layer.w[r][c];
        }
    }
    y
}

fn features(extractor: &[Layer], x: f64) -> Vec<f64> {
    let mut h = vec![x];
    for layer in extractor {
        h = affine(layer, &h).into_iter().map(f64::tanh).collect();
    }
    h
}

fn masked_cosine(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..w.len() {
        let u = w[k] * a[k];
        let v = w[k] * b[k];
        dot += u * v;
        na += u * u;
        nb += v * v;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn reference_consistency(
    base: &[Layer],
    omega: &[Vec<f64>],
    support_xs: &[Vec<f64>],
    adapted: &[(Vec<Layer>, Layer)],
    query: &[(f64, f64)],
    task: usize,
) -> f64 {
    let n = adapted.len();
    let mut z = Vec::new();
    for xs in support_xs {
        let mut mean = vec![0.0; base.last().unwrap().b.len()];
        for &x in xs {
            for (m, f) in mean.iter_mut().zip(features(base, x)) {
                *m += f;
            }
        }
        for m in &mut mean {
            *m /= xs.len() as f64;
        }
        z.push(mean);
    }
    let mut weights = Vec::new();
    for p in 0..n {
        if p == task {
            continue;
        }
        let mut m = 0.0;
        for w in omega {
            m += masked_cosine(w, &z[task], &z[p]);
        }
        m /= omega.len() as f64;
        weights.push((p, if m > 0.0 { m } else { 0.0 } + 1e-6));
    }
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut loss = 0.0;
    for &(x, y) in query {
        let mut mix = 0.0;
        for &(p, w) in &weights {
            let (ext, head) = &adapted[p];
            mix += w / total * affine(head, &features(ext, x))[0];
        }
        loss += (mix - y) * (mix - y);
    }
    loss / query.len() as f64
}

#[test]
fn consistency_loss_matches_reference() {
    let mut cases = 0;
    for n in 2..=4usize {
        for seed in 0..67u64 {
            let config = MetaConfig {
                layer_sizes: vec![1, 6, 5],
                n_tasks: n,
                similarity_heads: 3,
                alpha: 0.1,
                seed,
                ..MetaConfig::default()
            };
            let mut learner = MetaLearner::new(config.clone()).unwrap();
            for (k, w) in learner.similarity.omega.iter_mut().enumerate() {
                for (e, v) in w.data_mut().iter_mut().enumerate() {
                    *v = ((seed as f64 + 1.0) * (k as f64 + 0.3) * (e as f64 + 0.7)).sin();
                }
            }
            let family = if seed % 2 == 0 { TaskFamily::Sinusoid } else { TaskFamily::Harmonic };
            let gen = TaskGenerator {
                family,
                n_support: 6,
                n_query: 5,
                noise_sd: 0.3,
            };
            let tasks = (0..n as u64).map(|k| gen.generate(seed * 31 + k).unwrap()).collect();
            let batch = TaskBatch::with_metadata(tasks, &Sampler::Scored, Some(4), seed).unwrap();

            let tape = Tape::new();
            let bound = learner.model.bind(&tape);
            let omega = learner.similarity.bind(&tape);
            let obj = build_objective(&tape, &bound, &omega, &batch, &config).unwrap();

            let base: Vec<Layer> = learner
                .model
                .extractor
                .iter()
                .map(|l| layer_from(&l.weight, &l.bias))
                .collect();
            let omega_raw: Vec<Vec<f64>> = learner.similarity.omega.iter().map(|w| w.data().to_vec()).collect();
            let support_xs: Vec<Vec<f64>> = batch
                .metadata
                .iter()
                .map(|md| md.support.iter().map(|p| p.x).collect())
                .collect();
            let adapted: Vec<(Vec<Layer>, Layer)> = obj
                .adapted
                .iter()
                .map(|a| {
                    let ext = a
                        .extractor
                        .iter()
                        .map(|l| layer_from(&l.weight.value(), &l.bias.value()))
                        .collect();
                    (ext, layer_from(&a.head.weight.value(), &a.head.bias.value()))
                })
                .collect();
            for (i, md) in batch.metadata.iter().enumerate() {
                let query: Vec<(f64, f64)> = md.query.iter().map(|p| (p.x, p.y)).collect();
                let expect = reference_consistency(&base, &omega_raw, &support_xs, &adapted, &query, i);
                let got = obj.consistency_losses[i].value().data()[0];
                assert!(
                    (got - expect).abs() <= 1e-10,
                    "n={n} seed={seed} task={i}: {got} vs {expect}"
                );
            }
            cases += 1;
        }
    }
    assert!(cases >= 200);
}

#[test]
fn own_head_never_reaches_own_consistency_term() {
    let config = MetaConfig {
        layer_sizes: vec![1, 5, 4],
        n_tasks: 3,
        ..MetaConfig::default()
    };
    let learner = MetaLearner::new(config.clone()).unwrap();
    let gen = TaskGenerator {
        family: TaskFamily::Sinusoid,
        n_support: 5,
        n_query: 5,
        noise_sd: 0.3,
    };
    let tasks = (0..3).map(|k| gen.generate(k).unwrap()).collect();
    let batch = TaskBatch::with_metadata(tasks, &Sampler::Uniform, None, 9).unwrap();
    let tape = Tape::new();
    let bound = learner.model.bind(&tape);
    let omega = learner.similarity.bind(&tape);
    let obj = build_objective(&tape, &bound, &omega, &batch, &config).unwrap();
    for i in 0..3 {
        let own = bound.heads[i].vars();
        let grads = tape.grad(obj.consistency_losses[i], &own, false).unwrap();
        for g in grads {
            assert!(g.value().data().iter().all(|&v| v == 0.0), "task {i}");
        }
        let other = bound.heads[(i + 1) % 3].vars();
        let grads = tape.grad(obj.consistency_losses[i], &other, false).unwrap();
        assert!(grads.iter().any(|g| g.value().data().iter().any(|&v| v != 0.0)));
    }
}
