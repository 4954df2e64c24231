use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dgd_core::descriptor::{embed_with_cache, HeadParams, PoolSpec};
use dgd_core::extractor::FeatureMap;
use dgd_core::linalg::{dot, Matrix};
use dgd_core::objective::{backprop_head, combined_loss, supcon_loss, Batch, LossConfig};

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let s = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Labels with `classes` groups of at least two members each.
fn labels(rng: &mut ChaCha8Rng, classes: usize, extra: usize) -> Vec<usize> {
    let mut l: Vec<usize> = (0..classes).flat_map(|c| [c, c]).collect();
    l.extend((0..extra).map(|_| rng.random_range(0..classes)));
    l
}

fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    Matrix::from_vec(d, d, q.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_invariance(seed in any::<u64>(), classes in 1usize..5, extra in 0usize..6, d in 2usize..10, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = labels(&mut rng, classes, extra);
        let rows = unit_rows(&mut rng, l.len(), d);
        let mut perm: Vec<usize> = (0..l.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let base = supcon_loss(&Batch::from_rows(&rows, l.clone()).unwrap(), tau).unwrap();
        let p_rows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let moved = supcon_loss(&Batch::from_rows(&p_rows, perm.iter().map(|&i| l[i]).collect()).unwrap(), tau).unwrap();
        prop_assert!((base.loss - moved.loss).abs() <= 1e-12 * base.loss.max(1.0));
        for (k, &i) in perm.iter().enumerate() {
            for (g, h) in moved.grad.row(k).iter().zip(base.grad.row(i)) {
                prop_assert!((g - h).abs() <= 1e-12 * (1.0 + h.abs()));
            }
        }
    }

    #[test]
    fn rotation_invariance(seed in any::<u64>(), classes in 1usize..5, extra in 0usize..6, d in 2usize..10, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = labels(&mut rng, classes, extra);
        let rows = unit_rows(&mut rng, l.len(), d);
        let q = orthogonal(&mut rng, d);
        let turned: Vec<f64> = rows.iter().flat_map(|r| q.matvec(r)).collect();
        let base = supcon_loss(&Batch::from_rows(&rows, l.clone()).unwrap(), tau).unwrap().loss;
        let rot = supcon_loss(&Batch::from_raw(Matrix::from_vec(l.len(), d, turned), l).unwrap(), tau).unwrap().loss;
        prop_assert!((base - rot).abs() <= 1e-9);
    }

    #[test]
    fn non_negative_with_negatives(seed in any::<u64>(), classes in 2usize..5, extra in 0usize..6, d in 1usize..10, tau in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = labels(&mut rng, classes, extra);
        let rows = unit_rows(&mut rng, l.len(), d);
        prop_assert!(supcon_loss(&Batch::from_rows(&rows, l).unwrap(), tau).unwrap().loss >= 0.0);
    }

    #[test]
    fn identical_pair_has_zero_loss(seed in any::<u64>(), d in 1usize..10, tau in 0.01f64..5.0, label in any::<usize>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = unit_rows(&mut rng, 1, d).remove(0);
        let loss = supcon_loss(&Batch::from_rows(&[z.clone(), z], vec![label, label]).unwrap(), tau).unwrap().loss;
        prop_assert_eq!(loss, 0.0);
    }

    /// Scaling every head parameter leaves each pre-normalization vector
    /// parallel to itself, so the loss is flat along the parameters.
    #[test]
    fn loss_is_flat_along_radial_parameter_scaling(seed in any::<u64>(), cgd in any::<bool>(), ce in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = HeadParams::random_with(PoolSpec::Gem { p: 3.0 }, PoolSpec::Mac, 5, 4, &mut rng);
        head.cgd_order = cgd;
        for x in head.b_a.iter_mut().chain(head.b_b.iter_mut()) {
            *x = 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
        let maps: Vec<FeatureMap> = (0..6)
            .map(|_| FeatureMap::from_vec(5, 3, 3, (0..45).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let caches: Vec<_> = maps.iter().map(|m| embed_with_cache(m, &head).unwrap()).collect();
        let rows: Vec<Vec<f64>> = caches.iter().map(|c| c.embedding.as_slice().to_vec()).collect();
        let batch = Batch::from_rows(&rows, vec![0, 0, 1, 1, 2, 2]).unwrap();
        let cfg = LossConfig { lambda_ce: if ce { 0.5 } else { 0.0 }, ..LossConfig::default() };
        let classifier = ce.then(|| Matrix::from_vec(3, 8, (0..24).map(|_| rng.sample(StandardNormal)).collect()));
        let value = combined_loss(&batch, &cfg, classifier.as_ref()).unwrap();
        let grads = backprop_head(&value.grad_embeddings, &caches, &head).unwrap();
        let radial: f64 = grads.tensors().iter().zip(head.tensors()).map(|(g, p)| dot(g, p)).sum();
        let scale: f64 = grads.tensors().iter().zip(head.tensors()).map(|(g, p)| dot(g, g).sqrt() * dot(p, p).sqrt()).sum();
        prop_assert!(radial.abs() <= 1e-9 * scale.max(1.0), "radial {radial} vs {scale}");
    }
}
