use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dgd_core::descriptor::{embed, gem_pool, mac_pool, EmbedMode, HeadParams, PoolSpec};
use dgd_core::extractor::FeatureMap;

fn map(seed: u64, c: usize, h: usize, w: usize, scale: f64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..c * h * w)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { scale * rng.random::<f64>() })
        .collect();
    FeatureMap::from_vec(c, h, w, values).unwrap()
}

fn pool_spec() -> impl Strategy<Value = PoolSpec> {
    prop_oneof![
        Just(PoolSpec::Spoc),
        Just(PoolSpec::Mac),
        (1.0f64..12.0).prop_map(|p| PoolSpec::Gem { p }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gem_is_monotone_in_p(seed in any::<u64>(), c in 1usize..5, h in 1usize..8, w in 1usize..8, scale in 1e-3f64..1e3) {
        let v = map(seed, c, h, w, scale);
        let ladder: Vec<Vec<f64>> = [1.0, 2.0, 4.0, 8.0, 16.0].iter().map(|&p| gem_pool(&v, p).unwrap()).collect();
        for pair in ladder.windows(2) {
            for (lo, hi) in pair[0].iter().zip(&pair[1]) {
                prop_assert!(lo <= hi, "{lo} > {hi}");
            }
        }
    }

    #[test]
    fn gem_one_is_the_mean(seed in any::<u64>(), c in 1usize..5, h in 1usize..8, w in 1usize..8) {
        let v = map(seed, c, h, w, 1.0);
        for (ch, g) in gem_pool(&v, 1.0).unwrap().iter().enumerate() {
            let vals = v.channel(ch);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            prop_assert!((g - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn mac_ignores_spatial_order(seed in any::<u64>(), c in 1usize..5, h in 1usize..8, w in 1usize..8) {
        let v = map(seed, c, h, w, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let mut order: Vec<usize> = (0..h * w).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<f64> = (0..c).flat_map(|ch| order.iter().map(move |&i| (ch, i))).map(|(ch, i)| v.channel(ch)[i]).collect();
        let moved = FeatureMap::from_vec(c, h, w, shuffled).unwrap();
        prop_assert_eq!(mac_pool(&v), mac_pool(&moved));
    }

    #[test]
    fn embeddings_are_finite_and_unit(
        seed in any::<u64>(),
        a in pool_spec(),
        b in pool_spec(),
        c in 1usize..6,
        d in 1usize..6,
        scale in 1e-6f64..1e6,
        cgd in any::<bool>(),
    ) {
        let v = map(seed, c, 3, 4, scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = HeadParams::random_with(a, b, c, d, &mut rng);
        head.cgd_order = cgd;
        for x in head.b_a.iter_mut().chain(head.b_b.iter_mut()) {
            *x = rng.sample(StandardNormal);
        }
        for mode in [EmbedMode::WithFc, EmbedMode::NoFc] {
            let e = embed(&v, &head, mode).unwrap();
            prop_assert!(e.as_slice().iter().all(|x| x.is_finite()));
            let n: f64 = e.as_slice().iter().map(|x| x * x).sum();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn swapping_branches_swaps_halves(seed in any::<u64>(), a in pool_spec(), b in pool_spec(), d in 1usize..6) {
        let v = map(seed, 4, 3, 3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = HeadParams::random_with(a, b, 4, d, &mut rng);
        let e = embed(&v, &head, EmbedMode::WithFc).unwrap();
        let s = embed(&v, &head.swapped(), EmbedMode::WithFc).unwrap();
        let (e, s) = (e.as_slice(), s.as_slice());
        prop_assert_eq!(&e[..d], &s[d..]);
        prop_assert_eq!(&e[d..], &s[..d]);
    }
}
