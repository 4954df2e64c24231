use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dgd_core::extractor::{conv2d_same, extract_from_grid, make_filter_bank, FilterBank, Grid, Kernel};

fn random_grid(seed: u64, c: usize, h: usize, w: usize, lo: f64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(lo..1.0)).collect())
}

fn crop(g: &Grid, y0: usize, x0: usize, size: usize) -> Grid {
    let mut data = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            data.push(g.get(0, y, x));
        }
    }
    Grid::new(1, size, size, data)
}

fn small_bank(seed: u64) -> FilterBank {
    FilterBank::with_shape(seed, 4, 6, 5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, c in 1usize..4, size in 1usize..6) {
        let x = random_grid(seed, c, 9, 7, -1.0);
        let y = random_grid(seed ^ 1, c, 9, 7, -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let k = Kernel::new(c, 2 * (size / 2) + 1, (0..c * (2 * (size / 2) + 1).pow(2)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mixed = Grid::new(c, 9, 7, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect());
        let lhs = conv2d_same(&mixed, &k).unwrap();
        let (cx, cy) = (conv2d_same(&x, &k).unwrap(), conv2d_same(&y, &k).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn extraction_is_positively_homogeneous(seed in any::<u64>(), alpha in 0.01f64..20.0) {
        let bank = small_bank(seed);
        let x = random_grid(seed, 1, 32, 48, 0.0);
        let scaled = Grid::new(1, 32, 48, x.data().iter().map(|v| alpha * v).collect());
        let fx = extract_from_grid(&x, &bank).unwrap();
        let fs = extract_from_grid(&scaled, &bank).unwrap();
        for (s, v) in fs.values().iter().zip(fx.values()) {
            prop_assert!((s - alpha * v).abs() <= 1e-12 * (1.0 + alpha * v.abs()));
        }
    }
}

#[test]
fn extraction_is_translation_covariant_for_16px_shifts() {
    let bank = make_filter_bank(5);
    let canvas = random_grid(6, 1, 240, 240, 0.0);
    let base = extract_from_grid(&crop(&canvas, 0, 0, 224), &bank).unwrap();
    let shifted = extract_from_grid(&crop(&canvas, 16, 16, 224), &bank).unwrap();
    let wide = extract_from_grid(&canvas, &bank).unwrap();
    assert_eq!((base.height(), base.width()), (14, 14));
    let cell = |m: &dgd_core::extractor::FeatureMap, c: usize, y: usize, x: usize| m.grid().get(c, y, x);
    for c in 0..base.channels() {
        // cells 1..=12 never see the zero padding of either layer
        for y in 1..=12 {
            for x in 1..=12 {
                assert!((cell(&base, c, y, x) - cell(&wide, c, y, x)).abs() < 1e-9);
                assert!((cell(&shifted, c, y, x) - cell(&wide, c, y + 1, x + 1)).abs() < 1e-9);
            }
        }
        for y in 1..=11 {
            for x in 1..=11 {
                assert!((cell(&shifted, c, y, x) - cell(&base, c, y + 1, x + 1)).abs() < 1e-9);
            }
        }
    }
}
