//! Frozen two-layer convolutional filter bank.
//!
//! Stands in for a pretrained backbone: a seeded bank of zero-mean,
//! unit-norm kernels maps a 224x224 image to a non-negative `C x H x W`
//! feature tensor (32x14x14 with the default bank).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::data::{Image, TensorRecord};

/// Side length the extractor accepts.
pub const INPUT_SIZE: usize = 224;
pub const DEFAULT_KERNEL_SIZE: usize = 5;
pub const DEFAULT_LAYER1: usize = 16;
pub const DEFAULT_LAYER2: usize = 32;
pub const POOL_FACTOR: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("kernel {kernel}x{kernel} larger than input {height}x{width}")]
    KernelTooLarge {
        kernel: usize,
        height: usize,
        width: usize,
    },
    #[error("kernel size {0} is not odd")]
    EvenKernel(usize),
    #[error("kernel expects {expected} input channels, got {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("extent {height}x{width} not divisible by pooling factor {factor}")]
    IndivisibleExtent {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("extractor expects a {INPUT_SIZE}x{INPUT_SIZE} image, got {width}x{height}")]
    WrongInputSize { width: usize, height: usize },
    #[error("invalid feature map: {0}")]
    InvalidFeatureMap(String),
}

/// Dense `channels x height x width` real tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "grid extents must be positive");
        assert_eq!(data.len(), channels * height * width, "grid data length mismatch");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    /// Single-channel grid of pixel intensities scaled to `[0, 1]`.
    pub fn from_image(image: &Image) -> Self {
        let data = image.pixels().iter().map(|&p| f64::from(p) / 255.0).collect();
        Self::new(1, image.height(), image.width(), data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn relu_in_place(&mut self) {
        for v in &mut self.data {
            *v = v.max(0.0);
        }
    }
}

/// The feature tensor consumed by the descriptor head: finite and
/// non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Grid);

impl FeatureMap {
    pub fn new(grid: Grid) -> Result<Self, ExtractError> {
        if let Some(v) = grid.data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(ExtractError::InvalidFeatureMap(format!(
                "activation {v} is negative or not finite"
            )));
        }
        Ok(Self(grid))
    }

    #[cfg(test)]
    pub(crate) fn from_grid_unchecked(grid: Grid) -> Self {
        Self(grid)
    }

    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, ExtractError> {
        if channels == 0 || height == 0 || width == 0 || values.len() != channels * height * width
        {
            return Err(ExtractError::InvalidFeatureMap(format!(
                "{} values do not fill {channels}x{height}x{width}",
                values.len()
            )));
        }
        Self::new(Grid::new(channels, height, width, values))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    /// Activations of channel `c`, the set `V_c` pooled by the descriptors.
    pub fn channel(&self, c: usize) -> &[f64] {
        self.0.channel(c)
    }

    pub fn to_record(&self) -> TensorRecord {
        TensorRecord::new(
            vec![self.channels(), self.height(), self.width()],
            self.values().to_vec(),
        )
        .expect("feature map extents are positive")
    }

    pub fn from_record(record: &TensorRecord) -> Result<Self, ExtractError> {
        match *record.dims() {
            [c, h, w] => Self::from_vec(c, h, w, record.data().to_vec()),
            ref dims => Err(ExtractError::InvalidFeatureMap(format!(
                "expected 3 dims, got {dims:?}"
            ))),
        }
    }
}

/// Odd-sized square kernel spanning `channels` input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    channels: usize,
    size: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(channels: usize, size: usize, weights: Vec<f64>) -> Result<Self, ExtractError> {
        if size.is_multiple_of(2) {
            return Err(ExtractError::EvenKernel(size));
        }
        assert_eq!(weights.len(), channels * size * size, "kernel weight count mismatch");
        Ok(Self {
            channels,
            size,
            weights,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn random(channels: usize, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = channels * size * size;
        let mut weights: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let mean = weights.iter().sum::<f64>() / n as f64;
        weights.iter_mut().for_each(|w| *w -= mean);
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        weights.iter_mut().for_each(|w| *w /= norm);
        Self {
            channels,
            size,
            weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    seed: u64,
    layer1: Vec<Kernel>,
    layer2: Vec<Kernel>,
}

impl FilterBank {
    pub fn with_shape(seed: u64, layer1: usize, layer2: usize, size: usize) -> Self {
        assert!(size % 2 == 1, "kernel size must be odd");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l1 = (0..layer1).map(|_| Kernel::random(1, size, &mut rng)).collect();
        let l2 = (0..layer2).map(|_| Kernel::random(layer1, size, &mut rng)).collect();
        Self {
            seed,
            layer1: l1,
            layer2: l2,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer1(&self) -> &[Kernel] {
        &self.layer1
    }

    pub fn layer2(&self) -> &[Kernel] {
        &self.layer2
    }

    /// Channel count of the produced feature maps.
    pub fn output_channels(&self) -> usize {
        self.layer2.len()
    }
}

/// Default bank: 16 first-layer and 32 second-layer 5x5 kernels drawn from a
/// seeded Gaussian stream, each shifted to zero mean and scaled to unit norm.
pub fn make_filter_bank(seed: u64) -> FilterBank {
    FilterBank::with_shape(seed, DEFAULT_LAYER1, DEFAULT_LAYER2, DEFAULT_KERNEL_SIZE)
}

/// Same-size, stride-1, zero-padded cross-correlation summed over input
/// channels. Returns a single-channel grid.
pub fn conv2d_same(input: &Grid, kernel: &Kernel) -> Result<Grid, ExtractError> {
    let (h, w, k) = (input.height, input.width, kernel.size);
    if k % 2 == 0 {
        return Err(ExtractError::EvenKernel(k));
    }
    if k > h || k > w {
        return Err(ExtractError::KernelTooLarge {
            kernel: k,
            height: h,
            width: w,
        });
    }
    if kernel.channels != input.channels {
        return Err(ExtractError::ChannelMismatch {
            expected: kernel.channels,
            found: input.channels,
        });
    }
    let r = k / 2;
    let mut out = vec![0.0; h * w];
    for c in 0..input.channels {
        let plane = input.channel(c);
        for dy in 0..k {
            let y_lo = r.saturating_sub(dy);
            let y_hi = (h + r).saturating_sub(dy).min(h);
            for dx in 0..k {
                let wgt = kernel.weights[(c * k + dy) * k + dx];
                if wgt == 0.0 {
                    continue;
                }
                let x_lo = r.saturating_sub(dx);
                let x_hi = (w + r).saturating_sub(dx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let sy = y + dy - r;
                    let src = &plane[sy * w + x_lo + dx - r..sy * w + x_hi + dx - r];
                    let dst = &mut out[y * w + x_lo..y * w + x_hi];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wgt * s;
                    }
                }
            }
        }
    }
    Ok(Grid::new(1, h, w, out))
}

/// Non-overlapping `factor x factor` mean pooling, per channel.
pub fn avg_pool(input: &Grid, factor: usize) -> Result<Grid, ExtractError> {
    let (h, w) = (input.height, input.width);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(ExtractError::IndivisibleExtent {
            height: h,
            width: w,
            factor,
        });
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Vec::with_capacity(input.channels * oh * ow);
    for c in 0..input.channels {
        let plane = input.channel(c);
        for oy in 0..oh {
            let mut row = vec![0.0; ow];
            for y in oy * factor..(oy + 1) * factor {
                let src = &plane[y * w..(y + 1) * w];
                for (ox, acc) in row.iter_mut().enumerate() {
                    *acc += src[ox * factor..(ox + 1) * factor].iter().sum::<f64>();
                }
            }
            out.extend(row.into_iter().map(|s| s * inv));
        }
    }
    Ok(Grid::new(input.channels, oh, ow, out))
}

fn conv_relu_pool(input: &Grid, kernels: &[Kernel]) -> Result<Grid, ExtractError> {
    let mut planes = Vec::new();
    for kernel in kernels {
        let mut response = conv2d_same(input, kernel)?;
        response.relu_in_place();
        planes.extend_from_slice(avg_pool(&response, POOL_FACTOR)?.data());
    }
    Ok(Grid::new(
        kernels.len(),
        input.height / POOL_FACTOR,
        input.width / POOL_FACTOR,
        planes,
    ))
}

/// Runs the bank on an already normalized single-channel input of any size
/// divisible by 16.
pub fn extract_from_grid(input: &Grid, bank: &FilterBank) -> Result<FeatureMap, ExtractError> {
    let hidden = conv_relu_pool(input, &bank.layer1)?;
    let out = conv_relu_pool(&hidden, &bank.layer2)?;
    FeatureMap::new(out)
}

/// Normalize to `[0, 1]`, then conv+ReLU+pool(4) twice.
pub fn extract_features(image: &Image, bank: &FilterBank) -> Result<FeatureMap, ExtractError> {
    if image.width() != INPUT_SIZE || image.height() != INPUT_SIZE {
        return Err(ExtractError::WrongInputSize {
            width: image.width(),
            height: image.height(),
        });
    }
    extract_from_grid(&Grid::from_image(image), bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Grid {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Grid::new(c, h, w, data)
    }

    #[test]
    fn bank_is_deterministic_and_normalized() {
        let a = make_filter_bank(42);
        assert_eq!(a, make_filter_bank(42));
        assert_eq!(a.layer1().len(), 16);
        assert_eq!(a.layer2().len(), 32);
        for k in a.layer1().iter().chain(a.layer2()) {
            let n = k.weights().len() as f64;
            let mean = k.weights().iter().sum::<f64>() / n;
            let norm = k.weights().iter().map(|w| w * w).sum::<f64>().sqrt();
            assert!(mean.abs() < 1e-12);
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert_eq!(a.layer2()[0].weights().len(), 16 * 25);
    }

    #[test]
    fn seeds_give_different_banks() {
        assert_ne!(make_filter_bank(1), make_filter_bank(2));
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_grid(&mut rng, 1, 6, 7);
        let k = Kernel::new(1, 1, vec![1.0]).unwrap();
        assert_eq!(conv2d_same(&g, &k).unwrap(), g);
    }

    #[test]
    fn box_kernel_with_zero_padding() {
        let g = Grid::new(1, 3, 3, vec![1.0; 9]);
        let k = Kernel::new(1, 3, vec![1.0; 9]).unwrap();
        let out = conv2d_same(&g, &k).unwrap();
        assert_eq!(out.get(0, 1, 1), 9.0);
        assert_eq!(out.get(0, 0, 0), 4.0);
        assert_eq!(out.get(0, 0, 1), 6.0);
    }

    #[test]
    fn zero_kernel_and_multichannel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 2, 5, 5);
        let zero = Kernel::new(2, 3, vec![0.0; 18]).unwrap();
        assert!(conv2d_same(&g, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        // a centered delta on each channel sums the channels
        let mut w = vec![0.0; 18];
        w[4] = 1.0;
        w[9 + 4] = 1.0;
        let out = conv2d_same(&g, &Kernel::new(2, 3, w).unwrap()).unwrap();
        for i in 0..25 {
            assert_eq!(out.data()[i], g.channel(0)[i] + g.channel(1)[i]);
        }
    }

    #[test]
    fn conv_errors() {
        let g = Grid::zeros(1, 3, 3);
        assert!(matches!(
            conv2d_same(&g, &Kernel::new(1, 5, vec![0.0; 25]).unwrap()),
            Err(ExtractError::KernelTooLarge { .. })
        ));
        assert!(matches!(Kernel::new(1, 2, vec![0.0; 4]), Err(ExtractError::EvenKernel(2))));
        assert!(matches!(
            conv2d_same(&Grid::zeros(2, 3, 3), &Kernel::new(1, 3, vec![0.0; 9]).unwrap()),
            Err(ExtractError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = random_grid(&mut rng, 3, 9, 8);
            let y = random_grid(&mut rng, 3, 9, 8);
            let k = Kernel::random(3, 5, &mut rng);
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
            let lhs = conv2d_same(&Grid::new(3, 9, 8, mix), &k).unwrap();
            let cx = conv2d_same(&x, &k).unwrap();
            let cy = conv2d_same(&y, &k).unwrap();
            for i in 0..lhs.data().len() {
                let rhs = a * cx.data()[i] + b * cy.data()[i];
                assert!((lhs.data()[i] - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling() {
        let g = Grid::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avg_pool(&g, 2).unwrap().data(), &[2.5]);
        assert_eq!(avg_pool(&g, 1).unwrap(), g);
        let c = Grid::new(2, 4, 8, vec![3.0; 64]);
        let p = avg_pool(&c, 4).unwrap();
        assert_eq!((p.channels(), p.height(), p.width()), (2, 1, 2));
        assert!(p.data().iter().all(|&v| v == 3.0));
        assert!(matches!(
            avg_pool(&Grid::zeros(1, 5, 4), 2),
            Err(ExtractError::IndivisibleExtent { .. })
        ));
    }

    #[test]
    fn extract_rejects_other_sizes() {
        let bank = make_filter_bank(0);
        assert!(matches!(
            extract_features(&Image::filled(100, 224, 0), &bank),
            Err(ExtractError::WrongInputSize { .. })
        ));
    }

    #[test]
    fn feature_map_rejects_negative() {
        assert!(FeatureMap::from_vec(1, 1, 2, vec![0.5, -0.1]).is_err());
        assert!(FeatureMap::from_vec(1, 1, 2, vec![0.5, f64::NAN]).is_err());
        assert!(FeatureMap::from_vec(1, 2, 2, vec![0.5]).is_err());
    }
}
