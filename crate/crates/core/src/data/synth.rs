use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, ImageSample, Label};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLOB_PEAK: f64 = 0.9;
pub const NOISE_MEAN: f64 = 0.2;
pub const NOISE_SD: f64 = 0.05;

/// Balanced two-class images: Monkeypox samples carry a bright Gaussian blob
/// on background noise, Others are noise only. Labels alternate starting with
/// Monkeypox. Pixels are quantized to 8-bit levels so the set survives a PPM
/// round trip unchanged.
pub fn synth_generate(n: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidConfig(format!("synthetic sample count must be positive and even, got {n}")));
    }
    if height < 8 || width < 8 {
        return Err(Error::InvalidConfig(format!("synthetic images must be at least 8x8, got {height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(NOISE_MEAN, NOISE_SD).expect("constant parameters are valid");
    let sigma = height.min(width) as f64 / 6.0;
    let samples = (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Monkeypox } else { Label::Others };
            let center = (label == Label::Monkeypox).then(|| {
                (
                    rng.random_range(height as f64 / 4.0..3.0 * height as f64 / 4.0),
                    rng.random_range(width as f64 / 4.0..3.0 * width as f64 / 4.0),
                )
            });
            let mut data = Vec::with_capacity(3 * height * width);
            for _ in 0..3 {
                for y in 0..height {
                    for x in 0..width {
                        let background: f64 = noise.sample(&mut rng);
                        let v = match center {
                            Some((cy, cx)) => {
                                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                                let g = (-r2 / (2.0 * sigma * sigma)).exp();
                                background * (1.0 - g) + BLOB_PEAK * g
                            }
                            None => background,
                        };
                        data.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
                    }
                }
            }
            ImageSample::new(Tensor::new(&[3, height, width], data)?, label, format!("synth-{i:05}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}
