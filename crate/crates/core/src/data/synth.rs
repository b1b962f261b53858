use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::raster::{LabelMap, Raster};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub hsi_bands: usize,
    pub x_bands: usize,
    pub classes: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Number of Voronoi cells; at least `classes`.
    pub cells: usize,
}

impl SynthSpec {
    pub fn new(seed: u64, size: usize, hsi_bands: usize, x_bands: usize, classes: usize) -> Self {
        SynthSpec {
            seed,
            height: size,
            width: size,
            hsi_bands,
            x_bands,
            classes,
            noise: 0.02,
            cells: 3 * classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub hsi: Raster,
    pub x: Raster,
    pub labels: LabelMap,
    /// Per-class noise-free HSI spectrum.
    pub hsi_signatures: Vec<Vec<f32>>,
    /// Per-class noise-free X profile.
    pub x_signatures: Vec<Vec<f32>>,
}

/// Voronoi-cell class map with a per-class spectrum in each modality.
///
/// The first `classes` cells take classes `0..classes` so every class is
/// present; the remaining cells draw classes at random. HSI spectra are
/// random in `[0.1, 0.9]`; the X profile of class `k` is centred on
/// `(k + 0.5)/classes` with a small per-band offset.
pub fn synth_scene(spec: &SynthSpec) -> Result<Scene> {
    if spec.classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic scene needs ≥ 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.height == 0 || spec.width == 0 || spec.hsi_bands == 0 || spec.x_bands == 0 {
        return Err(Error::InvalidArgument(
            "synthetic scene dims and band counts must be positive".into(),
        ));
    }
    if spec.noise < 0.0 || !spec.noise.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise must be finite and ≥ 0, got {}",
            spec.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.classes;
    let hsi_signatures: Vec<Vec<f32>> = (0..k)
        .map(|_| (0..spec.hsi_bands).map(|_| rng.gen_range(0.1f32..0.9)).collect())
        .collect();
    let x_signatures: Vec<Vec<f32>> = (0..k)
        .map(|c| {
            (0..spec.x_bands)
                .map(|b| (c as f32 + 0.5) / k as f32 + 0.05 * b as f32)
                .collect()
        })
        .collect();

    let cells = spec.cells.max(k);
    let centers: Vec<(f64, f64)> = (0..cells)
        .map(|_| {
            (
                rng.gen_range(0.0..spec.height as f64),
                rng.gen_range(0.0..spec.width as f64),
            )
        })
        .collect();
    let cell_class: Vec<usize> = (0..cells)
        .map(|i| if i < k { i } else { rng.gen_range(0..k) })
        .collect();

    let (h, w) = (spec.height, spec.width);
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            let nearest = (0..cells)
                .min_by(|&a, &b| {
                    let da = (centers[a].0 - pr).powi(2) + (centers[a].1 - pc).powi(2);
                    let db = (centers[b].0 - pr).powi(2) + (centers[b].1 - pc).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            labels.push(cell_class[nearest] as i64);
        }
    }

    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut emit = |sig: &[Vec<f32>]| -> Vec<f32> {
        let mut out = Vec::with_capacity(h * w * sig[0].len());
        for &l in &labels {
            for &v in &sig[l as usize] {
                let n = if spec.noise > 0.0 {
                    normal.sample(&mut rng) as f32
                } else {
                    0.0
                };
                out.push(v + n);
            }
        }
        out
    };
    let hsi = Raster::new(h, w, spec.hsi_bands, emit(&hsi_signatures))?;
    let x = Raster::new(h, w, spec.x_bands, emit(&x_signatures))?;
    Ok(Scene {
        hsi,
        x,
        labels: LabelMap::new(h, w, labels)?,
        hsi_signatures,
        x_signatures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_every_class_present() {
        let spec = SynthSpec::new(3, 24, 5, 2, 4);
        let a = synth_scene(&spec).unwrap();
        assert_eq!(a, synth_scene(&spec).unwrap());
        for k in 0..4 {
            assert!(a.labels.data.contains(&k), "class {k} missing");
        }
        let other = synth_scene(&SynthSpec::new(4, 24, 5, 2, 4)).unwrap();
        assert_ne!(a.labels, other.labels);
    }

    #[test]
    fn zero_noise_pixels_equal_signatures_and_nearest_signature_is_exact() {
        let mut spec = SynthSpec::new(1, 20, 6, 1, 5);
        spec.noise = 0.0;
        let s = synth_scene(&spec).unwrap();
        let mut correct = 0;
        for r in 0..20 {
            for c in 0..20 {
                let l = s.labels.at(r, c) as usize;
                assert_eq!(s.hsi.pixel(r, c), &s.hsi_signatures[l][..]);
                assert_eq!(s.x.pixel(r, c), &s.x_signatures[l][..]);
                let d = |k: usize| -> f32 {
                    s.hsi
                        .pixel(r, c)
                        .iter()
                        .zip(&s.hsi_signatures[k])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum()
                };
                let best = (0..5).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap();
                correct += usize::from(best == l);
            }
        }
        assert_eq!(correct, 400);
    }

    #[test]
    fn rejects_single_class() {
        assert!(synth_scene(&SynthSpec::new(0, 8, 2, 1, 1)).is_err());
    }
}
