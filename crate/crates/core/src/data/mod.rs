//! Raster IO, manifests, normalization, tiling and synthetic scenes.

mod manifest;
mod palette;
mod raster;
mod synth;
mod tiling;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use manifest::{band_arithmetic, BandTerm, Dataset, Manifest, Rect, Split};
pub use palette::Palette;
pub use raster::{LabelMap, Raster};
pub use synth::{synth_scene, Scene, SynthSpec};
pub use tiling::{cut_tiles, plan_tiles, stitch, TilePlan};

use crate::error::{Error, Result};

/// Per-band min-max scaling to `[0, 1]`; constant bands become zero.
pub fn normalize(r: &Raster) -> Raster {
    let b = r.bands;
    let mut lo = vec![f64::INFINITY; b];
    let mut hi = vec![f64::NEG_INFINITY; b];
    for px in r.data.chunks(b) {
        for (i, &v) in px.iter().enumerate() {
            lo[i] = lo[i].min(v as f64);
            hi[i] = hi[i].max(v as f64);
        }
    }
    let data = r
        .data
        .chunks(b)
        .flat_map(|px| {
            px.iter().enumerate().map(|(i, &v)| {
                let range = hi[i] - lo[i];
                if range > 0.0 {
                    ((v as f64 - lo[i]) / range) as f32
                } else {
                    0.0
                }
            })
        })
        .collect::<Vec<_>>();
    Raster {
        height: r.height,
        width: r.width,
        bands: b,
        data,
    }
}

/// Outcome of [`subsample_train`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subsample {
    pub labels: LabelMap,
    /// Retained pixels per class id.
    pub kept: BTreeMap<i64, usize>,
    /// Classes that lost every sample.
    pub warnings: Vec<String>,
}

/// Keep `round(fraction · n_c)` randomly chosen pixels of every class `c`;
/// the rest become `ignore`.
pub fn subsample_train(labels: &LabelMap, fraction: f64, seed: u64, ignore: i64) -> Result<Subsample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut by_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.data.iter().enumerate() {
        if l != ignore {
            by_class.entry(l).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = labels.clone();
    let mut kept = BTreeMap::new();
    let mut warnings = Vec::new();
    for (class, mut idx) in by_class {
        let keep = (fraction * idx.len() as f64).round() as usize;
        idx.shuffle(&mut rng);
        for &i in &idx[keep..] {
            out.data[i] = ignore;
        }
        if keep == 0 {
            warnings.push(format!(
                "class {class}: all {} training pixels dropped at fraction {fraction}",
                idx.len()
            ));
        }
        kept.insert(class, keep);
    }
    Ok(Subsample {
        labels: out,
        kept,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_max_examples() {
        let r = Raster::new(1, 3, 2, vec![2.0, 5.0, 4.0, 5.0, 6.0, 5.0]).unwrap();
        let n = normalize(&r);
        assert_eq!(n.data, vec![0.0, 0.0, 0.5, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn subsample_fraction_one_is_identity() {
        let l = LabelMap::new(2, 3, vec![0, 1, -1, 1, 0, 2]).unwrap();
        let s = subsample_train(&l, 1.0, 4, -1).unwrap();
        assert_eq!(s.labels, l);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn subsample_halves_exactly() {
        let l = LabelMap::filled(10, 10, 3);
        let s = subsample_train(&l, 0.5, 1, -1).unwrap();
        assert_eq!(s.labels.data.iter().filter(|&&v| v == 3).count(), 50);
        assert_eq!(s.kept[&3], 50);
        assert_eq!(s, subsample_train(&l, 0.5, 1, -1).unwrap());
        assert_ne!(s.labels, subsample_train(&l, 0.5, 2, -1).unwrap().labels);
    }

    #[test]
    fn subsample_warns_when_a_class_vanishes() {
        let l = LabelMap::new(1, 5, vec![0, 0, 0, 0, 1]).unwrap();
        let s = subsample_train(&l, 0.4, 0, -1).unwrap();
        assert_eq!(s.kept[&0], 2);
        assert_eq!(s.kept[&1], 0);
        assert_eq!(s.warnings.len(), 1);
        assert!(subsample_train(&l, 0.0, 0, -1).is_err());
    }
}
