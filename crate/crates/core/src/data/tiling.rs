use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square tile origins covering an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub stride: usize,
    /// `(row, col)` of each tile's top-left pixel, row-major.
    pub origins: Vec<(usize, usize)>,
}

fn axis_origins(n: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + tile <= n).collect();
    let last = n - tile;
    if *v.last().unwrap() != last {
        v.push(last);
    }
    v
}

/// Origins at multiples of `tile·(1 − overlap)` with one extra, clamped
/// origin per axis when the grid would leave the far edge uncovered.
pub fn plan_tiles(height: usize, width: usize, tile: usize, overlap: f64) -> Result<TilePlan> {
    if tile == 0 || tile > height.min(width) {
        return Err(Error::InvalidArgument(format!(
            "tile {tile} must lie in 1..={} for a {height}×{width} image",
            height.min(width)
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!(
            "overlap ratio must lie in [0, 1), got {overlap}"
        )));
    }
    let stride = ((tile as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let rows = axis_origins(height, tile, stride);
    let cols = axis_origins(width, tile, stride);
    let origins = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(TilePlan {
        height,
        width,
        tile,
        stride,
        origins,
    })
}

/// Average overlapping `t×t×K` tiles into an `height×width×K` map.
///
/// Each pixel keeps a running mean updated in the order given, so pixels
/// whose contributions agree reproduce that value exactly.
pub fn stitch(tiles: &[((usize, usize), Tensor)], height: usize, width: usize) -> Result<Tensor> {
    let Some((_, first)) = tiles.first() else {
        return Err(Error::InvalidArgument("stitch needs at least one tile".into()));
    };
    let k = *first.shape().last().unwrap();
    let mut mean = vec![0.0; height * width * k];
    let mut count = vec![0u32; height * width];
    for ((r0, c0), t) in tiles {
        let [th, tw, tk] = t.shape()[..] else {
            return Err(Error::InvalidArgument(format!(
                "tile must be t×t×K, got {:?}",
                t.shape()
            )));
        };
        if tk != k {
            return Err(Error::shape("stitch", t.shape(), first.shape()));
        }
        if r0 + th > height || c0 + tw > width {
            return Err(Error::InvalidArgument(format!(
                "tile {th}×{tw} at ({r0},{c0}) exceeds {height}×{width}"
            )));
        }
        for i in 0..th {
            for j in 0..tw {
                let p = (r0 + i) * width + c0 + j;
                count[p] += 1;
                let n = count[p] as f64;
                let src = &t.data()[(i * tw + j) * k..(i * tw + j + 1) * k];
                for (m, s) in mean[p * k..(p + 1) * k].iter_mut().zip(src) {
                    *m += (s - *m) / n;
                }
            }
        }
    }
    if let Some(p) = count.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "pixel ({}, {}) is not covered by any tile",
            p / width,
            p % width
        )));
    }
    Tensor::new(&[height, width, k], mean)
}

/// Crop every tile of `plan` out of an `H×W×C` tensor.
pub fn cut_tiles(field: &Tensor, plan: &TilePlan) -> Result<Vec<((usize, usize), Tensor)>> {
    let [h, w, c] = field.shape()[..] else {
        return Err(Error::InvalidArgument(format!(
            "expected H×W×C, got {:?}",
            field.shape()
        )));
    };
    if (h, w) != (plan.height, plan.width) {
        return Err(Error::shape("cut_tiles", field.shape(), &[plan.height, plan.width, c]));
    }
    let t = plan.tile;
    plan.origins
        .iter()
        .map(|&(r0, c0)| {
            let mut data = Vec::with_capacity(t * t * c);
            for r in r0..r0 + t {
                let o = (r * w + c0) * c;
                data.extend_from_slice(&field.data()[o..o + t * c]);
            }
            Ok(((r0, c0), Tensor::new(&[t, t, c], data)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tile_when_image_equals_tile() {
        let p = plan_tiles(128, 128, 128, 0.5).unwrap();
        assert_eq!(p.origins, vec![(0, 0)]);
    }

    #[test]
    fn long_strip_count() {
        let p = plan_tiles(349, 1905, 128, 0.5).unwrap();
        assert_eq!(p.stride, 64);
        assert_eq!(p.origins.len(), 145);
        assert_eq!(axis_origins(349, 128, 64), vec![0, 64, 128, 192, 221]);
        assert_eq!(axis_origins(1905, 128, 64).len(), 29);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(plan_tiles(10, 20, 11, 0.5).is_err());
        assert!(plan_tiles(10, 20, 4, 1.0).is_err());
        assert!(plan_tiles(10, 20, 0, 0.0).is_err());
    }

    #[test]
    fn overlap_is_averaged() {
        let a = Tensor::full(&[2, 2, 1], 1.0);
        let b = Tensor::full(&[2, 2, 1], 3.0);
        let s = stitch(&[((0, 0), a), ((0, 1), b)], 2, 3).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn uncovered_pixel_is_an_error() {
        let a = Tensor::full(&[2, 2, 1], 1.0);
        assert!(stitch(&[((0, 0), a)], 2, 3).is_err());
    }

    #[test]
    fn cut_then_stitch_is_identity() {
        let f = Tensor::new(&[5, 7, 2], (0..70).map(f64::from).collect()).unwrap();
        let plan = plan_tiles(5, 7, 3, 0.5).unwrap();
        let tiles = cut_tiles(&f, &plan).unwrap();
        assert_eq!(stitch(&tiles, 5, 7).unwrap(), f);
    }
}
