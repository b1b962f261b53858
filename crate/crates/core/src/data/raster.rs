//! `"LGRS"` raster files: u32 version, u32 height, width, bands, then
//! little-endian f32 values, row-major with bands last.

use std::path::Path;

use crate::binio::{put_u32, read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LGRS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::InvalidArgument(format!(
                "raster dims must be positive, got {height}×{width}×{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(Error::InvalidArgument(format!(
                "raster {height}×{width}×{bands} needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("raster value {i} is not finite")));
        }
        Ok(Raster {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn at(&self, r: usize, c: usize, b: usize) -> f32 {
        self.data[(r * self.width + c) * self.bands + b]
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f32] {
        let o = (r * self.width + c) * self.bands;
        &self.data[o..o + self.bands]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.height, self.width, self.bands],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("raster dims are consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w, b] = t.shape()[..] else {
            return Err(Error::InvalidArgument(format!(
                "raster tensor must be h×w×bands, got {:?}",
                t.shape()
            )));
        };
        Raster::new(h, w, b, t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Raster> {
        if r0 + h > self.height || c0 + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}×{w} at ({r0},{c0}) exceeds raster {}×{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.bands);
        for r in r0..r0 + h {
            let o = (r * self.width + c0) * self.bands;
            data.extend_from_slice(&self.data[o..o + w * self.bands]);
        }
        Raster::new(h, w, self.bands, data)
    }

    /// Nearest-neighbour resize; source index `floor((i + 0.5)·src/dst)`.
    pub fn resample_nearest(&self, height: usize, width: usize) -> Result<Raster> {
        let rows = nearest_index(self.height, height);
        let cols = nearest_index(self.width, width);
        let mut data = Vec::with_capacity(height * width * self.bands);
        for &r in &rows {
            for &c in &cols {
                data.extend_from_slice(self.pixel(r, c));
            }
        }
        Raster::new(height, width, self.bands, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.height as u32, self.width as u32, self.bands as u32] {
            put_u32(&mut out, v);
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
        let mut r = Reader::new(bytes, path);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported raster version {version}")));
        }
        let (h, w, b) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let data: Vec<f32> = r.f32s(h * w * b)?.into_iter().map(|v| v as f32).collect();
        if !r.at_end() {
            return Err(r.fail("trailing bytes after raster data"));
        }
        Raster::new(h, w, b, data).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Raster> {
        Raster::decode(&read_file(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }
}

pub(crate) fn nearest_index(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1))
        .collect()
}

/// Integer class map; stored on disk as a one-band raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<i64>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<i64>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "label map {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: i64) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.width + c]
    }

    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<LabelMap> {
        if r0 + h > self.height || c0 + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}×{w} at ({r0},{c0}) exceeds label map {}×{}",
                self.height, self.width
            )));
        }
        let data = (r0..r0 + h)
            .flat_map(|r| self.data[r * self.width + c0..r * self.width + c0 + w].iter().copied())
            .collect();
        LabelMap::new(h, w, data)
    }

    pub fn resample_nearest(&self, height: usize, width: usize) -> LabelMap {
        let rows = nearest_index(self.height, height);
        let cols = nearest_index(self.width, width);
        let data = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .map(|(r, c)| self.at(r, c))
            .collect();
        LabelMap { height, width, data }
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            bands: 1,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_raster(r: &Raster) -> Result<LabelMap> {
        if r.bands != 1 {
            return Err(Error::InvalidArgument(format!(
                "label raster must have 1 band, got {}",
                r.bands
            )));
        }
        let mut data = Vec::with_capacity(r.data.len());
        for (i, &v) in r.data.iter().enumerate() {
            if v.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "label value {v} at index {i} is not an integer"
                )));
            }
            data.push(v as i64);
        }
        LabelMap::new(r.height, r.width, data)
    }

    pub fn read(path: &Path) -> Result<LabelMap> {
        let r = Raster::read(path)?;
        LabelMap::from_raster(&r).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_raster().write(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_layout_and_round_trip() {
        let r = Raster::new(1, 2, 2, vec![1.0, -2.5, 3.0, 0.125]).unwrap();
        let bytes = r.encode();
        assert_eq!(&bytes[..4], b"LGRS");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 16);
        assert_eq!(Raster::decode(&bytes, Path::new("m")).unwrap(), r);
        assert!(Raster::decode(&bytes[..30], Path::new("m")).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Raster::new(1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn crop_and_nearest() {
        let r = Raster::new(2, 3, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(r.crop(1, 1, 1, 2).unwrap().data, vec![4.0, 5.0]);
        let up = r.resample_nearest(4, 6).unwrap();
        assert_eq!(up.at(3, 5, 0), 5.0);
        assert_eq!(up.at(0, 1, 0), 0.0);
        assert_eq!(up.resample_nearest(2, 3).unwrap(), r);
    }

    #[test]
    fn label_round_trip() {
        let l = LabelMap::new(2, 2, vec![0, 3, -1, 2]).unwrap();
        assert_eq!(LabelMap::from_raster(&l.to_raster()).unwrap(), l);
        let bad = Raster::new(1, 1, 1, vec![0.5]).unwrap();
        assert!(LabelMap::from_raster(&bad).is_err());
    }
}
