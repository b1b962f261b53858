//! Dataset manifest (`key = value` text) and the loaded dataset it describes.
//!
//! ```text
//! hsi = hsi.lgrs
//! x = dsm_dem.lgrs
//! labels = gt.lgrs          # optional
//! hsi_bands = 144
//! x_bands = 1
//! classes = 15
//! ignore = -1
//! palette = palette.txt     # optional, "class_id,R,G,B" lines
//! x_arith = 0-1             # optional, one output band per ';'-separated term
//! resample = nearest        # optional, resize x/labels/masks to the HSI grid
//! normalize = true
//! train_rects = 0,0,64,64; 64,0,64,64   # row,col,height,width
//! test_mask = test.lgrs     # nonzero pixels are in the split
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use super::normalize;
use super::palette::Palette;
use super::raster::{LabelMap, Raster};
use crate::error::{Error, Result};
use crate::kv::KvMap;

/// One output band of the X-modality band arithmetic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BandTerm {
    Band(usize),
    Sum(usize, usize),
    Diff(usize, usize),
}

impl BandTerm {
    fn parse(s: &str) -> Result<Self> {
        let idx = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("band arithmetic: {t:?} is not a band index")))
        };
        if let Some((a, b)) = s.split_once('-') {
            Ok(BandTerm::Diff(idx(a)?, idx(b)?))
        } else if let Some((a, b)) = s.split_once('+') {
            Ok(BandTerm::Sum(idx(a)?, idx(b)?))
        } else {
            Ok(BandTerm::Band(idx(s)?))
        }
    }

    fn max_band(&self) -> usize {
        match *self {
            BandTerm::Band(a) => a,
            BandTerm::Sum(a, b) | BandTerm::Diff(a, b) => a.max(b),
        }
    }

    fn eval(&self, px: &[f32]) -> f32 {
        match *self {
            BandTerm::Band(a) => px[a],
            BandTerm::Sum(a, b) => px[a] + px[b],
            BandTerm::Diff(a, b) => px[a] - px[b],
        }
    }
}

/// Apply per-pixel band arithmetic, e.g. `[Diff(0, 1)]` for DSM − DEM.
pub fn band_arithmetic(r: &Raster, terms: &[BandTerm]) -> Result<Raster> {
    if let Some(t) = terms.iter().find(|t| t.max_band() >= r.bands) {
        return Err(Error::Config(format!(
            "band arithmetic {t:?} references a band beyond {}",
            r.bands
        )));
    }
    let data = r
        .data
        .chunks(r.bands)
        .flat_map(|px| terms.iter().map(move |t| t.eval(px)))
        .collect();
    Raster::new(r.height, r.width, terms.len(), data)
}

/// Axis-aligned `row, col, height, width` rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Split {
    All,
    Rects(Vec<Rect>),
    Mask(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub hsi: PathBuf,
    pub x: PathBuf,
    pub labels: Option<PathBuf>,
    pub hsi_bands: usize,
    pub x_bands: usize,
    pub classes: usize,
    pub ignore: i64,
    pub palette: Option<PathBuf>,
    pub x_arith: Option<Vec<BandTerm>>,
    pub resample: bool,
    pub normalize: bool,
    pub train: Split,
    pub test: Split,
}

fn parse_rects(s: &str) -> Result<Vec<Rect>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let v: Vec<usize> = p
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("rectangle {p:?}: bad number {t:?}")))
                })
                .collect::<Result<_>>()?;
            let [row, col, height, width] = v[..] else {
                return Err(Error::Config(format!("rectangle {p:?} needs row,col,height,width")));
            };
            Ok(Rect {
                row,
                col,
                height,
                width,
            })
        })
        .collect()
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let path = |kv: &mut KvMap, key: &str| kv.raw(key).map(|p| base.join(p));
        let split = |kv: &mut KvMap, name: &str| -> Result<Split> {
            let rects = kv.raw(&format!("{name}_rects"));
            let mask = kv.raw(&format!("{name}_mask"));
            match (rects, mask) {
                (Some(_), Some(_)) => Err(Error::Config(format!(
                    "{name}: give either {name}_rects or {name}_mask, not both"
                ))),
                (Some(r), None) => Ok(Split::Rects(parse_rects(&r)?)),
                (None, Some(m)) => Ok(Split::Mask(base.join(m))),
                (None, None) => Ok(Split::All),
            }
        };
        let m = Manifest {
            hsi: path(&mut kv, "hsi").ok_or_else(|| Error::Config("manifest: missing required key \"hsi\"".into()))?,
            x: path(&mut kv, "x").ok_or_else(|| Error::Config("manifest: missing required key \"x\"".into()))?,
            labels: path(&mut kv, "labels"),
            hsi_bands: kv.require("hsi_bands")?,
            x_bands: kv.require("x_bands")?,
            classes: kv.require("classes")?,
            ignore: kv.get_or("ignore", -1)?,
            palette: path(&mut kv, "palette"),
            x_arith: kv
                .raw("x_arith")
                .map(|s| {
                    s.split(';')
                        .map(|t| BandTerm::parse(t.trim()))
                        .collect::<Result<Vec<_>>>()
                })
                .transpose()?,
            resample: match kv.raw("resample").as_deref() {
                None | Some("none") => false,
                Some("nearest") => true,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "resample must be none or nearest, got {other:?}"
                    )))
                }
            },
            normalize: kv.get_or("normalize", true)?,
            train: split(&mut kv, "train")?,
            test: split(&mut kv, "test")?,
        };
        kv.finish()?;
        if m.classes < 2 {
            return Err(Error::Config("manifest: classes must be ≥ 2".into()));
        }
        if (0..m.classes as i64).contains(&m.ignore) {
            return Err(Error::Config(format!(
                "manifest: ignore value {} collides with a class id",
                m.ignore
            )));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut s = String::new();
        s.push_str(&format!("hsi = {}\nx = {}\n", rel(&self.hsi), rel(&self.x)));
        if let Some(l) = &self.labels {
            s.push_str(&format!("labels = {}\n", rel(l)));
        }
        s.push_str(&format!(
            "hsi_bands = {}\nx_bands = {}\nclasses = {}\nignore = {}\n",
            self.hsi_bands, self.x_bands, self.classes, self.ignore
        ));
        if let Some(p) = &self.palette {
            s.push_str(&format!("palette = {}\n", rel(p)));
        }
        if let Some(terms) = &self.x_arith {
            let t: Vec<String> = terms
                .iter()
                .map(|t| match t {
                    BandTerm::Band(a) => a.to_string(),
                    BandTerm::Sum(a, b) => format!("{a}+{b}"),
                    BandTerm::Diff(a, b) => format!("{a}-{b}"),
                })
                .collect();
            s.push_str(&format!("x_arith = {}\n", t.join(";")));
        }
        if self.resample {
            s.push_str("resample = nearest\n");
        }
        s.push_str(&format!("normalize = {}\n", self.normalize));
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            match split {
                Split::All => {}
                Split::Rects(r) => {
                    let t: Vec<String> = r
                        .iter()
                        .map(|r| format!("{},{},{},{}", r.row, r.col, r.height, r.width))
                        .collect();
                    s.push_str(&format!("{name}_rects = {}\n", t.join("; ")));
                }
                Split::Mask(p) => s.push_str(&format!("{name}_mask = {}\n", rel(p))),
            }
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        crate::binio::write_file(path, self.to_text(base).as_bytes())
    }
}

/// Rasters and labels ready for training or inference.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub hsi: Raster,
    pub x: Raster,
    pub labels: Option<LabelMap>,
    pub classes: usize,
    pub ignore: i64,
    pub palette: Palette,
    pub train: Split,
    pub test: Split,
}

fn fit(r: Raster, h: usize, w: usize, resample: bool, what: &str, path: &Path) -> Result<Raster> {
    if (r.height, r.width) == (h, w) {
        Ok(r)
    } else if resample {
        r.resample_nearest(h, w)
    } else {
        Err(Error::format(
            path,
            format!(
                "{what} raster is {}×{} but the HSI raster is {h}×{w} (set resample = nearest)",
                r.height, r.width
            ),
        ))
    }
}

impl Dataset {
    pub fn load(m: &Manifest) -> Result<Self> {
        let mut hsi = Raster::read(&m.hsi)?;
        let (h, w) = (hsi.height, hsi.width);
        let mut x = fit(Raster::read(&m.x)?, h, w, m.resample, "x", &m.x)?;
        if let Some(terms) = &m.x_arith {
            x = band_arithmetic(&x, terms)?;
        }
        if hsi.bands != m.hsi_bands {
            return Err(Error::format(
                &m.hsi,
                format!("HSI raster has {} bands, manifest says {}", hsi.bands, m.hsi_bands),
            ));
        }
        if x.bands != m.x_bands {
            return Err(Error::format(
                &m.x,
                format!("X raster has {} bands, manifest says {}", x.bands, m.x_bands),
            ));
        }
        if m.normalize {
            hsi = normalize(&hsi);
            x = normalize(&x);
        }
        let labels = match &m.labels {
            None => None,
            Some(p) => {
                let l = LabelMap::read(p)?;
                let l = if (l.height, l.width) == (h, w) {
                    l
                } else if m.resample {
                    l.resample_nearest(h, w)
                } else {
                    return Err(Error::format(
                        p,
                        format!("label map is {}×{} but the HSI raster is {h}×{w}", l.height, l.width),
                    ));
                };
                if let Some(&bad) = l
                    .data
                    .iter()
                    .find(|&&v| v != m.ignore && !(0..m.classes as i64).contains(&v))
                {
                    return Err(Error::format(
                        p,
                        format!(
                            "label value {bad} is outside [0, {}) and is not the ignore value {}",
                            m.classes, m.ignore
                        ),
                    ));
                }
                Some(l)
            }
        };
        let palette = match &m.palette {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Palette::parse(&text).map_err(|e| Error::format(p, e.to_string()))?
            }
            None => Palette::generate(m.classes),
        };
        let ds = Dataset {
            hsi,
            x,
            labels,
            classes: m.classes,
            ignore: m.ignore,
            palette,
            train: m.train.clone(),
            test: m.test.clone(),
        };
        // Surface unreadable masks now rather than mid-training.
        if ds.labels.is_some() {
            ds.split_labels(&ds.train)?;
            ds.split_labels(&ds.test)?;
        }
        Ok(ds)
    }

    pub fn height(&self) -> usize {
        self.hsi.height
    }

    pub fn width(&self) -> usize {
        self.hsi.width
    }

    /// Labels restricted to a split; pixels outside it become `ignore`.
    pub fn split_labels(&self, split: &Split) -> Result<LabelMap> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("dataset has no label raster".into()))?;
        let (h, w) = (labels.height, labels.width);
        let keep: Box<dyn Fn(usize, usize) -> bool> = match split {
            Split::All => Box::new(|_, _| true),
            Split::Rects(rects) => {
                let rects = rects.clone();
                Box::new(move |r, c| rects.iter().any(|q| q.contains(r, c)))
            }
            Split::Mask(p) => {
                let mask = Raster::read(p)?;
                let mask = if (mask.height, mask.width) == (h, w) {
                    mask
                } else {
                    mask.resample_nearest(h, w)?
                };
                Box::new(move |r, c| mask.at(r, c, 0) != 0.0)
            }
        };
        let data = (0..h * w)
            .map(|i| {
                if keep(i / w, i % w) {
                    labels.data[i]
                } else {
                    self.ignore
                }
            })
            .collect();
        LabelMap::new(h, w, data)
    }

    pub fn train_labels(&self) -> Result<LabelMap> {
        self.split_labels(&self.train)
    }

    pub fn test_labels(&self) -> Result<LabelMap> {
        self.split_labels(&self.test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_resolves_paths_and_splits() {
        let text = "hsi = a.lgrs\nx = b.lgrs\nhsi_bands = 4\nx_bands = 1\nclasses = 3\n\
                    train_rects = 0,0,2,2; 2,2,1,1\ntest_mask = m.lgrs\nx_arith = 0-1\n";
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.hsi, Path::new("/data/a.lgrs"));
        assert_eq!(m.ignore, -1);
        assert_eq!(
            m.train,
            Split::Rects(vec![
                Rect {
                    row: 0,
                    col: 0,
                    height: 2,
                    width: 2
                },
                Rect {
                    row: 2,
                    col: 2,
                    height: 1,
                    width: 1
                }
            ])
        );
        assert_eq!(m.test, Split::Mask("/data/m.lgrs".into()));
        assert_eq!(m.x_arith, Some(vec![BandTerm::Diff(0, 1)]));
        let again = Manifest::parse(&m.to_text(Path::new("/data")), Path::new("/data")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_ignore() {
        let base = "hsi = a\nx = b\nhsi_bands = 1\nx_bands = 1\nclasses = 3\n";
        assert!(Manifest::parse(&format!("{base}colour = red\n"), Path::new(".")).is_err());
        assert!(Manifest::parse(&format!("{base}ignore = 2\n"), Path::new(".")).is_err());
        assert!(Manifest::parse("x = b\nhsi_bands = 1\nx_bands = 1\nclasses = 3\n", Path::new(".")).is_err());
    }

    #[test]
    fn dsm_minus_dem() {
        let r = Raster::new(1, 2, 2, vec![10.0, 4.0, 7.0, 7.0]).unwrap();
        let n = band_arithmetic(&r, &[BandTerm::Diff(0, 1)]).unwrap();
        assert_eq!(n.data, vec![6.0, 0.0]);
        assert!(band_arithmetic(&r, &[BandTerm::Band(2)]).is_err());
    }
}
