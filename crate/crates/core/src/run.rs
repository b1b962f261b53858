//! Run configuration files: model keys, training keys and a manifest path in
//! one key-value text file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::blocks::ConvVariant;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{Model, ModelConfig, ABLATION_LAYOUTS};
use crate::train::{argmax_map, compute_metrics, predict_scene, train_on_dataset, MetricsReport, TrainConfig};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Resolved against the config file's directory.
    pub manifest: Option<PathBuf>,
}

impl RunConfig {
    /// Parse with unknown keys rejected; missing keys take their defaults.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let manifest = kv.raw("manifest").map(|p| base.join(p));
        let model = ModelConfig::from_kv(&mut kv)?;
        let train = TrainConfig::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(RunConfig { model, train, manifest })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Every key with its effective value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(m) = &self.manifest {
            s.push_str(&format!("manifest = {}\n", m.display()));
        }
        s.push_str(&self.model.to_text());
        s.push_str(&self.train.to_text());
        s
    }

    /// Set both the parameter-init seed and the training seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Config("no manifest given (set `manifest` in the config or pass --manifest)".into()))
    }
}

/// Reject a dataset whose band or class counts differ from the model's.
pub fn check_compatible(cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    let pairs = [
        ("HSI bands", ds.hsi.bands, cfg.hsi_bands),
        ("X bands", ds.x.bands, cfg.x_bands),
        ("classes", ds.classes, cfg.num_classes),
    ];
    for (what, data, model) in pairs {
        if data != model {
            return Err(Error::Config(format!(
                "dataset has {data} {what} but the model is configured for {model}"
            )));
        }
    }
    Ok(())
}

/// Predict the whole scene and score it against the test split.
pub fn evaluate_test(model: &Model, ds: &Dataset, tile: usize, overlap: f64) -> Result<MetricsReport> {
    let logits = predict_scene(model, &ds.hsi, &ds.x, tile, overlap)?;
    let pred = argmax_map(&logits)?;
    compute_metrics(&pred.data, &ds.test_labels()?.data, ds.classes, ds.ignore)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Layout,
    ConvBlock,
    /// FEM and FIFM on/off; `fem` and `fifm` both name this axis.
    Fusion,
    Fraction,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layout" => Ok(AblationAxis::Layout),
            "convblock" => Ok(AblationAxis::ConvBlock),
            "fem" | "fifm" => Ok(AblationAxis::Fusion),
            "fraction" => Ok(AblationAxis::Fraction),
            other => Err(Error::Config(format!(
                "ablation axis must be layout, convblock, fem, fifm or fraction, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Layout => "layout",
            AblationAxis::ConvBlock => "convblock",
            AblationAxis::Fusion => "fem/fifm",
            AblationAxis::Fraction => "fraction",
        })
    }
}

pub const ABLATION_FRACTIONS: [f64; 4] = [1.0, 0.8, 0.6, 0.4];

/// Named configurations along one axis, all sharing seeds and budget.
pub fn ablation_variants(base: &RunConfig, axis: AblationAxis) -> Result<Vec<(String, RunConfig)>> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let mut out = Vec::new();
    match axis {
        AblationAxis::Layout => {
            for l in ABLATION_LAYOUTS {
                let mut c = base.clone();
                c.model = c.model.with_layout(l)?;
                out.push((l.to_string(), c));
            }
        }
        AblationAxis::ConvBlock => {
            for (name, v) in [
                ("MBConv", ConvVariant::MbConv),
                ("Fused-MBConv with SE", ConvVariant::WithSe),
                ("Fused-MBConv without SE", ConvVariant::Plain),
            ] {
                out.push((name.to_string(), with(&|c| c.model.conv_variant = v)));
            }
        }
        AblationAxis::Fusion => {
            for (name, fem, fifm) in [
                ("ConvViT", false, false),
                ("ConvViT+FEM", true, false),
                ("ConvViT+FIFM", false, true),
                ("ConvViT+FEM+FIFM", true, true),
            ] {
                out.push((
                    name.to_string(),
                    with(&|c| {
                        c.model.use_fem = fem;
                        c.model.use_fifm = fifm;
                    }),
                ));
            }
        }
        AblationAxis::Fraction => {
            for f in ABLATION_FRACTIONS {
                out.push((format!("{:.0}%", f * 100.0), with(&|c| c.train.train_fraction = f)));
            }
        }
    }
    for (_, c) in &out {
        c.model.validate()?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    pub metrics: MetricsReport,
}

/// Train the best checkpoint of one variant and score it on the test split.
pub fn run_variant(name: &str, cfg: &RunConfig, ds: &Dataset) -> Result<AblationRow> {
    check_compatible(&cfg.model, ds)?;
    let model = Model::build(&cfg.model)?;
    let (outcome, _) = train_on_dataset(model, ds, &cfg.train, |e| log::info!("{name}: {}", e.line()))?;
    let metrics = evaluate_test(&outcome.best_model, ds, cfg.train.tile, cfg.train.overlap)?;
    Ok(AblationRow {
        name: name.to_string(),
        params: outcome.best_model.numel(),
        metrics,
    })
}

/// Markdown table: one row per variant with OA, AA and kappa as percentages.
pub fn ablation_table(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut s = format!("| {axis} | Params | OA | AA | kappa |\n|---|---:|---:|---:|---:|\n");
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.name,
            r.params,
            crate::train::pct(m.oa),
            crate::train::pct(m.aa),
            crate::train::pct(m.kappa)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let c = RunConfig::parse("manifest = data/m.txt\nlr = 0.001\nlayout = C-C-C-T\n", Path::new("/r")).unwrap();
        assert_eq!(c.manifest.as_deref(), Some(Path::new("/r/data/m.txt")));
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.model.layout(), "C-C-C-T");
        assert_eq!(c.train.batch_size, 4);
        let again = RunConfig::parse(&c.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn ablation_axes_enumerate_their_variants() {
        let base = RunConfig {
            model: ModelConfig::toy(4, 1, 3),
            ..Default::default()
        };
        let names = |a| -> Vec<String> {
            ablation_variants(&base, a)
                .unwrap()
                .into_iter()
                .map(|(n, _)| n)
                .collect()
        };
        assert_eq!(names(AblationAxis::Layout), ABLATION_LAYOUTS.to_vec());
        assert_eq!(
            names(AblationAxis::ConvBlock),
            ["MBConv", "Fused-MBConv with SE", "Fused-MBConv without SE"]
        );
        let fusion = ablation_variants(&base, "fifm".parse().unwrap()).unwrap();
        let flags: Vec<_> = fusion
            .iter()
            .map(|(_, c)| (c.model.use_fem, c.model.use_fifm))
            .collect();
        assert_eq!(flags, [(false, false), (true, false), (false, true), (true, true)]);
        assert_eq!(names(AblationAxis::Fraction), ["100%", "80%", "60%", "40%"]);
        assert!("depth".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::parse("learning_rate = 0.1\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
    }
}
