use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::optim::{poly_lr, Adam, TrainConfig};
use crate::data::{cut_tiles, plan_tiles, stitch, subsample_train, Dataset, LabelMap, Raster, Subsample, TilePlan};
use crate::error::{Error, Result};
use crate::model::{BestRecord, Model};
use crate::nn::ParamStore;
use crate::tensor::{Tape, Tensor};

/// One training tile.
#[derive(Clone, Debug)]
pub struct Sample {
    pub origin: (usize, usize),
    pub hsi: Tensor,
    pub x: Tensor,
    pub labels: Vec<i64>,
}

/// Cut `plan`'s tiles out of the scene, dropping tiles without any labelled pixel.
pub fn make_samples(hsi: &Raster, x: &Raster, labels: &LabelMap, plan: &TilePlan, ignore: i64) -> Result<Vec<Sample>> {
    let label_field = Tensor::new(
        &[labels.height, labels.width, 1],
        labels.data.iter().map(|&v| v as f64).collect(),
    )?;
    let a = cut_tiles(&hsi.to_tensor(), plan)?;
    let b = cut_tiles(&x.to_tensor(), plan)?;
    let l = cut_tiles(&label_field, plan)?;
    Ok(a.into_iter()
        .zip(b)
        .zip(l)
        .map(|(((origin, hsi), (_, x)), (_, lab))| Sample {
            origin,
            hsi,
            x,
            labels: lab.data().iter().map(|&v| v as i64).collect(),
        })
        .filter(|s| s.labels.iter().any(|&v| v != ignore))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_oa: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,step,loss,lr,val_oa";

    pub fn line(&self) -> String {
        format!(
            "{},{},{:.9},{:.6e},{:.6}",
            self.epoch, self.step, self.loss, self.lr, self.val_oa
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation OA (latest on ties).
    pub best_model: Model,
    pub best: Option<BestRecord>,
    pub final_model: Model,
    pub log: Vec<EpochLog>,
    pub steps: usize,
    pub train_tiles: usize,
    pub val_tiles: usize,
}

fn sample_grads(model: &Model, s: &Sample, weight: f64, ignore: i64) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let a = tape.constant(s.hsi.clone());
    let b = tape.constant(s.x.clone());
    let logits = model.forward(&mut tape, &p, a, b)?;
    let loss = tape.cross_entropy(logits, &s.labels, ignore)?;
    let value = tape.value(loss).data()[0];
    let scaled = tape.scale(loss, weight);
    let g = tape.backward(scaled)?;
    let grads = model.params.ids().map(|id| g.get(p.var(id)).cloned()).collect();
    Ok((value, grads))
}

fn accumulate(store: &mut ParamStore, grads: &[Option<Tensor>]) {
    for (p, g) in store.iter_mut().zip(grads) {
        if let Some(g) = g {
            p.grad.add_assign(g);
        }
    }
}

/// Pixel accuracy of `model` over the labelled pixels of `samples`.
pub fn samples_accuracy(model: &Model, samples: &[&Sample], ignore: i64) -> Result<f64> {
    let counts = samples
        .par_iter()
        .map(|s| -> Result<(usize, usize)> {
            let logits = model.predict(&s.hsi, &s.x)?;
            let pred = logits.argmax_last();
            let mut hit = 0;
            let mut n = 0;
            for (&p, &l) in pred.iter().zip(&s.labels) {
                if l != ignore {
                    n += 1;
                    hit += usize::from(p as i64 == l);
                }
            }
            Ok((hit, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let (hit, n) = counts.iter().fold((0, 0), |(a, b), (h, m)| (a + h, b + m));
    if n == 0 {
        return Err(Error::InvalidArgument("no labelled pixels to evaluate".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// Epoch loop over seeded-shuffled tiles with Adam and a poly schedule.
///
/// A seeded `val_fraction` share of the tiles (at least one when there are
/// two or more) is held out to pick the best epoch; with no held-out tiles
/// the training tiles are scored instead. `on_epoch` sees every log entry as
/// it is produced.
pub fn train(
    model: Model,
    samples: Vec<Sample>,
    cfg: &TrainConfig,
    ignore: i64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training tiles with labelled pixels".into()));
    }
    for s in &samples {
        let [h, w, _] = s.hsi.shape()[..] else {
            unreachable!("tiles are h×w×c")
        };
        model.config.check_input(h, w)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = samples.len();
    let n_val = if n >= 2 && cfg.val_fraction > 0.0 {
        ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut val_idx = perm[..n_val].to_vec();
    val_idx.sort_unstable();
    let mut train_idx = perm[n_val..].to_vec();
    train_idx.sort_unstable();
    let val_set: Vec<&Sample> = if n_val == 0 {
        train_idx.iter().map(|&i| &samples[i]).collect()
    } else {
        val_idx.iter().map(|&i| &samples[i]).collect()
    };

    let batches = train_idx.len().div_ceil(cfg.batch_size);
    let mut total = cfg.epochs * batches;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }

    let mut model = model;
    let mut adam = Adam::new(&model.params);
    let mut best_params = model.params.clone();
    let mut best: Option<BestRecord> = None;
    let mut log = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        if step >= total {
            break;
        }
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches_run = 0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            lr = poly_lr(step, total, cfg.lr, cfg.poly_power);
            let weight = 1.0 / batch.len() as f64;
            let results = batch
                .par_iter()
                .map(|&i| sample_grads(&model, &samples[i], weight, ignore))
                .collect::<Result<Vec<_>>>()?;
            model.params.zero_grads();
            let mut batch_loss = 0.0;
            for (loss, grads) in &results {
                batch_loss += loss * weight;
                accumulate(&mut model.params, grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {batch_loss} at step {step} (epoch {epoch})"
                )));
            }
            adam.update(&mut model.params, lr, cfg.weight_decay);
            loss_sum += batch_loss;
            batches_run += 1;
            step += 1;
        }
        if batches_run == 0 {
            break 'epochs;
        }
        let val_oa = samples_accuracy(&model, &val_set, ignore)?;
        let entry = EpochLog {
            epoch,
            step,
            loss: loss_sum / batches_run as f64,
            lr,
            val_oa,
        };
        on_epoch(&entry);
        log.push(entry);
        if best.is_none_or(|b| val_oa >= b.val_oa) {
            best = Some(BestRecord { epoch, val_oa });
            best_params = model.params.clone();
        }
    }
    let mut best_model = model.clone();
    best_model.params = best_params;
    Ok(TrainOutcome {
        best_model,
        best,
        final_model: model,
        log,
        steps: step,
        train_tiles: train_idx.len(),
        val_tiles: n_val,
    })
}

/// Tile the dataset's training labels (subsampled per class) and train.
///
/// The returned [`Subsample`] holds the retained pixel count per class.
pub fn train_on_dataset(
    model: Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(TrainOutcome, Subsample)> {
    cfg.validate()?;
    let sub = subsample_train(&ds.train_labels()?, cfg.train_fraction, cfg.seed, ds.ignore)?;
    model.config.check_input(cfg.tile, cfg.tile)?;
    let plan = plan_tiles(ds.height(), ds.width(), cfg.tile, cfg.overlap)?;
    let samples = make_samples(&ds.hsi, &ds.x, &sub.labels, &plan, ds.ignore)?;
    Ok((train(model, samples, cfg, ds.ignore, on_epoch)?, sub))
}

/// Tile, forward, and average overlapping logits over a whole scene.
pub fn predict_scene(model: &Model, hsi: &Raster, x: &Raster, tile: usize, overlap: f64) -> Result<Tensor> {
    if (hsi.height, hsi.width) != (x.height, x.width) {
        return Err(Error::shape(
            "predict_scene",
            &[hsi.height, hsi.width],
            &[x.height, x.width],
        ));
    }
    if hsi.bands != model.config.hsi_bands || x.bands != model.config.x_bands {
        return Err(Error::Config(format!(
            "scene has {}/{} HSI/X bands but the model expects {}/{}",
            hsi.bands, x.bands, model.config.hsi_bands, model.config.x_bands
        )));
    }
    model.config.check_input(tile, tile)?;
    let plan = plan_tiles(hsi.height, hsi.width, tile, overlap)?;
    let a = cut_tiles(&hsi.to_tensor(), &plan)?;
    let b = cut_tiles(&x.to_tensor(), &plan)?;
    let tiles = a
        .par_iter()
        .zip(b.par_iter())
        .map(|((origin, ta), (_, tb))| Ok((*origin, model.predict(ta, tb)?)))
        .collect::<Result<Vec<_>>>()?;
    stitch(&tiles, hsi.height, hsi.width)
}

/// Per-pixel argmax of `H×W×K` logits.
pub fn argmax_map(logits: &Tensor) -> Result<LabelMap> {
    let [h, w, _] = logits.shape()[..] else {
        return Err(Error::InvalidArgument(format!(
            "logits must be H×W×K, got {:?}",
            logits.shape()
        )));
    };
    LabelMap::new(h, w, logits.argmax_last().into_iter().map(|v| v as i64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SynthSpec};
    use crate::model::ModelConfig;

    fn tiny() -> (Model, Vec<Sample>) {
        let scene = synth_scene(&SynthSpec::new(2, 16, 3, 1, 3)).unwrap();
        let model = Model::build(&ModelConfig::toy(3, 1, 3)).unwrap();
        let plan = plan_tiles(16, 16, 8, 0.0).unwrap();
        let samples = make_samples(&scene.hsi, &scene.x, &scene.labels, &plan, -1).unwrap();
        (model, samples)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            epochs,
            batch_size: 2,
            tile: 8,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (model, samples) = tiny();
        let out = train(model.clone(), samples, &cfg(0), -1, |_| {}).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.best, None);
        for (a, b) in out.best_model.params.iter().zip(model.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn runs_are_deterministic_and_log_every_epoch() {
        let (model, samples) = tiny();
        assert_eq!(samples.len(), 4);
        let a = train(model.clone(), samples.clone(), &cfg(3), -1, |_| {}).unwrap();
        let b = train(model, samples, &cfg(3), -1, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 3);
        assert_eq!((a.train_tiles, a.val_tiles), (3, 1));
        assert_eq!(a.steps, 6);
        assert!(a.log.windows(2).all(|w| w[1].lr <= w[0].lr));
        for (p, q) in a.final_model.params.iter().zip(b.final_model.params.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn max_steps_caps_training() {
        let (model, samples) = tiny();
        let c = TrainConfig {
            max_steps: Some(3),
            ..cfg(10)
        };
        let out = train(model, samples, &c, -1, |_| {}).unwrap();
        assert_eq!(out.steps, 3);
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn predict_scene_matches_single_tile_forward() {
        let scene = synth_scene(&SynthSpec::new(5, 16, 3, 1, 3)).unwrap();
        let model = Model::build(&ModelConfig::toy(3, 1, 3)).unwrap();
        let whole = predict_scene(&model, &scene.hsi, &scene.x, 16, 0.5).unwrap();
        assert_eq!(
            whole,
            model.predict(&scene.hsi.to_tensor(), &scene.x.to_tensor()).unwrap()
        );
        assert!(matches!(
            predict_scene(&model, &scene.hsi, &scene.x, 6, 0.5),
            Err(Error::Divisibility(_))
        ));
        assert_eq!(argmax_map(&whole).unwrap().data.len(), 256);
    }
}
