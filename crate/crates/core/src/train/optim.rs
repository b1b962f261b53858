use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub poly_power: f64,
    pub seed: u64,
    pub train_fraction: f64,
    /// Square training tile side.
    pub tile: usize,
    pub overlap: f64,
    /// Share of training tiles held out for best-checkpoint selection.
    pub val_fraction: f64,
    /// Stop after this many optimizer steps (the schedule still spans all epochs
    /// unless this is smaller, in which case it spans `max_steps`).
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 6e-5,
            weight_decay: 0.01,
            batch_size: 4,
            epochs: 500,
            poly_power: 0.9,
            seed: 0,
            train_fraction: 1.0,
            tile: 128,
            overlap: 0.5,
            val_fraction: 0.1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay must be ≥ 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch size must be ≥ 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return fail(format!(
                "train fraction must lie in (0, 1], got {}",
                self.train_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.val_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return fail(format!("overlap must lie in [0, 1), got {}", self.overlap));
        }
        if self.tile == 0 {
            return fail("tile must be ≥ 1".into());
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be ≥ 1 when given".into());
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            lr: kv.get_or("lr", d.lr)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            poly_power: kv.get_or("poly_power", d.poly_power)?,
            seed: kv.get_or("train_seed", d.seed)?,
            train_fraction: kv.get_or("train_fraction", d.train_fraction)?,
            tile: kv.get_or("tile", d.tile)?,
            overlap: kv.get_or("overlap", d.overlap)?,
            val_fraction: kv.get_or("val_fraction", d.val_fraction)?,
            max_steps: kv.get("max_steps")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "lr = {:?}\nweight_decay = {:?}\nbatch_size = {}\nepochs = {}\npoly_power = {:?}\ntrain_seed = {}\n\
             train_fraction = {:?}\ntile = {}\noverlap = {:?}\nval_fraction = {:?}\n",
            self.lr,
            self.weight_decay,
            self.batch_size,
            self.epochs,
            self.poly_power,
            self.seed,
            self.train_fraction,
            self.tile,
            self.overlap,
            self.val_fraction
        );
        if let Some(m) = self.max_steps {
            s.push_str(&format!("max_steps = {m}\n"));
        }
        s
    }
}

/// `base · (1 − step/total)^power`.
pub fn poly_lr(step: usize, total: usize, base: f64, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = 1.0 - (step.min(total) as f64 / total as f64);
    base * frac.powf(power)
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)` using each parameter's `grad`.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (val, grad) = (p.value.data_mut(), p.grad.data());
            for (((x, &g), m), v) in val.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *x -= lr * (mh / (vh.sqrt() + self.eps) + weight_decay * *x);
            }
        }
    }
}
