//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the report reads top to bottom;
//! exits non-zero when any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use logocaf::blocks::{naive_attention, ConvVariant, Emsa, FusedMbConv, TransformerBlock, ATTENTION_SCORES_TAG};
use logocaf::checks::{self, Scope};
use logocaf::data::{cut_tiles, normalize, plan_tiles, stitch, synth_scene, Dataset, Palette, Split, SynthSpec};
use logocaf::fem::Fem;
use logocaf::fifm::Fifm;
use logocaf::model::{checkpoint, Model, ModelConfig, ABLATION_LAYOUTS};
use logocaf::nn::{evaluate, Init, Linear, ParamStore};
use logocaf::tensor::{Precision, Tape};
use logocaf::train::{
    argmax_map, compute_metrics, make_samples, predict_scene, train, train_on_dataset, MetricsReport, TrainConfig,
};
use logocaf::{Result, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn project(store: &ParamStore, lin: &Linear, x: &Tensor) -> Result<Tensor> {
    evaluate(store, &[x], |t, p, v| lin.forward(t, p, v[0]))
}

fn attention_oracle() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let heads = [1, 2, 4][seed as usize % 3];
        let c = heads * rng.gen_range(1..=16 / heads);
        let mut store = ParamStore::new();
        let e = Emsa::new(&mut Init::new(&mut store, seed), "attn", c, heads, 1)?;
        for lin in [&e.key_reduce, &e.value_reduce, &e.output] {
            *store.value_mut(lin.weight) = Tensor::eye(c);
            if let Some(b) = lin.bias {
                store.value_mut(b).data_mut().fill(0.0);
            }
        }
        // Nonzero query/value biases so they are exercised too.
        for b in [e.query.bias, e.value.bias].into_iter().flatten() {
            *store.value_mut(b) = Tensor::randn(&[c], &mut rng);
        }
        let x = Tensor::randn(&[h, w, c], &mut rng);
        let tokens = x.reshape(&[h * w, c])?;
        let (q, k, v) = (
            project(&store, &e.query, &tokens)?,
            project(&store, &e.key, &tokens)?,
            project(&store, &e.value, &tokens)?,
        );
        let got = e.apply(&store, &x)?.reshape(&[h * w, c])?;
        let d = c / heads;
        let n = h * w;
        let cols = |t: &Tensor, j: usize| -> Result<Tensor> {
            let data = (0..n)
                .flat_map(|i| t.data()[i * c + j * d..i * c + (j + 1) * d].to_vec())
                .collect();
            Tensor::new(&[n, d], data)
        };
        for j in 0..heads {
            let want = naive_attention(&cols(&q, j)?, &cols(&k, j)?, &cols(&v, j)?)?;
            worst = worst.max(cols(&got, j)?.max_abs_diff(&want));
        }
    }
    outcome(worst < 1e-5, format!("max abs diff {worst:.2e} over 20 inputs"))
}

fn routing_oracle() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let s = 1 + seed as usize % 2;
        let h = s * rng.gen_range(1..=8 / s);
        let w = s * rng.gen_range(1..=8 / s);
        let c = rng.gen_range(1..=8);
        let mut store = ParamStore::new();
        let f = Fifm::new(&mut Init::new(&mut store, seed), "fifm", c, c, s, s * s)?;
        let a = Tensor::randn(&[h, w, c], &mut rng);
        let b = Tensor::randn(&[h, w, c], &mut rng);
        let got = f.apply(&store, &a, &b)?;

        let tok = |t: Tensor| t.reshape(&[h * w, c]);
        let qa = tok(project(&store, &f.hsi.query, &a)?)?;
        let ka = tok(project(&store, &f.hsi.key, &a)?)?;
        let va = tok(project(&store, &f.hsi.value, &a)?)?;
        let qb = tok(project(&store, &f.x.query, &b)?)?;
        let kb = tok(project(&store, &f.x.key, &b)?)?;
        let vb = tok(project(&store, &f.x.value, &b)?)?;
        // Each modality's queries attend over its own keys and read the other's values.
        let oa = naive_attention(&qa, &ka, &vb)?.reshape(&[h, w, c])?;
        let ob = naive_attention(&qb, &kb, &va)?.reshape(&[h, w, c])?;
        let want = evaluate(&store, &[&oa, &ob], |t, p, v| {
            let cat = t.concat(&[v[0], v[1]], 2)?;
            f.ffn.forward(t, p, cat)
        })?;
        worst = worst.max(got.max_abs_diff(&want));
    }
    outcome(
        worst < 1e-5,
        format!("max abs diff {worst:.2e} over 20 inputs, s in {{1,2}}"),
    )
}

fn gradient_suite() -> Result<Outcome> {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for scope in Scope::ALL {
        let results = checks::run(scope, 0)?;
        let failed = results.iter().filter(|r| !r.passed()).count();
        pass &= failed == 0;
        let worst = checks::worst(&results).map(|r| r.report.max_rel_error).unwrap_or(0.0);
        lines.push(format!(
            "{scope} {}/{} (worst {worst:.1e})",
            results.len() - failed,
            results.len()
        ));
        for r in results.iter().filter(|r| !r.passed()) {
            eprintln!("    {r}");
        }
    }
    let t = start.elapsed();
    pass &= t < Duration::from_secs(300);
    outcome(pass, format!("{}; {:.1}s", lines.join(", "), t.as_secs_f64()))
}

fn fem_quarter() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (h, w, c, r) in [(3, 5, 4, 2), (8, 8, 16, 8), (1, 1, 2, 1)] {
        let mut store = ParamStore::new();
        let f = Fem::new(&mut Init::new(&mut store, 1), "fem", c, r)?;
        store.zero_values("");
        let a = Tensor::randn(&[h, w, c], &mut rng);
        let b = Tensor::randn(&[h, w, c], &mut rng);
        let (ya, yb) = f.apply(&store, &a, &b)?;
        worst = worst.max(ya.max_abs_diff(&a.map(|v| 0.25 * v)));
        worst = worst.max(yb.max_abs_diff(&b.map(|v| 0.25 * v)));
    }
    outcome(worst <= 1e-12, format!("max abs diff {worst:.2e}"))
}

fn residual_identities() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();
    for variant in [ConvVariant::Plain, ConvVariant::WithSe, ConvVariant::MbConv] {
        let mut store = ParamStore::new();
        let b = FusedMbConv::new(&mut Init::new(&mut store, 2), "conv", 8, variant)?;
        store.zero_values("");
        let x = Tensor::randn(&[6, 5, 8], &mut rng);
        if b.apply(&store, &x)? != x {
            failures.push(variant.to_string());
        }
    }
    for (heads, r) in [(1, 1), (2, 2), (4, 4)] {
        let mut store = ParamStore::new();
        let b = TransformerBlock::new(&mut Init::new(&mut store, 3), "tb", 8, heads, r)?;
        store.zero_values("");
        let x = Tensor::randn(&[4, 4, 8], &mut rng);
        if b.apply(&store, &x)? != x {
            failures.push(format!("transformer heads={heads} R={r}"));
        }
    }
    if failures.is_empty() {
        outcome(true, "3 conv variants and 3 transformer configs bit-exact")
    } else {
        outcome(false, format!("not identities: {}", failures.join(", ")))
    }
}

fn score_macs(side: usize, r: usize) -> Result<u64> {
    let mut store = ParamStore::new();
    let e = Emsa::new(&mut Init::new(&mut store, 0), "attn", 8, 2, r)?;
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::zeros(&[side, side, 8]));
    e.forward(&mut tape, &p, x)?;
    Ok(tape.tagged_macs(ATTENTION_SCORES_TAG))
}

fn complexity() -> Result<Outcome> {
    let n_ratio = score_macs(16, 4)? as f64 / score_macs(8, 4)? as f64;
    let r_ratio = score_macs(16, 1)? as f64 / score_macs(16, 4)? as f64;
    outcome(
        n_ratio == 16.0 && r_ratio == 4.0,
        format!("N 256/64 at R=4: {n_ratio}; R 1/4 at N=256: {r_ratio}"),
    )
}

fn overfit_oa(cfg: ModelConfig) -> Result<(f64, usize, Duration)> {
    let start = Instant::now();
    let scene = synth_scene(&SynthSpec::new(7, 64, 8, 2, 4))?;
    let (hsi, x) = (normalize(&scene.hsi), normalize(&scene.x));
    let tc = TrainConfig {
        lr: 3e-3,
        weight_decay: 0.0,
        batch_size: 4,
        epochs: 1000,
        tile: 32,
        overlap: 0.5,
        val_fraction: 0.0,
        max_steps: Some(300),
        ..Default::default()
    };
    let plan = plan_tiles(64, 64, tc.tile, tc.overlap)?;
    let samples = make_samples(&hsi, &x, &scene.labels, &plan, -1)?;
    let out = train(Model::build(&cfg)?, samples, &tc, -1, |_| {})?;
    let logits = predict_scene(&out.final_model, &hsi, &x, tc.tile, tc.overlap)?;
    let pred = argmax_map(&logits)?;
    let m = compute_metrics(&pred.data, &scene.labels.data, 4, -1)?;
    Ok((m.oa, out.steps, start.elapsed()))
}

fn overfit() -> Result<Outcome> {
    let base = ModelConfig::toy(8, 2, 4);
    let variants = [
        ("full", base.clone(), 0.95),
        (
            "no-FEM",
            ModelConfig {
                use_fem: false,
                ..base.clone()
            },
            0.90,
        ),
        (
            "no-FIFM",
            ModelConfig {
                use_fifm: false,
                ..base
            },
            0.90,
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, cfg, need) in variants {
        let (oa, steps, t) = overfit_oa(cfg)?;
        pass &= oa >= need && steps <= 300 && t < Duration::from_secs(300);
        parts.push(format!("{name} OA {oa:.4} ({steps} steps, {:.0}s)", t.as_secs_f64()));
    }
    outcome(pass, parts.join("; "))
}

fn metrics_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(2..=8);
        let m: Vec<Vec<u64>> = (0..k)
            .map(|_| {
                (0..k)
                    .map(|_| if rng.gen_bool(0.2) { 0 } else { rng.gen_range(0..500) })
                    .collect()
            })
            .collect();
        if m.iter().flatten().sum::<u64>() == 0 {
            continue;
        }
        let got = MetricsReport::from_confusion(m.clone())?;
        // Direct formulas in a different evaluation order.
        let n: f64 = m.iter().flatten().map(|&v| v as f64).sum();
        let mut agree = 0.0;
        let mut chance = 0.0;
        let mut pa_sum = 0.0;
        let mut pa_n = 0.0;
        for i in 0..k {
            agree += m[i][i] as f64;
            let row: f64 = m[i].iter().map(|&v| v as f64).sum();
            let col: f64 = m.iter().map(|r| r[i] as f64).sum();
            chance += (row / n) * (col / n);
            let pa = (row > 0.0).then(|| m[i][i] as f64 / row);
            if let Some(p) = pa {
                pa_sum += p;
                pa_n += 1.0;
            }
            let d = match (pa, got.pa[i]) {
                (Some(a), Some(b)) => (a - b).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            worst = worst.max(d);
        }
        let oa = agree / n;
        let kappa = if chance < 1.0 {
            (oa - chance) / (1.0 - chance)
        } else {
            1.0
        };
        worst = worst
            .max((got.oa - oa).abs())
            .max((got.aa - pa_sum / pa_n).abs())
            .max((got.kappa - kappa).abs());
    }
    let hand = MetricsReport::from_confusion(vec![vec![2, 0], vec![1, 1]])?;
    let hand_ok = (hand.oa - 0.75).abs() < 1e-12 && (hand.kappa - 0.5).abs() < 1e-12;
    outcome(
        worst < 1e-12 && hand_ok,
        format!(
            "max diff {worst:.1e} on 100 matrices; hand case OA {} kappa {}",
            hand.oa, hand.kappa
        ),
    )
}

fn tiling() -> Result<Outcome> {
    let (h, w, t) = (349usize, 1905usize, 128usize);
    let plan = plan_tiles(h, w, t, 0.5)?;
    // Origins every 64 pixels plus a final tile flush with each border.
    let axis = |len: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..).map(|i| i * 64).take_while(|&o| o + t <= len).collect();
        if *v.last().unwrap() + t < len {
            v.push(len - t);
        }
        v
    };
    let mut want = Vec::new();
    for &r in &axis(h) {
        for &c in &axis(w) {
            want.push((r, c));
        }
    }
    let mut got = plan.origins.clone();
    got.sort_unstable();
    want.sort_unstable();

    let small = plan_tiles(40, 70, 16, 0.5)?;
    let field = Tensor::full(&[40, 70, 3], 1.75);
    let stitched = stitch(&cut_tiles(&field, &small)?, 40, 70)?;
    let identity = stitched == field;
    outcome(
        plan.origins.len() == 145 && got == want && identity,
        format!(
            "{} tiles, oracle match {}, constant stitch exact {identity}",
            plan.origins.len(),
            got == want
        ),
    )
}

fn layout_matrix() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut parts = Vec::new();
    let mut pass = true;
    for layout in ABLATION_LAYOUTS {
        let cfg = ModelConfig::toy(4, 2, 3).with_layout(layout)?;
        let model = Model::build(&cfg)?;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let a = tape.constant(Tensor::randn(&[32, 32, 4], &mut rng));
        let b = tape.constant(Tensor::randn(&[32, 32, 2], &mut rng));
        let logits = model.forward(&mut tape, &p, a, b)?;
        let shape_ok = tape.shape(logits) == [32, 32, 3];
        let loss = tape.mean(logits);
        let grads = tape.backward(loss)?;
        let grads_ok = model
            .params
            .ids()
            .all(|id| grads.get(p.var(id)).is_some_and(|g| g.is_finite()));
        pass &= shape_ok && grads_ok;
        parts.push(format!("{layout} {}", if shape_ok && grads_ok { "ok" } else { "bad" }));
    }
    for bad in ["T-C-C-C", "C-T-C-T", "T-T-T-C"] {
        let rejected = ModelConfig::toy(4, 2, 3)
            .with_layout(bad)
            .and_then(|c| Model::build(&c))
            .is_err();
        pass &= rejected;
        parts.push(format!("{bad} {}", if rejected { "rejected" } else { "accepted" }));
    }
    outcome(pass, parts.join(", "))
}

fn small_dataset() -> Result<Dataset> {
    let scene = synth_scene(&SynthSpec::new(11, 32, 4, 1, 3))?;
    Ok(Dataset {
        hsi: normalize(&scene.hsi),
        x: normalize(&scene.x),
        labels: Some(scene.labels),
        classes: 3,
        ignore: -1,
        palette: Palette::generate(3),
        train: Split::All,
        test: Split::All,
    })
}

fn determinism() -> Result<Outcome> {
    let ds = small_dataset()?;
    let mut cfg = ModelConfig::toy(4, 1, 3);
    cfg.seed = 5;
    let tc = TrainConfig {
        lr: 3e-3,
        batch_size: 2,
        epochs: 4,
        tile: 16,
        seed: 5,
        train_fraction: 0.8,
        ..Default::default()
    };
    let run = || -> Result<(Vec<f64>, Vec<u8>, Vec<u8>)> {
        let (out, _) = train_on_dataset(Model::build(&cfg)?, &ds, &tc, |_| {})?;
        let losses = out.log.iter().map(|e| e.loss).collect();
        let best = checkpoint::encode(&out.best_model, Precision::F64, out.best)?;
        let last = checkpoint::encode(&out.final_model, Precision::F32, None)?;
        Ok((losses, best, last))
    };
    let (a, b) = (run()?, run()?);
    let same_loss = a.0.iter().map(|v| v.to_bits()).eq(b.0.iter().map(|v| v.to_bits()));
    outcome(
        same_loss && a.1 == b.1 && a.2 == b.2,
        format!(
            "{} epochs; losses identical {same_loss}; checkpoints identical {}",
            a.0.len(),
            a.1 == b.1 && a.2 == b.2
        ),
    )
}

fn checkpoint_round_trip() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut model = Model::build(&ModelConfig::toy(4, 2, 3))?;
    // Move off the initialization so every parameter carries arbitrary bits.
    for p in model.params.iter_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.05 * rng.gen::<f64>());
    }
    let a = Tensor::randn(&[16, 16, 4], &mut rng);
    let b = Tensor::randn(&[16, 16, 2], &mut rng);
    let before = model.predict(&a, &b)?;
    let dir = tempfile::tempdir().expect("temporary directory");
    let path = dir.path().join("m.lgcf");
    checkpoint::save(&path, &model, Precision::F64, None)?;
    let loaded = checkpoint::load(&path)?;
    let after = loaded.model.predict(&a, &b)?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let exact = bits(&before) == bits(&after);
    let reencoded =
        checkpoint::encode(&loaded.model, Precision::F64, None)? == std::fs::read(&path).unwrap_or_default();
    outcome(
        exact && reencoded,
        format!("forward bit-identical {exact}; re-encode identical {reencoded}"),
    )
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 12] = [
        ("attention oracle", attention_oracle),
        ("routing oracle", routing_oracle),
        ("gradient suite", gradient_suite),
        ("FEM zero parameters", fem_quarter),
        ("residual identities", residual_identities),
        ("attention score MACs", complexity),
        ("overfit", overfit),
        ("metrics oracle", metrics_oracle),
        ("tiling", tiling),
        ("layout matrix", layout_matrix),
        ("determinism", determinism),
        ("checkpoint round-trip", checkpoint_round_trip),
    ];
    // A name filter as the first free argument selects criteria.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
