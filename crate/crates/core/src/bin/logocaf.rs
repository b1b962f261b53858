use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use logocaf::checks::{self, Scope};
use logocaf::data::{synth_scene, Dataset, LabelMap, Manifest, Palette, Raster, Split, SynthSpec};
use logocaf::model::{checkpoint, BestRecord, Model, ModelConfig};
use logocaf::run::{self, AblationAxis, RunConfig};
use logocaf::tensor::Precision;
use logocaf::train::{
    argmax_map, compute_metrics, count_params_flops, labels_from_ppm, predict_scene, render_ppm, train_on_dataset,
    EpochLog,
};
use logocaf::Error;

#[derive(Parser, Debug)]
#[command(
    name = "logocaf",
    version,
    about = "Hyperspectral + X-modality segmentation: train, predict, evaluate"
)]
struct Cli {
    /// Run configuration (model, training and manifest keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the initialization and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint storage precision; compute is always f64.
    #[arg(long, global = true, default_value = "f64")]
    precision: Precision,
    /// Worker threads for tile-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the manifest's training split; writes a checkpoint and a run log.
    Train {
        /// Keep this share of the labelled training pixels per class.
        #[arg(long)]
        fraction: Option<f64>,
        /// Dataset manifest; overrides `manifest` in the config
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory for `model.lgcf` and `train.log`.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Tile, forward, stitch and render a classification map.
    Predict {
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest; overrides `manifest` in the config
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output map (binary PPM).
        #[arg(long)]
        out: PathBuf,
        /// Stitched logits as an LGRS raster (default: next to the map).
        #[arg(long)]
        logits: Option<PathBuf>,
        /// Tile side (default: the config's, capped at the scene size)
        #[arg(long)]
        tile: Option<usize>,
        /// Tile overlap ratio in [0, 1) (default: the config's)
        #[arg(long)]
        overlap: Option<f64>,
    },
    /// Score a map (PPM or 1-band LGRS) or logits (LGRS) against the test split.
    Evaluate {
        /// Predicted map or logits
        #[arg(long)]
        pred: PathBuf,
        /// Dataset manifest; overrides `manifest` in the config
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Reference labels: test, train or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// primitive, blocks, model or all.
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Write a seeded synthetic scene with manifest, palette and run config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        hsi_bands: usize,
        #[arg(long, default_value_t = 2)]
        x_bands: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
    },
    /// Train and score each variant along one axis under identical seeds.
    Ablate {
        /// layout, convblock, fem, fifm or fraction.
        #[arg(long)]
        axis: String,
        /// Dataset manifest; overrides `manifest` in the config
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter count and multiply-accumulates of one forward pass.
    Count {
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numerical(_) => 2,
                _ => 1,
            })
        }
    }
}

/// `Ok(false)` signals a numerical failure that is not an error value.
fn dispatch(cli: &Cli) -> logocaf::Result<bool> {
    match &cli.command {
        Command::Train {
            fraction,
            manifest,
            out,
        } => cmd_train(cli, *fraction, manifest.as_deref(), out),
        Command::Predict {
            checkpoint,
            manifest,
            out,
            logits,
            tile,
            overlap,
        } => cmd_predict(
            cli,
            checkpoint,
            manifest.as_deref(),
            out,
            logits.as_deref(),
            *tile,
            *overlap,
        ),
        Command::Evaluate {
            pred,
            manifest,
            split,
            out,
        } => cmd_evaluate(cli, pred, manifest.as_deref(), split, out.as_deref()),
        Command::Gradcheck { scope } => cmd_gradcheck(cli, scope),
        Command::Synth {
            out,
            size,
            hsi_bands,
            x_bands,
            classes,
            noise,
        } => cmd_synth(cli, out, *size, *hsi_bands, *x_bands, *classes, *noise),
        Command::Ablate { axis, manifest, out } => cmd_ablate(cli, axis, manifest.as_deref(), out.as_deref()),
        Command::Count { height, width } => cmd_count(cli, *height, *width),
    }
    .map(|()| true)
    .or_else(|e| match e {
        Failed::Numerical => Ok(false),
        Failed::Error(e) => Err(e),
    })
}

enum Failed {
    Numerical,
    Error(Error),
}

impl From<Error> for Failed {
    fn from(e: Error) -> Self {
        Failed::Error(e)
    }
}

type CmdResult = Result<(), Failed>;

/// Config file (or defaults) with command-line overrides applied.
fn run_config(cli: &Cli, manifest: Option<&Path>) -> logocaf::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(m) = manifest {
        cfg.manifest = Some(m.to_path_buf());
    }
    Ok(cfg)
}

fn load_dataset(path: &Path) -> logocaf::Result<Dataset> {
    let m = Manifest::read(path)?;
    Dataset::load(&m)
}

fn write_text(path: &Path, text: &str) -> logocaf::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::InvalidArgument(format!("{}: {e}", path.display()))
}

fn cmd_train(cli: &Cli, fraction: Option<f64>, manifest: Option<&Path>, out: &Path) -> CmdResult {
    let mut cfg = run_config(cli, manifest)?;
    if let Some(f) = fraction {
        cfg.train.train_fraction = f;
    }
    cfg.train.validate()?;
    let ds = load_dataset(cfg.manifest()?)?;
    run::check_compatible(&cfg.model, &ds)?;
    let model = Model::build(&cfg.model)?;
    info!("model: {} parameters, layout {}", model.numel(), cfg.model.layout());

    let mut log_text = String::new();
    for line in cfg.to_text().lines() {
        log_text.push_str(&format!("# {line}\n"));
    }
    log_text.push_str(&format!("# precision = {}\n", precision_name(cli.precision)));
    let (outcome, sub) = train_on_dataset(model, &ds, &cfg.train, |e: &EpochLog| info!("{}", e.line()))?;
    for (class, n) in &sub.kept {
        log_text.push_str(&format!("# train_pixels class {class} = {n}\n"));
    }
    for w in &sub.warnings {
        log::warn!("{w}");
        log_text.push_str(&format!("# warning: {w}\n"));
    }
    log_text.push_str(&format!(
        "# tiles: {} train, {} validation; {} steps\n",
        outcome.train_tiles, outcome.val_tiles, outcome.steps
    ));
    log_text.push_str(EpochLog::HEADER);
    log_text.push('\n');
    for e in &outcome.log {
        log_text.push_str(&e.line());
        log_text.push('\n');
    }
    let ckpt = out.join("model.lgcf");
    checkpoint::save(&ckpt, &outcome.best_model, cli.precision, outcome.best)?;
    write_text(&out.join("train.log"), &log_text)?;
    match outcome.best {
        Some(BestRecord { epoch, val_oa }) => {
            println!("best epoch {epoch}, validation OA {}", logocaf::train::pct(val_oa))
        }
        None => println!("no epochs run; saved the initial model"),
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn cmd_predict(
    cli: &Cli,
    ckpt: &Path,
    manifest: Option<&Path>,
    out: &Path,
    logits_path: Option<&Path>,
    tile: Option<usize>,
    overlap: Option<f64>,
) -> CmdResult {
    let cfg = run_config(cli, manifest)?;
    let model = checkpoint::load(ckpt)?.model;
    let ds = load_dataset(cfg.manifest()?)?;
    run::check_compatible(&model.config, &ds)?;
    // The configured tile is capped at the scene size; an explicit --tile is not.
    let tile = tile.unwrap_or_else(|| cfg.train.tile.min(ds.height().min(ds.width())));
    let overlap = overlap.unwrap_or(cfg.train.overlap);
    let logits = predict_scene(&model, &ds.hsi, &ds.x, tile, overlap)?;
    let map = argmax_map(&logits)?;
    let ppm = render_ppm(&map, &ds.palette, ds.ignore)?;
    write_bytes(out, &ppm)?;
    let lp = logits_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("lgrs"));
    Raster::from_tensor(&logits)?.write(&lp)?;
    println!("map: {}\nlogits: {}", out.display(), lp.display());
    if ds.labels.is_some() {
        if let Ok(r) = compute_metrics(&map.data, &ds.test_labels()?.data, ds.classes, ds.ignore) {
            println!("test OA = {}", logocaf::train::pct(r.oa));
        }
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> logocaf::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

/// Decode a prediction file by its magic: PPM map, 1-band label raster, or logits.
fn read_prediction(path: &Path, palette: &Palette, ignore: i64) -> logocaf::Result<LabelMap> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    if bytes.starts_with(b"P6") {
        return labels_from_ppm(&bytes, palette, ignore);
    }
    let r = Raster::decode(&bytes, path)?;
    if r.bands == 1 {
        LabelMap::from_raster(&r)
    } else {
        argmax_map(&r.to_tensor())
    }
}

fn cmd_evaluate(cli: &Cli, pred: &Path, manifest: Option<&Path>, split: &str, out: Option<&Path>) -> CmdResult {
    let cfg = run_config(cli, manifest)?;
    let ds = load_dataset(cfg.manifest()?)?;
    let split = match split {
        "test" => ds.test.clone(),
        "train" => ds.train.clone(),
        "all" => Split::All,
        other => return Err(Error::Config(format!("split must be test, train or all, got {other:?}")).into()),
    };
    let gt = ds.split_labels(&split)?;
    let p = read_prediction(pred, &ds.palette, ds.ignore)?;
    if (p.height, p.width) != (gt.height, gt.width) {
        return Err(Error::InvalidArgument(format!(
            "prediction is {}×{} but the reference labels are {}×{}",
            p.height, p.width, gt.height, gt.width
        ))
        .into());
    }
    let report = compute_metrics(&p.data, &gt.data, ds.classes, ds.ignore)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(o) = out {
        write_text(o, &text)?;
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, scope: &str) -> CmdResult {
    let scopes = match scope {
        "all" => Scope::ALL.to_vec(),
        s => vec![s.parse::<Scope>()?],
    };
    let seed = cli.seed.unwrap_or(0);
    let mut all = Vec::new();
    for s in scopes {
        let results = checks::run(s, seed)?;
        for r in &results {
            println!("{r}");
        }
        all.extend(results);
    }
    let failed = all.iter().filter(|r| !r.passed()).count();
    if let Some(w) = checks::worst(&all) {
        println!("worst: {w}");
    }
    println!("{} checks, {failed} failed", all.len());
    if failed > 0 {
        Err(Failed::Numerical)
    } else {
        Ok(())
    }
}

fn cmd_synth(
    cli: &Cli,
    out: &Path,
    size: usize,
    hsi_bands: usize,
    x_bands: usize,
    classes: usize,
    noise: f64,
) -> CmdResult {
    let seed = cli.seed.unwrap_or(0);
    let mut spec = SynthSpec::new(seed, size, hsi_bands, x_bands, classes);
    spec.noise = noise;
    let scene = synth_scene(&spec)?;
    scene.hsi.write(&out.join("hsi.lgrs"))?;
    scene.x.write(&out.join("x.lgrs"))?;
    scene.labels.write(&out.join("labels.lgrs"))?;
    write_text(&out.join("palette.txt"), &Palette::generate(classes).to_text())?;
    let manifest = Manifest {
        hsi: out.join("hsi.lgrs"),
        x: out.join("x.lgrs"),
        labels: Some(out.join("labels.lgrs")),
        hsi_bands,
        x_bands,
        classes,
        ignore: -1,
        palette: Some(out.join("palette.txt")),
        x_arith: None,
        resample: false,
        normalize: true,
        train: Split::All,
        test: Split::All,
    };
    manifest.write(&out.join("manifest.txt"))?;

    // A run config sized for the scene: toy model, short budget.
    let mut model = ModelConfig::toy(hsi_bands, x_bands, classes);
    model.seed = seed;
    let tile = if size >= 32 { 32 } else { size };
    let mut rc = RunConfig {
        model,
        manifest: None,
        ..Default::default()
    };
    rc.train.seed = seed;
    rc.train.lr = 3e-3;
    rc.train.tile = tile;
    rc.train.epochs = 100;
    rc.train.val_fraction = 0.0;
    rc.train.max_steps = Some(300);
    rc.train.weight_decay = 0.0;
    let text = format!("manifest = manifest.txt\n{}", rc.to_text());
    write_text(&out.join("run.cfg"), &text)?;
    println!(
        "wrote {size}×{size} scene ({hsi_bands}/{x_bands} bands, {classes} classes) to {}",
        out.display()
    );
    Ok(())
}

fn cmd_ablate(cli: &Cli, axis: &str, manifest: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let axis: AblationAxis = axis.parse()?;
    let base = run_config(cli, manifest)?;
    let ds = load_dataset(base.manifest()?)?;
    let mut rows = Vec::new();
    for (name, cfg) in run::ablation_variants(&base, axis)? {
        info!("variant {name}");
        rows.push(run::run_variant(&name, &cfg, &ds)?);
    }
    let table = run::ablation_table(axis, &rows);
    print!("{table}");
    if let Some(o) = out {
        write_text(o, &table)?;
    }
    Ok(())
}

fn cmd_count(cli: &Cli, height: Option<usize>, width: Option<usize>) -> CmdResult {
    let cfg = run_config(cli, None)?;
    let h = height.unwrap_or(cfg.train.tile);
    let w = width.unwrap_or(h);
    let model = Model::build(&cfg.model)?;
    let (params, macs) = count_params_flops(&model, h, w)?;
    println!("input = {h}x{w}\nparams = {params}\nmacs = {macs}");
    Ok(())
}
