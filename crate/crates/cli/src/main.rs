mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scd_core::cam::{self, Cam, IGNORE};
use scd_core::data::{self, SyntheticSpec};
use scd_core::gradcheck;
use scd_core::metrics::ConfusionMatrix;
use scd_core::model::Model;
use scd_core::pnm;
use scd_core::resample;
use scd_core::tensor::Tensor;
use scd_core::train::{self, TrainConfig, Variant};
use scd_core::varm::{self, VarmConfig};
use scd_core::Error;

/// Exit codes.
const EXIT_CHECK: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "scd", version, about = "Weakly-supervised segmentation on synthetic shapes")]
#[command(after_help = "Exit codes: 0 success, 1 check failure, 2 usage or input error, 3 numeric failure.\n\
Worker threads come from SCD_THREADS (default 1).")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shapes dataset.
    Gen(GenArgs),
    /// Train a model and write checkpoint, loss log and metrics.
    Train(TrainArgs),
    /// Refine a label map with the variation-aware filter.
    Refine(RefineArgs),
    /// Evaluate a checkpoint or a directory of predicted masks.
    Eval(EvalArgs),
    /// Finite-difference check of every training loss.
    Gradcheck(GradcheckArgs),
    /// Write CAM heatmaps and a segmentation overlay for one image.
    Render(RenderArgs),
    /// Train every ablation variant over several seeds.
    Ablation(AblationArgs),
    /// Print every config key with its default.
    Defaults,
}

#[derive(Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Spec file of `gen.*` keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of images [default: 200].
    #[arg(long)]
    n: Option<usize>,
    /// Dataset seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Square image size [default: 64].
    #[arg(long)]
    size: Option<usize>,
    /// Number of classes [default: 3].
    #[arg(long)]
    classes: Option<usize>,
}

fn train_help() -> String {
    format!("Config keys and defaults:\n{}", config::describe(&config::train_keys(), &TrainConfig::default()))
}

#[derive(Args)]
#[command(after_help = train_help())]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt, loss.csv, metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Config file of `key = value` lines (see `scd defaults`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Evaluation dataset [default: the training set].
    #[arg(long)]
    val: Option<PathBuf>,
    /// Optimizer steps [default: 3000].
    #[arg(long)]
    iterations: Option<usize>,
    /// Seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RefineArgs {
    /// RGB image (P6).
    #[arg(long)]
    image: PathBuf,
    /// Label map (P5), 255 = ignore.
    #[arg(long)]
    label: PathBuf,
    /// Output label map (P5).
    #[arg(long)]
    out: PathBuf,
    /// Colour affinity sharpness.
    #[arg(long, default_value_t = varm::DEFAULT_ALPHA)]
    alpha: f64,
    /// Variation correction weight.
    #[arg(long, default_value_t = varm::DEFAULT_BETA)]
    beta: f64,
    /// Comma-separated dilation rates.
    #[arg(long, default_value = "1,2,4,8,12,24")]
    dilations: String,
    /// Refinement passes.
    #[arg(long, default_value_t = varm::DEFAULT_ITERATIONS)]
    iters: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset with ground-truth masks.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long, conflicts_with = "pred", required_unless_present = "pred")]
    ckpt: Option<PathBuf>,
    /// Directory of predicted masks NNNN.pgm.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the random inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum relative error.
    #[arg(long, default_value_t = gradcheck::SUITE_TOLERANCE)]
    tol: f64,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// RGB image (P6).
    #[arg(long)]
    image: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(after_help = train_help())]
struct AblationArgs {
    /// Training dataset.
    #[arg(long)]
    train: PathBuf,
    /// Validation dataset.
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Write the table here as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit code.
struct Fail {
    code: u8,
    msg: String,
}

impl Fail {
    fn input(msg: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, msg: msg.into() }
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_INPUT,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::input(e.to_string())
    }
}

type CmdResult = Result<(), Fail>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match std::env::var("SCD_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                eprintln!("error: SCD_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(EXIT_INPUT);
            }
        },
        Err(_) => 1,
    };
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    let r = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Refine(a) => cmd_refine(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Render(a) => cmd_render(a),
        Cmd::Ablation(a) => cmd_ablation(a),
        Cmd::Defaults => {
            print!("{}", config::describe(&config::train_keys(), &TrainConfig::default()));
            print!("{}", config::describe(&config::gen_keys(), &SyntheticSpec::default()));
            Ok(())
        }
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let mut spec = SyntheticSpec::default();
    if let Some(p) = &a.spec {
        let text = fs::read_to_string(p).map_err(|e| Fail::input(format!("{}: {e}", p.display())))?;
        config::apply_text(&config::gen_keys(), &mut spec, &text).map_err(Fail::input)?;
    }
    if let Some(n) = a.n {
        spec.num_images = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.size {
        spec.height = s;
        spec.width = s;
    }
    if let Some(c) = a.classes {
        spec.num_classes = c;
    }
    let ds = data::generate(&spec)?;
    data::write_dataset(&a.out, &ds)?;
    println!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn load_train_config(path: Option<&Path>, sets: &[String]) -> Result<TrainConfig, Fail> {
    let keys = config::train_keys();
    let mut cfg = TrainConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Fail::input(format!("{}: {e}", p.display())))?;
        config::apply_text(&keys, &mut cfg, &text).map_err(Fail::input)?;
    }
    for s in sets {
        let (k, v) = config::split_pair(s).map_err(Fail::input)?;
        config::set(&keys, &mut cfg, k, v).map_err(Fail::input)?;
    }
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_train_config(a.config.as_deref(), &a.sets)?;
    if let Some(n) = a.iterations {
        cfg.iterations = n;
        cfg.warmup_iterations = cfg.warmup_iterations.min(n);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = data::read_dataset(&a.data)?;
    if ds.is_empty() {
        return Err(Fail::input(format!("no images in {}", a.data.display())));
    }
    let val = match &a.val {
        Some(p) => data::read_dataset(p)?,
        None => ds.clone(),
    };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.txt"), config::describe(&config::train_keys(), &cfg))?;

    let mut log = BufWriter::new(fs::File::create(a.out.join("loss.csv"))?);
    writeln!(log, "{}", train::LossComponents::CSV_HEADER)?;
    let mut trainer = train::Trainer::new(cfg, ds.num_classes())?;
    while !trainer.done() {
        let s = trainer.step;
        let c = match trainer.step(&ds) {
            Ok(c) => c,
            Err(e) => {
                log.flush()?;
                return Err(e.into());
            }
        };
        writeln!(log, "{}", c.csv_row(s))?;
        if (s + 1) % 100 == 0 {
            eprintln!("step {:>6}  {c}", s + 1);
        }
    }
    log.flush()?;
    trainer.model.save(&a.out.join("model.ckpt"))?;
    let m = train::evaluate(&val, &trainer.model)?;
    let names = label_names(&val);
    fs::write(a.out.join("metrics.csv"), m.to_csv(&names))?;
    print!("{}", m.table(&names));
    Ok(())
}

fn label_names(ds: &data::Dataset) -> Vec<String> {
    std::iter::once("background".to_string()).chain(ds.class_names.iter().cloned()).collect()
}

/// One-hot scores from a label map; IGNORE pixels get all zeros.
fn one_hot(labels: &[u8], h: usize, w: usize) -> Result<Tensor, Fail> {
    let channels = labels.iter().filter(|&&l| l != IGNORE).map(|&l| l as usize + 1).max().unwrap_or(1);
    let mut t = Tensor::zeros(&[h, w, channels]);
    for (p, &l) in labels.iter().enumerate() {
        if l != IGNORE {
            t.data_mut()[p * channels + l as usize] = 1.0;
        }
    }
    Ok(t)
}

fn cmd_refine(a: RefineArgs) -> CmdResult {
    let img = pnm::read_image(&a.image)?;
    let (lh, lw, labels) = pnm::read_gray(&a.label)?;
    let (h, w, _) = img.hwc()?;
    if (h, w) != (lh, lw) {
        return Err(Fail::input(format!("image is {h}x{w} but label is {lh}x{lw}")));
    }
    let cfg = VarmConfig {
        alpha: a.alpha,
        beta: a.beta,
        dilations: config::parse_list(&a.dilations).map_err(Fail::input)?,
        iterations: a.iters,
    };
    cfg.validate()?;
    let scores = one_hot(&labels, h, w)?;
    let refined = varm::refine(&scores, &img, &cfg)?;
    let c = refined.shape()[2];
    let out: Vec<u8> = refined
        .data()
        .chunks(c)
        .map(|px| {
            let (k, s) = cam::argmax(px);
            if s > 0.0 {
                k as u8
            } else {
                IGNORE
            }
        })
        .collect();
    pnm::write_gray(&a.out, h, w, &out)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ds = data::read_dataset(&a.data)?;
    if ds.is_empty() {
        return Err(Fail::input(format!("no images in {}", a.data.display())));
    }
    let metrics = match (&a.ckpt, &a.pred) {
        (Some(ck), _) => {
            let model = Model::load(ck)?;
            train::evaluate(&ds, &model)?
        }
        (None, Some(dir)) => {
            let mut cm = ConfusionMatrix::new(ds.num_classes() + 1);
            for (i, s) in ds.samples.iter().enumerate() {
                let p = dir.join(format!("{i:04}.pgm"));
                let (h, w, pred) = pnm::read_gray(&p)?;
                if (h, w) != (s.height(), s.width()) {
                    return Err(Fail::input(format!("{} has the wrong size", p.display())));
                }
                cm.add(&s.mask, &pred)?;
            }
            cm.metrics()
        }
        (None, None) => return Err(Fail::input("need --ckpt or --pred")),
    };
    let csv = metrics.to_csv(&label_names(&ds));
    print!("{csv}");
    if let Some(p) = &a.out {
        fs::write(p, &csv)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let mut failed = Vec::new();
    println!("loss,params,rel_err,status");
    for (name, r) in gradcheck::loss_suite(a.seed)? {
        let ok = r.passes(a.tol);
        println!("{name},{},{:.3e},{}", r.num_params, r.rel_err, if ok { "pass" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail { code: EXIT_CHECK, msg: format!("gradient check failed for {}", failed.join(", ")) })
    }
}

const PALETTE: [[f64; 3]; 4] = [[0.0, 0.0, 0.0], [0.9, 0.2, 0.2], [0.2, 0.85, 0.3], [0.25, 0.4, 1.0]];

fn cmd_render(a: RenderArgs) -> CmdResult {
    let model = Model::load(&a.ckpt)?;
    let img = pnm::read_image(&a.image)?;
    let (h, w, _) = img.hwc()?;
    let pred = model.predict(&img)?;
    let logits = pred.logits.data();
    let mut present: Vec<bool> = logits.iter().map(|&p| p > 0.0).collect();
    if !present.iter().any(|&p| p) {
        present[cam::argmax(logits).0] = true;
    }
    let norm = cam::normalize_cam(&Cam { maps: pred.cam.clone(), normalized: false }, &present)?;
    let up = resample::resize_tensor(&norm.maps, h, w)?;
    fs::create_dir_all(&a.out)?;
    let c = present.len();
    let names: Vec<String> = (0..c)
        .map(|k| data::CLASS_NAMES.get(k).map_or(format!("class{k}"), |s| s.to_string()))
        .collect();
    for k in (0..c).filter(|&k| present[k]) {
        let mut heat = Tensor::zeros(&[h, w, 3]);
        for i in 0..h {
            for j in 0..w {
                let v = up.at3(i, j, k);
                let rgb = [v, 1.0 - (2.0 * v - 1.0).abs(), 1.0 - v];
                for (ch, &col) in rgb.iter().enumerate() {
                    heat.set3(i, j, ch, 0.5 * img.at3(i, j, ch) + 0.5 * col);
                }
            }
        }
        pnm::write_image(&a.out.join(format!("cam_{}.ppm", names[k])), &heat)?;
    }
    let s = &pred.seg;
    let cs = s.shape()[2];
    let mut overlay = Tensor::zeros(&[h, w, 3]);
    for (p, px) in s.data().chunks(cs).enumerate() {
        let col = PALETTE[cam::argmax(px).0 % PALETTE.len()];
        for ch in 0..3 {
            overlay.data_mut()[p * 3 + ch] = 0.5 * img.data()[p * 3 + ch] + 0.5 * col[ch];
        }
    }
    pnm::write_image(&a.out.join("seg.ppm"), &overlay)?;
    Ok(())
}

fn cmd_ablation(a: AblationArgs) -> CmdResult {
    let cfg = load_train_config(a.config.as_deref(), &a.sets)?;
    cfg.validate()?;
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Fail::input(format!("bad seed {s:?}"))))
        .collect::<Result<_, _>>()?;
    let tr = data::read_dataset(&a.train)?;
    let val = data::read_dataset(&a.val)?;
    let rows = train::ablation_run(&cfg, &Variant::ALL, &seeds, &tr, &val, |v, s, m| {
        eprintln!("{:<10} seed {s}: mIoU {:.2}", v.name(), 100.0 * m);
    })?;
    let table = train::ablation_table(&rows);
    print!("{table}");
    if let Some(p) = &a.out {
        fs::write(p, &table)?;
    }
    Ok(())
}
