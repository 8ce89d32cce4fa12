//! `mvpnet` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mvpnet::autodiff::suite::{format_table, op_suite};
use mvpnet::cluster::{cluster_windows, parse_samples, KMeansParams};
use mvpnet::config::{parse_views, Precision, RunConfig};
use mvpnet::dataset::{load_directory, LabelledVolume};
use mvpnet::experiment::{format_log, train_on_volumes, TrainOutputs};
use mvpnet::froc::{build_cases, froc, parse_detections, parse_ground_truth, report_table};
use mvpnet::model::check::model_suite;
use mvpnet::phantom::{contrast_reports, generate, write_dataset, PhantomSpec};
use mvpnet::volume::{load_volume, save_volume};
use mvpnet::windowing::{apply_window, encode_float_image, ViewSet};
use mvpnet::{Error, Result};

#[derive(Parser)]
#[command(name = "mvpnet", version, about = "Multi-view, position-aware lesion detection at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Views {
    Single,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attention {
    Concat,
    Cbam,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Load a HUVOL volume, resample it to a fixed slice spacing and resize
    /// it in-plane, then write it back as HUVOL.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target slice spacing in mm (linear interpolation along z).
        #[arg(long, default_value_t = 2.0)]
        z_spacing: f64,
        /// Target long side in pixels (bilinear).
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Render one slice under one or more windows into a float image.
    Window {
        #[arg(long)]
        input: PathBuf,
        /// `level:width` pairs, comma-separated; `multi` for the three
        /// clustered windows and `single` for the wide (1024, 4096) window.
        #[arg(long, default_value = "multi", allow_hyphen_values = true)]
        windows: String,
        #[arg(long)]
        slice: usize,
        /// Output: `FLOATIMG 1` header, `dims c y x`, blank line, LE f32.
        #[arg(long)]
        out: PathBuf,
    },
    /// k-means++ over `level,width` lines; prints centroids as
    /// `level:width`, sorted by level.
    ClusterWindows {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        max_iter: usize,
    },
    /// Generate the synthetic phantom dataset.
    PhantomGen {
        /// `key = value` phantom spec; defaults apply to omitted keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Volume i is drawn from seed + i.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a data directory and score the held-out volumes.
    Train {
        /// `key = value` run config; defaults apply to omitted keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with `*.huvol`, `gt.txt` and optionally
        /// `positions.txt` and `keys.txt`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seeds initialisation, shuffling and flips [config `seed`, default 0].
        #[arg(long)]
        seed: Option<u64>,
        /// Epoch count [config `epochs`, default 13].
        #[arg(long)]
        epochs: Option<usize>,
        /// One wide window or the three clustered windows [config `views`, default multi].
        #[arg(long, value_enum)]
        views: Option<Views>,
        /// View fusion strategy [config `fusion`, default cbam].
        #[arg(long, value_enum)]
        attention: Option<Attention>,
        /// Position head and its loss [config `position`, default on].
        #[arg(long, value_enum)]
        position: Option<Switch>,
        /// Slices per input slab, 3 or 9 [config `n_ctx`, default 3].
        #[arg(long)]
        n_ctx: Option<usize>,
    },
    /// FROC evaluation of a detections file against ground truth.
    Eval {
        /// `image_id x1 y1 x2 y2` lines; a bare `image_id` is a lesion-free image.
        #[arg(long)]
        gt: PathBuf,
        /// `image_id score x1 y1 x2 y2` lines.
        #[arg(long)]
        detections: PathBuf,
        /// IoU needed for a true positive.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// FPs-per-image report rates, comma-separated.
        #[arg(long, default_value = "0.5,1,2,3,4")]
        rates: String,
        /// Row label in the table.
        #[arg(long, default_value = "model")]
        name: String,
        /// Also write every operating point as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every op and of the full model loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })
}

fn parse_rates(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().ok().filter(|r| *r > 0.0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::InvalidArgument(format!("rates must be positive numbers, got {s:?}")))
}

fn ingest(input: &Path, out: &Path, z_spacing: f64, size: usize) -> Result<()> {
    let vol = load_volume(input)?;
    for w in vol.validate() {
        eprintln!("warning: {w}");
    }
    let (norm, scale, _) = mvpnet::dataset::normalise_volume(&vol, z_spacing, size)?;
    save_volume(&norm, out)?;
    let [z, y, x] = norm.dims();
    let [sz, sy, sx] = norm.spacing_mm();
    println!("dims {z} {y} {x}\nspacing {sz} {sy} {sx}\nscale {scale}");
    Ok(())
}

fn window(input: &Path, windows: &str, slice: usize, out: &Path) -> Result<()> {
    let views: ViewSet = parse_views(windows)?;
    let vol = load_volume(input)?;
    let nz = vol.dims()[0];
    if slice >= nz {
        return Err(Error::InvalidArgument(format!("slice {slice} outside 0..{nz}")));
    }
    let img = vol.slice(slice);
    let planes: Vec<_> = views.windows().iter().map(|w| apply_window(&img, w).pixels).collect();
    fs::write(out, encode_float_image(&planes)?)?;
    Ok(())
}

fn cluster(input: &Path, k: usize, seed: u64, max_iter: usize) -> Result<()> {
    let samples = parse_samples(&read_text(input)?)?;
    let res = cluster_windows(&samples, KMeansParams { k, seed, max_iter, ..KMeansParams::default() })?;
    for c in res.sorted_centroids() {
        println!("{c}");
    }
    Ok(())
}

fn phantom_gen(spec: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => PhantomSpec::load(p)?,
        None => PhantomSpec::default(),
    };
    let ds = generate(&spec, seed)?;
    let mut weak = 0;
    let mut lesions = 0;
    for pv in &ds.volumes {
        for r in contrast_reports(&spec, pv) {
            lesions += 1;
            if !r.passes(&spec) {
                weak += 1;
            }
        }
    }
    write_dataset(&ds, out)?;
    let mimics: usize = ds.volumes.iter().map(|v| v.mimics.len()).sum();
    println!("{} volumes, {lesions} lesions, {mimics} mimics written to {}", ds.volumes.len(), out.display());
    if weak > 0 {
        eprintln!("warning: {weak} lesions miss the contrast targets");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    views: Option<Views>,
    attention: Option<Attention>,
    position: Option<Switch>,
    n_ctx: Option<usize>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(v) = views {
        cfg.set("views", if matches!(v, Views::Single) { "single" } else { "multi" })?;
    }
    if let Some(a) = attention {
        cfg.model.fusion = if matches!(a, Attention::Cbam) { "cbam" } else { "concat" }.into();
    }
    if let Some(p) = position {
        cfg.model.position = matches!(p, Switch::On);
    }
    if let Some(n) = n_ctx {
        if n != 3 && n != 9 {
            return Err(Error::InvalidArgument(format!("--n-ctx must be 3 or 9, got {n}")));
        }
        cfg.model.n_ctx = n;
    }
    cfg.validate()?;

    let volumes: Vec<LabelledVolume> = load_directory(data)?
        .iter()
        .map(|v| v.normalised(cfg.z_spacing_mm, cfg.image_size))
        .collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let ckpt = out.join("model.ckpt");
    let res: TrainOutputs = match cfg.precision {
        Precision::F32 => train_on_volumes::<f32>(&cfg, &volumes, &ckpt)?,
        Precision::F64 => train_on_volumes::<f64>(&cfg, &volumes, &ckpt)?,
    };
    fs::write(out.join("train_log.csv"), format_log(&res.log))?;
    fs::write(out.join("detections.txt"), &res.detections)?;
    fs::write(out.join("test_gt.txt"), &res.ground_truth)?;
    for e in &res.log {
        println!("epoch {:>2}  lr {:<8} loss {:.5}", e.epoch, e.lr, e.loss);
    }
    if let Some(curve) = &res.curve {
        let table = report_table(&cfg.rates, &[("model".to_string(), curve.report(&cfg.rates))]);
        fs::write(out.join("report.txt"), &table)?;
        print!("{table}");
    }
    Ok(())
}

fn eval(gt: &Path, dets: &Path, iou: f64, rates: &str, name: &str, csv: Option<&Path>) -> Result<()> {
    if !(iou > 0.0 && iou <= 1.0) {
        return Err(Error::InvalidArgument(format!("--iou must lie in (0, 1], got {iou}")));
    }
    let rates = parse_rates(rates)?;
    let cases = build_cases(parse_ground_truth(&read_text(gt)?)?, parse_detections(&read_text(dets)?)?);
    let curve = froc(&cases, iou)?;
    print!("{}", report_table(&rates, &[(name.to_string(), curve.report(&rates))]));
    if let Some(p) = csv {
        fs::write(p, curve.to_csv())?;
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<bool> {
    let mut entries = op_suite(seed)?;
    entries.extend(model_suite(seed)?);
    print!("{}", format_table(&entries));
    Ok(entries.iter().all(|e| e.passed()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest { input, out, z_spacing, size } => ingest(&input, &out, z_spacing, size)?,
        Command::Window { input, windows, slice, out } => window(&input, &windows, slice, &out)?,
        Command::ClusterWindows { input, k, seed, max_iter } => cluster(&input, k, seed, max_iter)?,
        Command::PhantomGen { spec, seed, out } => phantom_gen(spec.as_deref(), seed, &out)?,
        Command::Train { config, data, out, seed, epochs, views, attention, position, n_ctx } => {
            train(config.as_deref(), &data, &out, seed, epochs, views, attention, position, n_ctx)?
        }
        Command::Eval { gt, detections, iou, rates, name, csv } => eval(&gt, &detections, iou, &rates, &name, csv.as_deref())?,
        Command::Gradcheck { seed } => {
            if !gradcheck(seed)? {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() {
                1
            } else if e.is_numeric() {
                3
            } else {
                2
            })
        }
    }
}
