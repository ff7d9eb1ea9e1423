//! `fada` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use fada::detector::checkpoint;
use fada::detector::DetectorConfig;
use fada::harness::{
    ablation_grid, evaluate, sweep_samples, write_sweep_csv, AblationRow, BoxBudget, Experiment, FdaDatasets,
    FdaProtocol, SweepCell,
};
use fada::smfr::FrozenSourceExtractor;
use fada::split_pooling::SplitPoolConfig;
use fada::synthdata::{gen_dataset, load_dataset, Domain, DomainSpec, ImageSample, SynthConfig};
use fada::trainer::{adapt, pretrain_from, AdaptConfig, PretrainConfig};
use fada::Error;

#[derive(Parser)]
#[command(name = "fada", version, about = "Few-shot adaptive detection on synthetic domain pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    GenData(GenData),
    /// Train a source detector on a fully annotated dataset.
    Pretrain(Pretrain),
    /// Adapt a source detector with loosely annotated target images.
    Adapt(Adapt),
    /// Print the AP report of a model on a dataset as JSON.
    Eval(Eval),
    /// Run few-shot rounds; one JSON line per seed.
    Fda(Fda),
    /// Run an ablation grid and print the summary CSV.
    Ablate(Ablate),
    /// Sweep image and box counts; CSV plus an optional PNG curve.
    Sweep(Sweep),
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// 256x256 canvases and the reduced detector.
    Desk,
    /// 512x512 canvases and the full detector.
    Full,
}

impl Profile {
    fn synth(self) -> SynthConfig {
        match self {
            Profile::Desk => SynthConfig::desk(),
            Profile::Full => SynthConfig::default(),
        }
    }

    fn detector(self) -> DetectorConfig {
        match self {
            Profile::Desk => DetectorConfig::desk(),
            Profile::Full => DetectorConfig::default(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "source")]
    domain: DomainArg,
    /// Degrees; defaults to 0 for source and 60 for target.
    #[arg(long)]
    hue_shift: Option<f64>,
    #[arg(long)]
    blur_sigma: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long, default_value_t = 0)]
    background_seed: u64,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    images_per_step: usize,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
}

#[derive(Args)]
struct Adapt {
    #[arg(long)]
    source_model: PathBuf,
    #[arg(long)]
    source_data: PathBuf,
    /// Few-shot target set, typically loosely annotated.
    #[arg(long)]
    target_data: PathBuf,
    /// AdaptConfig JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_model: PathBuf,
    /// Loss trace CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    source_model: PathBuf,
    #[arg(long)]
    source_data: PathBuf,
    /// Target images the few-shot split is drawn from.
    #[arg(long)]
    target_pool: PathBuf,
    #[arg(long)]
    target_test: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Fda {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, default_value_t = 8)]
    n_images: usize,
    /// Boxes per image: `3`, or `u6` for at most six.
    #[arg(long, default_value = "3")]
    boxes: BoxBudget,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    required_classes: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Grid JSON: `{"rows": [{"name", "set"}], "seeds", "protocol"}`.
    #[arg(long)]
    grid: PathBuf,
}

#[derive(Args)]
struct Sweep {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    images: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,u6")]
    boxes: Vec<BoxBudget>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    required_classes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    rows: Vec<AblationRow>,
    #[serde(default = "default_seeds")]
    seeds: u64,
    #[serde(default)]
    protocol: FdaProtocol,
}

fn default_seeds() -> u64 {
    3
}

fn read_config(path: Option<&Path>) -> fada::Result<AdaptConfig> {
    let Some(path) = path else {
        return Ok(AdaptConfig { split_pool: SplitPoolConfig::desk(), ..AdaptConfig::default() });
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let cfg = AdaptConfig::from_json(&text)?;
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> fada::Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| Error::Io { path: p.into(), source: e }),
        None => io::stdout().write_all(bytes).map_err(|e| Error::Io { path: "<stdout>".into(), source: e }),
    }
}

struct Loaded {
    model: fada::detector::DetectorModel,
    source: Vec<ImageSample>,
    pool: Vec<ImageSample>,
    test: Vec<ImageSample>,
    cfg: AdaptConfig,
}

fn load_experiment(a: &ExperimentArgs) -> fada::Result<Loaded> {
    Ok(Loaded {
        model: checkpoint::load(&a.source_model)?,
        source: load_dataset(&a.source_data)?,
        pool: load_dataset(&a.target_pool)?,
        test: load_dataset(&a.target_test)?,
        cfg: read_config(a.config.as_deref())?,
    })
}

fn run(cli: Cli) -> fada::Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let base = match a.domain {
                DomainArg::Source => DomainSpec::identity(),
                DomainArg::Target => DomainSpec::default_target(),
            };
            let spec = DomainSpec {
                hue_shift: a.hue_shift.unwrap_or(base.hue_shift),
                blur_sigma: a.blur_sigma.unwrap_or(base.blur_sigma),
                noise_std: a.noise_std.unwrap_or(base.noise_std),
                background_seed: a.background_seed,
            };
            let domain = match a.domain {
                DomainArg::Source => Domain::Source,
                DomainArg::Target => Domain::Target,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            gen_dataset(a.n, &a.profile.synth(), &spec, domain, &mut rng, &a.out)?;
        }
        Command::Pretrain(a) => {
            let data = load_dataset(&a.data)?;
            let cfg = PretrainConfig {
                detector: a.profile.detector(),
                steps: a.steps,
                lr: a.lr,
                images_per_step: a.images_per_step,
                seed: a.seed,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut model = fada::detector::DetectorModel::new(cfg.detector.clone(), &mut rng);
            let report_every = (cfg.steps / 20).max(1);
            let mut acc = 0.0;
            pretrain_from(&mut model, &data, &cfg, &mut rng, |step, l| {
                acc += l;
                if (step + 1) % report_every == 0 {
                    eprintln!("step {:>6}  L_det {:.6}", step + 1, acc / report_every as f64);
                    acc = 0.0;
                }
            })?;
            checkpoint::save(&model, &a.out_model)?;
        }
        Command::Adapt(a) => {
            let model = checkpoint::load(&a.source_model)?;
            let source = load_dataset(&a.source_data)?;
            let target = load_dataset(&a.target_data)?;
            let cfg = read_config(a.config.as_deref())?;
            let frozen = FrozenSourceExtractor::new(&model);
            let (adapted, report) = adapt(&model, &frozen, &source, &target, &cfg)?;
            checkpoint::save(&adapted, &a.out_model)?;
            if let Some(path) = &a.report {
                let mut buf = Vec::new();
                report.write_csv(&mut buf)?;
                write_out(Some(path), &buf)?;
            }
            eprintln!(
                "{} steps in {:.1}s; skipped image terms {}, instance terms {}",
                report.traces.len(),
                report.wall_clock_secs,
                report.skipped.image_terms,
                report.skipped.instance_terms
            );
        }
        Command::Eval(a) => {
            let model = checkpoint::load(&a.model)?;
            let data = load_dataset(&a.data)?;
            let report = evaluate(&model, &data, a.iou)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Fda(a) => {
            let l = load_experiment(&a.exp)?;
            let frozen = FrozenSourceExtractor::new(&l.model);
            let data = FdaDatasets { source_train: &l.source, target_pool: &l.pool, target_test: &l.test };
            let exp = Experiment::new(&l.model, &frozen, data)?;
            let protocol =
                FdaProtocol { n_images: a.n_images, boxes_per_image: a.boxes, required_classes: a.required_classes };
            let mut out = io::stdout().lock();
            for seed in a.first_seed..a.first_seed + a.seeds {
                let r = exp.round(&protocol, &l.cfg, seed)?;
                writeln!(out, "{}", r.to_json_line()?).map_err(|e| Error::Io { path: "<stdout>".into(), source: e })?;
            }
        }
        Command::Ablate(a) => {
            let l = load_experiment(&a.exp)?;
            let text = fs::read_to_string(&a.grid).map_err(|e| Error::Io { path: a.grid.clone(), source: e })?;
            let grid: GridFile = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let frozen = FrozenSourceExtractor::new(&l.model);
            let data = FdaDatasets { source_train: &l.source, target_pool: &l.pool, target_test: &l.test };
            let exp = Experiment::new(&l.model, &frozen, data)?;
            let seeds: Vec<u64> = (0..grid.seeds).collect();
            let summary = ablation_grid(&exp, &grid.protocol, &l.cfg, &grid.rows, &seeds)?;
            let mut buf = Vec::new();
            summary.write_csv(&mut buf)?;
            write_out(None, &buf)?;
        }
        Command::Sweep(a) => {
            let l = load_experiment(&a.exp)?;
            let frozen = FrozenSourceExtractor::new(&l.model);
            let data = FdaDatasets { source_train: &l.source, target_pool: &l.pool, target_test: &l.test };
            let exp = Experiment::new(&l.model, &frozen, data)?;
            let seeds: Vec<u64> = (0..a.seeds).collect();
            let cells = sweep_samples(&exp, &l.cfg, &a.images, &a.boxes, &a.required_classes, &seeds)?;
            let mut buf = Vec::new();
            write_sweep_csv(&cells, &mut buf)?;
            write_out(a.out.as_deref(), &buf)?;
            if let Some(p) = &a.plot {
                plot_sweep(&cells, p)?;
            }
        }
    }
    Ok(())
}

/// One polyline per box budget, mean mAP over image count. No text is drawn,
/// so the plot needs no font backend.
fn plot_sweep(cells: &[SweepCell], path: &Path) -> fada::Result<()> {
    use plotters::prelude::*;
    let fail = |e: String| Error::InvalidArgument(format!("plot {}: {e}", path.display()));
    let max_images = cells.iter().map(|c| c.n_images).max().unwrap_or(1).max(2) as f64;
    let root = BitMapBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(0.0..max_images.log2() + 0.25, 0.0..1.0f64)
        .map_err(|e| fail(e.to_string()))?;
    let mut budgets: Vec<BoxBudget> = cells.iter().map(|c| c.boxes).collect();
    budgets.dedup();
    for (i, b) in budgets.iter().enumerate() {
        let colour = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = cells
            .iter()
            .filter(|c| c.boxes == *b)
            .filter_map(|c| c.mean_map.map(|m| ((c.n_images as f64).log2(), m)))
            .collect();
        chart.draw_series(LineSeries::new(pts.clone(), colour.stroke_width(2))).map_err(|e| fail(e.to_string()))?;
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 4, colour.filled())))
            .map_err(|e| fail(e.to_string()))?;
    }
    root.present().map_err(|e| fail(e.to_string()))?;
    Ok(())
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
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
