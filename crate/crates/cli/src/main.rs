//! `mmfuse` command line: prepare data, train, evaluate, probe and plot.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! failures while running.

mod artifacts;
mod plot;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mmfuse::config::RunConfig;
use mmfuse::data::{
    integrate_events, load_coco_manifest, project_lidar_to_image, read_events_csv, read_lidar_csv,
    synth_toy_dataset, write_dataset, Dataset, Intrinsics, LidarCloud, NormalizationConfig,
};
use mmfuse::eval::{assign_combinations, evaluate_scenario, run_scenario, to_coco_results, token_probe, write_embedding_csv, Scenario};
use mmfuse::io::{load_checkpoint, save_checkpoint, Checkpoint};
use mmfuse::model::Detector;
use mmfuse::train::{train_stage, LossRecord, Stage, Start};
use mmfuse::{Modality, Model, MultiModalSample};

use artifacts::RunManifest;

/// A usage or configuration problem; exits with code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "mmfuse", version, about = "Multi-modal pedestrian detection with modality-aware fusion tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override such as `multimodal.base_lr=0.001` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset directory (planes, COCO annotations, manifest).
    Prepare(PrepareArgs),
    /// Run one training stage and write a checkpoint plus loss history.
    Train(TrainArgs),
    /// Compute AP, MR^-2 and JI for one or more scenarios.
    Eval(EvalArgs),
    /// Linear probe of MAF features against the input modality combination.
    Probe(ProbeArgs),
    /// Render loss-history and embedding CSVs as SVG figures.
    Plot(PlotArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    common: Common,
    /// Generate the synthetic two-modality dataset.
    #[arg(long, conflicts_with_all = ["events", "lidar"])]
    synthetic: bool,
    /// Event CSV (`x,y,t,polarity`) to integrate into frames.
    #[arg(long, requires = "window", conflicts_with = "lidar")]
    events: Option<PathBuf>,
    /// Integration window for `--events`, in timestamp units.
    #[arg(long)]
    window: Option<i64>,
    /// LiDAR CSV (`x,y,z`, camera frame) to project into a depth plane.
    #[arg(long, requires = "intrinsics")]
    lidar: Option<PathBuf>,
    /// `fx,fy,cx,cy` for `--lidar`.
    #[arg(long, value_delimiter = ',')]
    intrinsics: Option<Vec<f64>>,
    /// Sensor resolution `HEIGHTxWIDTH` for `--events` and `--lidar`.
    #[arg(long, default_value = "32x32", value_parser = parse_shape)]
    sensor: (usize, usize),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    stage: Stage,
    /// Dataset directory (repeatable); a `train/` split is used when present.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Checkpoint whose weights initialise this stage.
    #[arg(long, conflicts_with = "resume")]
    init_from: Option<PathBuf>,
    /// Continue an interrupted run of this stage from its checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Allow the multimodal stage to start from random weights.
    #[arg(long)]
    from_scratch: bool,
    /// Modality-dropout probability for this stage.
    #[arg(long)]
    dropout_p: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (repeatable); a `test/` split is used when present.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// `multimodal` or `unimodal:<modality>` (repeatable). Defaults to
    /// multimodal plus every unimodal scenario the data supports.
    #[arg(long)]
    scenario: Vec<Scenario>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Modalities whose non-empty subsets form the probe classes.
    #[arg(long)]
    modality: Vec<Modality>,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    /// Loss history CSV written by `train`.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Embedding CSV written by `probe`.
    #[arg(long)]
    embedding: Option<PathBuf>,
}

fn parse_shape(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HEIGHTxWIDTH")?;
    let h: usize = h.parse().map_err(|e| format!("{e}"))?;
    let w: usize = w.parse().map_err(|e| format!("{e}"))?;
    if h == 0 || w == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((h, w))
}

fn cache_root() -> PathBuf {
    std::env::var_os("MMFUSE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".mmfuse-cache"))
}

/// Relative dataset paths that do not exist are looked up in the cache root.
fn resolve_data(p: &Path) -> Result<PathBuf> {
    if p.exists() {
        return Ok(p.to_path_buf());
    }
    let cached = cache_root().join(p);
    if p.is_relative() && cached.exists() {
        return Ok(cached);
    }
    bail!(Usage(format!("input not found: {}", p.display())))
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!(Usage(format!("input file not found: {}", p.display())));
    }
    Ok(())
}

const NORMALIZATION_FILE: &str = "normalization.json";

/// Loads `dir/manifest.json`, or `dir/<split>/manifest.json`. A
/// `normalization.json` beside the manifest replaces the configured one.
fn load_dataset(dir: &Path, split: &str, cfg: &RunConfig) -> Result<Dataset> {
    let dir = resolve_data(dir)?;
    let root = if dir.join("manifest.json").is_file() {
        dir.clone()
    } else if dir.join(split).join("manifest.json").is_file() {
        dir.join(split)
    } else {
        bail!(Usage(format!(
            "no manifest.json in {} or its {split}/ split",
            dir.display()
        )));
    };
    let norm_path = root.join(NORMALIZATION_FILE);
    let norm: NormalizationConfig = if norm_path.is_file() {
        serde_json::from_str(&fs::read_to_string(&norm_path)?)
            .map_err(|e| Usage(format!("{}: {e}", norm_path.display())))?
    } else {
        cfg.normalization.clone()
    };
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let name = if root == dir { name } else { format!("{}/{split}", dir.display()) };
    Ok(load_coco_manifest(&root.join("manifest.json"), &norm)?.into_dataset(name)?)
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let base = match &c.config {
        Some(p) => {
            require_file(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
        cfg.pretrain.seed = s;
        cfg.multimodal.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, default: &str) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("mmfuse-out").join(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn manifest(command: &str, c: &Common, cfg: &RunConfig, out: &Path, inputs: &[&Path]) -> Result<RunManifest> {
    Ok(RunManifest {
        command: command.into(),
        argv: std::env::args().collect(),
        config_path: c.config.clone(),
        seed: cfg.seed,
        out_dir: out.to_path_buf(),
        config: serde_json::to_value(cfg)?,
        inputs: artifacts::hash_inputs(inputs)?,
        outputs: Default::default(),
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn single_plane_sample(id: String, m: Modality, plane: mmfuse::ImagePlane) -> Result<MultiModalSample> {
    Ok(MultiModalSample::new(id, [(m, plane)].into_iter().collect(), vec![])?)
}

fn cmd_prepare(a: PrepareArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let identity = serde_json::to_string_pretty(&NormalizationConfig::identity())?;
    let mut inputs: Vec<&Path> = Vec::new();
    let out = if a.synthetic {
        let out = match &a.common.out {
            Some(o) => o.clone(),
            None => cache_root().join(format!("synthetic-seed{}", cfg.synth.seed)),
        };
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let data = synth_toy_dataset(&cfg.synth)?;
        for (split, d) in [("train", &data.train), ("test", &data.test)] {
            let dir = out.join(split);
            write_dataset(d, &dir)?;
            fs::write(dir.join(NORMALIZATION_FILE), &identity)?;
        }
        let kinds: Vec<(String, &str)> = data
            .train
            .samples
            .iter()
            .zip(&data.train_kinds)
            .chain(data.test.samples.iter().zip(&data.test_kinds))
            .map(|(s, k)| (s.sample_id.clone(), k.name()))
            .collect();
        let mut w = csv::Writer::from_path(out.join("scenes.csv"))?;
        w.write_record(["sample_id", "scene"])?;
        for (id, k) in kinds {
            w.write_record([id.as_str(), k])?;
        }
        w.flush()?;
        out
    } else if let Some(events) = &a.events {
        require_file(events)?;
        inputs.push(events);
        let window = a.window.unwrap_or(0);
        if window <= 0 {
            bail!(Usage("--window must be positive".into()));
        }
        let stream = read_events_csv(events, a.sensor)?;
        let (t0, t1) = stream
            .time_span()
            .ok_or_else(|| Usage(format!("{} contains no events", events.display())))?;
        let frames = (t1 - t0) / window + 1;
        let samples = (0..frames)
            .map(|k| {
                let start = t0 + k * window;
                let plane = integrate_events(&stream, start, start + window)?;
                single_plane_sample(format!("events-{k:05}"), Modality::Event, plane)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = out_dir(&a.common, "events")?;
        write_dataset(&Dataset::new("events", samples), &out)?;
        fs::write(out.join(NORMALIZATION_FILE), &identity)?;
        out
    } else if let Some(lidar) = &a.lidar {
        require_file(lidar)?;
        inputs.push(lidar);
        let k = a.intrinsics.as_deref().unwrap_or_default();
        if k.len() != 4 {
            bail!(Usage("--intrinsics takes fx,fy,cx,cy".into()));
        }
        let intrinsics = Intrinsics {
            fx: k[0],
            fy: k[1],
            cx: k[2],
            cy: k[3],
        };
        let cloud = LidarCloud::new(read_lidar_csv(lidar)?, intrinsics)?;
        let plane = project_lidar_to_image(&cloud, a.sensor)?;
        let out = out_dir(&a.common, "lidar")?;
        let sample = single_plane_sample("lidar-00000".into(), Modality::Lidar, plane)?;
        write_dataset(&Dataset::new("lidar", vec![sample]), &out)?;
        out
    } else {
        bail!(Usage("prepare needs one of --synthetic, --events or --lidar".into()));
    };
    let m = manifest("prepare", &a.common, &cfg, &out, &inputs)?.finish()?;
    println!("prepared {} ({} files)", out.display(), m.outputs.len());
    Ok(())
}

fn read_history(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let needs_init = a.stage == Stage::Multimodal && !a.from_scratch;
    if needs_init && a.init_from.is_none() && a.resume.is_none() {
        bail!(Usage(
            "the multimodal stage needs --init-from <checkpoint> (or --resume, or --from-scratch)".into()
        ));
    }
    for p in a.init_from.iter().chain(&a.resume) {
        require_file(p)?;
    }
    let stage_cfg = match a.stage {
        Stage::RgbPretrain => &mut cfg.pretrain,
        Stage::Multimodal => &mut cfg.multimodal,
    };
    stage_cfg.from_scratch |= a.from_scratch;
    if let Some(p) = a.dropout_p {
        stage_cfg.dropout.p = p;
    }
    if let Some(n) = a.iterations {
        stage_cfg.iterations = n;
    }
    let tcfg = stage_cfg.clone();
    cfg.validate()?;

    let datasets = a
        .data
        .iter()
        .map(|d| load_dataset(d, "train", &cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut previous = Vec::new();
    let (mut model, start) = if let Some(p) = &a.resume {
        let ck = load_checkpoint(p)?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Usage(format!("{} has no optimizer state to resume from", p.display())))?;
        let hist = p.with_file_name("history.csv");
        if hist.is_file() {
            previous = read_history(&hist)?;
            previous.retain(|r| r.iteration <= ck.iteration);
        }
        (
            ck.model,
            Start::Resume {
                iteration: ck.iteration,
                optimizer,
            },
        )
    } else if let Some(p) = &a.init_from {
        let ck = load_checkpoint(p)?;
        let start = if a.stage == Stage::Multimodal { Start::Pretrained } else { Start::Fresh };
        (ck.model, start)
    } else {
        (Model::new(cfg.model_config()?, cfg.seed)?, Start::Fresh)
    };

    let outcome = train_stage(&mut model, &datasets, &tcfg, start)?;
    let out = out_dir(&a.common, &tcfg.stage_name())?;
    let ck = Checkpoint {
        model,
        iteration: outcome.iteration,
        optimizer: Some(outcome.optimizer),
        metadata: serde_json::json!({ "stage": tcfg.stage, "train": tcfg, "seed": cfg.seed }),
    };
    save_checkpoint(&out.join("model.ckpt"), &ck)?;
    let mut w = csv::Writer::from_path(out.join("history.csv"))?;
    for r in previous.iter().chain(&outcome.history) {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&out.join("config.json"), &cfg)?;
    let mut inputs: Vec<&Path> = a.data.iter().map(PathBuf::as_path).collect();
    inputs.extend(a.init_from.iter().chain(&a.resume).map(PathBuf::as_path));
    let resolved: Vec<PathBuf> = inputs.iter().map(|p| resolve_data(p)).collect::<Result<_>>()?;
    let refs: Vec<&Path> = resolved.iter().map(PathBuf::as_path).collect();
    manifest("train", &a.common, &cfg, &out, &refs)?.finish()?;
    if let Some(last) = outcome.history.last() {
        println!("iteration {} loss {:.4}; wrote {}", last.iteration, last.total, out.display());
    }
    Ok(())
}

trait StageName {
    fn stage_name(&self) -> String;
}

impl StageName for mmfuse::train::TrainConfig {
    fn stage_name(&self) -> String {
        match self.stage {
            Stage::RgbPretrain => "rgb-pretrain".into(),
            Stage::Multimodal => "multimodal".into(),
        }
    }
}

fn scenario_file(s: Scenario) -> String {
    s.to_string().replace(':', "-")
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    require_file(&a.checkpoint)?;
    let model = load_checkpoint(&a.checkpoint)?.model;
    let datasets = a
        .data
        .iter()
        .map(|d| load_dataset(d, "test", &cfg))
        .collect::<Result<Vec<_>>>()?;
    let scenarios = if a.scenario.is_empty() {
        let present: BTreeSet<Modality> = datasets.iter().flat_map(|d| d.modalities()).collect();
        let mut s = vec![Scenario::Multimodal];
        s.extend(
            model
                .vocabulary()
                .modalities()
                .filter(|m| present.contains(m))
                .map(Scenario::Unimodal),
        );
        s
    } else {
        a.scenario.clone()
    };
    let out = out_dir(&a.common, "eval")?;
    for &s in &scenarios {
        let report = evaluate_scenario(&model, &datasets, s, &cfg.eval)?;
        write_json(&out.join(format!("metrics_{}.json", scenario_file(s))), &report)?;
        let mut dets = Vec::new();
        for d in &datasets {
            dets.extend(run_scenario(&model, d, s)?.1);
        }
        write_json(&out.join(format!("detections_{}.json", scenario_file(s))), &to_coco_results(&dets))?;
        let mr = report.overall.mr2.map_or("n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
        println!(
            "{s}: AP {:.1}  AP50 {:.1}  MR-2 {mr}  JI {:.1}  ({} images)",
            100.0 * report.overall.ap,
            100.0 * report.overall.ap50,
            100.0 * report.overall.ji,
            report.overall.images
        );
    }
    let mut inputs: Vec<PathBuf> = vec![a.checkpoint.clone()];
    inputs.extend(a.data.iter().map(|d| resolve_data(d)).collect::<Result<Vec<_>>>()?);
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    manifest("eval", &a.common, &cfg, &out, &refs)?.finish()?;
    Ok(())
}

/// Every non-empty subset of `mods`, smallest first.
fn combinations(mods: &[Modality]) -> Vec<Vec<Modality>> {
    let mut out: Vec<Vec<Modality>> = (1u32..(1 << mods.len()))
        .map(|mask| {
            mods.iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &m)| m)
                .collect()
        })
        .collect();
    out.sort_by_key(|c| c.len());
    out
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    require_file(&a.checkpoint)?;
    let model = load_checkpoint(&a.checkpoint)?.model;
    let datasets = a
        .data
        .iter()
        .map(|d| load_dataset(d, "test", &cfg))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<MultiModalSample> = datasets.into_iter().flat_map(|d| d.samples).collect();
    let data = Dataset::new("probe", samples);
    let mods: Vec<Modality> = if a.modality.is_empty() {
        let present = data.modalities();
        model.vocabulary().modalities().filter(|m| present.contains(m)).collect()
    } else {
        let mut m = a.modality.clone();
        m.sort();
        m.dedup();
        m
    };
    for m in &mods {
        if !model.vocabulary().contains(*m) {
            bail!(Usage(format!("model vocabulary lacks modality `{m}`")));
        }
    }
    // Samples are restricted to a subset of what they carry.
    let usable: Vec<MultiModalSample> = data
        .samples
        .into_iter()
        .filter(|s| mods.iter().all(|&m| s.is_valid(m)))
        .collect();
    if usable.is_empty() {
        bail!(Usage(format!("no sample carries all of {mods:?}")));
    }
    let probe_data = assign_combinations(&Dataset::new("probe", usable), &combinations(&mods), cfg.probe.seed)?;
    let (report, emb) = token_probe(&model, &probe_data, &cfg.probe)?;
    let out = out_dir(&a.common, "probe")?;
    write_json(&out.join("probe_report.json"), &report)?;
    write_embedding_csv(&out.join("embedding.csv"), &emb)?;
    let mut inputs: Vec<PathBuf> = vec![a.checkpoint.clone()];
    inputs.extend(a.data.iter().map(|d| resolve_data(d)).collect::<Result<Vec<_>>>()?);
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    manifest("probe", &a.common, &cfg, &out, &refs)?.finish()?;
    println!(
        "MAF probe: {:.1}% held-out ({} classes, chance {:.1}%), permuted {:.1}%",
        100.0 * report.maf_accuracy,
        report.combinations.len(),
        100.0 * report.chance,
        100.0 * report.maf_permuted_accuracy
    );
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    if a.history.is_none() && a.embedding.is_none() {
        bail!(Usage("plot needs --history and/or --embedding".into()));
    }
    let out = out_dir(&a.common, "plots")?;
    let mut inputs = Vec::new();
    if let Some(h) = &a.history {
        require_file(h)?;
        plot::plot_history(h, &out.join("loss.svg"))?;
        inputs.push(h.as_path());
    }
    if let Some(e) = &a.embedding {
        require_file(e)?;
        plot::plot_embedding(e, &out.join("embedding.svg"))?;
        inputs.push(e.as_path());
    }
    manifest("plot", &a.common, &cfg, &out, &inputs)?.finish()?;
    println!("wrote figures to {}", out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(mmfuse::Error::Config(_)) = cause.downcast_ref::<mmfuse::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
