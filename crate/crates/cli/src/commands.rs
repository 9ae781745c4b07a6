use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use ndarray::Array2;
use rayon::prelude::*;
use serde_json::json;

use trackcast_core::bundle::{Bundle, Space};
use trackcast_core::eval::baselines::{constant_velocity, no_motion, oracle_velocity};
use trackcast_core::eval::{evaluate, report_csv, EvalConfig, EvalExample, MetricReport};
use trackcast_core::pipeline::stats::{clip_displacement, motion_statistics, stats_csv, stats_svg};
use trackcast_core::pipeline::{process_clip, ClipReport, Detection, PipelineConfig};
use trackcast_core::synth::{generate_clip, write_clip, DatasetConfig, DatasetMode, DETECTIONS_FILE, RAW_DIR};
use trackcast_core::{Conditioning, TrackSet};
use trackcast_model::checkpoint::Checkpoint;
use trackcast_model::diffusion::Schedule;
use trackcast_model::forecast::{forecast, SamplerConfig};
use trackcast_model::trainer::{examples_from_bundle, train as run_training, RunOptions, TrainConfig};

use crate::data::{load_clips, parse_bucket};
use crate::error::{CliError, Result};
use crate::files::{dir_name, read_config, sha256_hex, subdirs, write_json, write_manifest, write_text, Staging};

pub const DATASET_FILE: &str = "dataset.json";
pub const PIPELINE_REPORT: &str = "pipeline_report.json";
pub const STATS_CSV: &str = "stats.csv";
pub const STATS_SVG: &str = "stats.svg";
pub const STATS_JSON: &str = "stats.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const TRAIN_CONFIG_COPY: &str = "train_config.json";

pub fn clip_name(index: usize) -> String {
    format!("clip_{index:05}")
}

pub fn sample_name(k: usize) -> String {
    format!("sample_{k:02}")
}

#[derive(Args)]
pub struct GenArgs {
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset config JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Only generate clips of one motion bucket: low, medium or high.
    #[arg(long, value_name = "BUCKET")]
    pub buckets_only: Option<String>,
}

pub fn gen(a: &GenArgs, verbose: bool) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config::<DatasetConfig>(p)?,
        None => DatasetConfig::new(300, 0),
    };
    if let Some(c) = a.clips {
        cfg.clips = c;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = &a.buckets_only {
        let bucket = parse_bucket(b)?;
        match cfg.mode {
            DatasetMode::Stratified { .. } => cfg.mode = DatasetMode::Stratified { buckets_only: Some(bucket) },
            DatasetMode::LogNormal { .. } => return Err(CliError::config("--buckets-only needs the stratified mode")),
        }
    }
    cfg.validate().map_err(|e| CliError::from(e).as_config())?;

    let stage = Staging::new(&a.out)?;
    let summaries = (0..cfg.clips)
        .into_par_iter()
        .map(|i| {
            let clip = generate_clip(&cfg, i)?;
            write_clip(&stage.dir.join(clip_name(i)), &clip)?;
            Ok(json!({
                "name": clip_name(i),
                "bucket": clip.bucket,
                "mean_motion_px": clip.mean_motion_px,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    if verbose {
        eprintln!("generated {} clips", summaries.len());
    }
    write_json(&stage.dir.join(DATASET_FILE), &json!({ "config": cfg, "clips": summaries }))?;
    write_manifest(&stage.dir, "gen", &serde_json::to_value(&cfg).expect("config serializes"), Some(cfg.seed))?;
    stage.commit()
}

#[derive(Args)]
pub struct PipelineArgs {
    /// Generator output: one directory per clip holding `raw/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn read_detections(path: &Path) -> Result<Option<Vec<Vec<Detection>>>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn pipeline(a: &PipelineArgs, verbose: bool) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => read_config::<PipelineConfig>(p)?,
        None => PipelineConfig::default(),
    };
    let clips: Vec<PathBuf> = subdirs(&a.data)?.into_iter().filter(|d| d.join(RAW_DIR).is_dir()).collect();
    if clips.is_empty() {
        return Err(CliError::data(format!("no raw clips under {}", a.data.display())));
    }
    let stage = Staging::new(&a.out)?;
    let reports = clips
        .par_iter()
        .map(|dir| {
            let name = dir_name(dir);
            let raw = Bundle::read(&dir.join(RAW_DIR))?;
            let dets = read_detections(&dir.join(DETECTIONS_FILE))?;
            let outcome = process_clip(&name, &raw, dets.as_deref(), &cfg)?;
            if let Some(b) = &outcome.bundle {
                b.write(&stage.dir.join(&name))?;
            }
            Ok(outcome.report)
        })
        .collect::<Result<Vec<ClipReport>>>()?;
    let accepted = reports.iter().filter(|r| r.accepted).count();
    let discard = 1.0 - accepted as f64 / reports.len() as f64;
    if verbose {
        eprintln!("pipeline kept {accepted} of {} clips", reports.len());
    }
    write_json(
        &stage.dir.join(PIPELINE_REPORT),
        &json!({
            "config": cfg,
            "n_clips": reports.len(),
            "n_accepted": accepted,
            "discard_fraction": discard,
            "clips": reports,
        }),
    )?;
    write_manifest(&stage.dir, "pipeline", &serde_json::to_value(&cfg).expect("config serializes"), None)?;
    stage.commit()
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Histogram bins.
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
}

pub fn stats(a: &StatsArgs, _verbose: bool) -> Result<()> {
    if a.bins == 0 {
        return Err(CliError::config("--bins must be positive"));
    }
    let clips = load_clips(&a.data)?;
    let disp: Vec<_> = clips.iter().map(|(_, b)| clip_displacement(&b.tracks)).collect();
    let stats = motion_statistics(&disp, a.bins)?;
    let stage = Staging::new(&a.out)?;
    write_text(&stage.dir.join(STATS_CSV), &stats_csv(&stats))?;
    write_text(&stage.dir.join(STATS_SVG), &stats_svg(&stats))?;
    write_json(&stage.dir.join(STATS_JSON), &stats)?;
    write_manifest(&stage.dir, "stats", &json!({ "bins": a.bins }), None)?;
    stage.commit()
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training config JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to continue from, written by an earlier run with the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

pub fn train(a: &TrainArgs, verbose: bool) -> Result<()> {
    let cfg: TrainConfig = read_config(&a.config)?;
    cfg.validate().map_err(|e| CliError::from(e).as_config())?;
    let clips = load_clips(&a.data)?;
    let mut examples = Vec::new();
    for (name, b) in &clips {
        if b.features.is_none() {
            return Err(CliError::data(format!("clip {name} has no per-track features")));
        }
        examples.extend(examples_from_bundle(&cfg.net, name, b, cfg.window_stride, cfg.pad_tracks)?);
    }
    if examples.is_empty() {
        return Err(CliError::data(format!("no clip is at least {} frames long", cfg.net.horizon)));
    }
    let resume = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.state.train_config != serde_json::to_value(&cfg).expect("config serializes") {
                return Err(CliError::config("checkpoint was trained with a different config"));
            }
            Some(ck)
        }
        None => {
            if a.out.exists() && fs::read_dir(&a.out).map_err(|e| CliError::io(&a.out, e))?.next().is_some() {
                return Err(CliError::data(format!("{} is not empty; pass --resume to continue", a.out.display())));
            }
            None
        }
    };
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    write_json(&a.out.join(TRAIN_CONFIG_COPY), &cfg)?;
    if verbose {
        eprintln!("training on {} windows from {} clips", examples.len(), clips.len());
    }
    let opts = RunOptions { out_dir: Some(a.out.clone()), max_steps: a.max_steps, quiet: !verbose, ..Default::default() };
    run_training(&cfg, &examples, resume, &opts)?;
    let manifest_cfg = json!({ "train": cfg, "max_steps": a.max_steps, "n_clips": clips.len(), "n_examples": examples.len() });
    write_manifest(&a.out, "train", &manifest_cfg, Some(cfg.seed))
}

/// How the displacement prompt is set when sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Displacement {
    None,
    Truth,
    Fixed([f64; 2]),
}

impl Displacement {
    pub fn parse(s: Option<&str>) -> Result<Displacement> {
        let Some(s) = s else { return Ok(Displacement::None) };
        if s == "gt" {
            return Ok(Displacement::Truth);
        }
        let parts: Vec<&str> = s.split(',').collect();
        let bad = || CliError::config(format!("--cond-displacement expects dx,dy or gt, got {s:?}"));
        if parts.len() != 2 {
            return Err(bad());
        }
        let dx: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let dy: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        if !(dx.is_finite() && dy.is_finite()) {
            return Err(bad());
        }
        Ok(Displacement::Fixed([dx, dy]))
    }

    fn apply(self, cond: Conditioning) -> Result<Conditioning> {
        Ok(match self {
            Displacement::None => cond.with_displacement(None)?,
            Displacement::Truth => cond,
            Displacement::Fixed(d) => cond.with_displacement(Some(d))?,
        })
    }
}

struct Model {
    ck: Checkpoint,
    schedule: Schedule,
    sha256: String,
}

fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes, path)?;
    let schedule = Schedule::new(&ck.schedule)?;
    Ok(Model { ck, schedule, sha256: sha256_hex(&bytes) })
}

fn check_sampler(model: &Model, s: &SamplerConfig) -> Result<()> {
    if s.steps == 0 || s.steps > model.schedule.steps() {
        return Err(CliError::config(format!("--steps must be in 1..={}", model.schedule.steps())));
    }
    if !(s.eta >= 0.0 && s.eta.is_finite()) {
        return Err(CliError::config("--eta must be finite and non-negative"));
    }
    Ok(())
}

/// The first `horizon` frames of a clip with `t_cond` history frames.
fn head_window(name: &str, tracks: &TrackSet, horizon: usize, t_cond: usize) -> Result<TrackSet> {
    if tracks.n_frames() < horizon {
        return Err(CliError::data(format!("clip {name} has {} frames, need {horizon}", tracks.n_frames())));
    }
    Ok(tracks.window(0, horizon, t_cond)?)
}

/// `k` forecasts of one clip with seeds `seed..seed + k`.
#[allow(clippy::too_many_arguments)]
fn forecast_clip(
    model: &Model,
    name: &str,
    bundle: &Bundle,
    k: usize,
    seed: u64,
    sampler: SamplerConfig,
    disp: Displacement,
    history: bool,
) -> Result<(TrackSet, Conditioning, Vec<TrackSet>)> {
    let net = &model.ck.net;
    let window = head_window(name, &bundle.tracks, net.horizon, net.t_cond)?;
    let features: Array2<f64> = match &bundle.features {
        Some(f) => f.clone(),
        None => return Err(CliError::data(format!("clip {name} has no per-track features"))),
    };
    let mut cond = disp.apply(Conditioning::from_tracks(&window)?)?;
    if !history {
        cond = cond.without_history();
    }
    let samples = (0..k as u64)
        .map(|j| forecast(net, &model.ck.ema, &model.schedule, &window, features.view(), &cond, sampler, seed + j))
        .collect::<trackcast_model::Result<Vec<_>>>()?;
    Ok((window, cond, samples))
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub num_samples: usize,
    /// Seed of the first sample; sample j uses seed + j.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// DDIM steps.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Displacement prompt `dx,dy` in normalized units, or `gt` for the
    /// clip's own displacement. Unconditioned when omitted.
    #[arg(long, allow_hyphen_values = true)]
    pub cond_displacement: Option<String>,
    /// Ignore the observed history frames.
    #[arg(long)]
    pub no_history: bool,
}

pub fn sample(a: &SampleArgs, verbose: bool) -> Result<()> {
    if a.num_samples == 0 {
        return Err(CliError::config("--num-samples must be positive"));
    }
    let disp = Displacement::parse(a.cond_displacement.as_deref())?;
    let model = load_model(&a.checkpoint)?;
    let sampler = SamplerConfig { steps: a.steps, eta: a.eta };
    check_sampler(&model, &sampler)?;
    let clips = load_clips(&a.data)?;
    let stage = Staging::new(&a.out)?;
    clips
        .par_iter()
        .map(|(name, b)| {
            let (_, cond, samples) = forecast_clip(&model, name, b, a.num_samples, a.seed, sampler, disp, !a.no_history)?;
            for (j, tracks) in samples.into_iter().enumerate() {
                let mut out = Bundle::new(tracks, Space::Normalized);
                out.scale_v = model.ck.net.scale_v;
                out.scale_o = model.ck.net.scale_o;
                out.features = b.features.clone();
                out.provenance = json!({
                    "clip": name,
                    "seed": a.seed + j as u64,
                    "steps": a.steps,
                    "eta": a.eta,
                    "displacement": cond.displacement,
                    "history": cond.history_present,
                });
                out.write(&stage.dir.join(name).join(sample_name(j)))?;
            }
            if verbose {
                eprintln!("sampled {name}");
            }
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    let manifest_cfg = json!({
        "checkpoint_sha256": model.sha256,
        "num_samples": a.num_samples,
        "steps": a.steps,
        "eta": a.eta,
        "cond_displacement": a.cond_displacement,
        "no_history": a.no_history,
    });
    write_manifest(&stage.dir, "sample", &manifest_cfg, Some(a.seed))?;
    stage.commit()
}

pub const METHODS: [&str; 5] = ["no-motion", "const-vel", "oracle-vel", "model-uncond", "model-cond"];

#[derive(Args)]
pub struct EvalArgs {
    /// Held-out clips.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of no-motion, const-vel, oracle-vel,
    /// model-uncond, model-cond.
    #[arg(long, default_value = "no-motion,const-vel,oracle-vel")]
    pub methods: String,
    /// Sample model forecasts from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Pre-computed unconditioned samples (`sample` output).
    #[arg(long)]
    pub uncond_samples: Option<PathBuf>,
    /// Pre-computed displacement-conditioned samples (`sample` output).
    #[arg(long)]
    pub cond_samples: Option<PathBuf>,
    /// Eval config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Frames scored per clip, history included. Defaults to the model
    /// horizon, or the full clip for baselines only.
    #[arg(long)]
    pub horizon: Option<usize>,
}

fn parse_methods(s: &str) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for m in s.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        if !METHODS.contains(&m) {
            return Err(CliError::config(format!("unknown method {m:?}; expected one of {}", METHODS.join(", "))));
        }
        if !out.iter().any(|o| o == m) {
            out.push(m.to_string());
        }
    }
    if out.is_empty() {
        return Err(CliError::config("no methods selected"));
    }
    Ok(out)
}

/// `<dir>/<clip>/sample_*` bundles for every clip, in clip order.
fn read_samples(dir: &Path, names: &[String]) -> Result<Vec<Vec<TrackSet>>> {
    names
        .iter()
        .map(|name| {
            let clip_dir = dir.join(name);
            let found: Vec<PathBuf> = if clip_dir.is_dir() { subdirs(&clip_dir)? } else { Vec::new() };
            let samples = found
                .iter()
                .filter(|p| dir_name(p).starts_with("sample_"))
                .map(|p| Bundle::read(p).map(|b| b.tracks))
                .collect::<trackcast_core::Result<Vec<_>>>()?;
            if samples.is_empty() {
                return Err(CliError::data(format!("no samples for clip {name} in {}", dir.display())));
            }
            Ok(samples)
        })
        .collect()
}

pub fn eval(a: &EvalArgs, verbose: bool) -> Result<()> {
    let methods = parse_methods(&a.methods)?;
    let ecfg = match &a.config {
        Some(p) => read_config::<EvalConfig>(p)?,
        None => EvalConfig::default(),
    };
    ecfg.validate().map_err(|e| CliError::from(e).as_config())?;
    let model = a.checkpoint.as_deref().map(load_model).transpose()?;
    let sampler = SamplerConfig { steps: a.steps, eta: a.eta };
    if let Some(m) = &model {
        check_sampler(m, &sampler)?;
    }
    for (method, dir) in [("model-uncond", &a.uncond_samples), ("model-cond", &a.cond_samples)] {
        if methods.iter().any(|m| m == method) && dir.is_none() && model.is_none() {
            return Err(CliError::config(format!("{method} needs --checkpoint or pre-computed samples")));
        }
    }

    let clips = load_clips(&a.data)?;
    let names: Vec<String> = clips.iter().map(|(n, _)| n.clone()).collect();
    let horizon = a.horizon.or(model.as_ref().map(|m| m.ck.net.horizon));
    let examples = clips
        .iter()
        .map(|(name, b)| {
            let t_cond = model.as_ref().map_or(b.tracks.t_cond, |m| m.ck.net.t_cond);
            let gt = match horizon {
                Some(h) => head_window(name, &b.tracks, h, t_cond)?,
                None => b.tracks.clone(),
            };
            Ok(EvalExample { name: name.clone(), gt })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut reports: Vec<MetricReport> = Vec::new();
    for method in &methods {
        let preds: Vec<Vec<TrackSet>> = match method.as_str() {
            "no-motion" => examples.iter().map(|e| Ok(vec![no_motion(&e.gt)?])).collect::<Result<_>>()?,
            "const-vel" => examples.iter().map(|e| Ok(vec![constant_velocity(&e.gt)?])).collect::<Result<_>>()?,
            "oracle-vel" => examples.iter().map(|e| Ok(vec![oracle_velocity(&e.gt, &e.gt)?])).collect::<Result<_>>()?,
            "model-uncond" | "model-cond" => {
                let (dir, disp) = if method == "model-uncond" {
                    (&a.uncond_samples, Displacement::None)
                } else {
                    (&a.cond_samples, Displacement::Truth)
                };
                match (dir, &model) {
                    (Some(d), _) => read_samples(d, &names)?,
                    (None, Some(m)) => clips
                        .par_iter()
                        .map(|(name, b)| Ok(forecast_clip(m, name, b, ecfg.k, a.seed, sampler, disp, true)?.2))
                        .collect::<Result<_>>()?,
                    (None, None) => unreachable!("checked above"),
                }
            }
            _ => unreachable!("methods are validated"),
        };
        let report = evaluate(method, &examples, &preds, &ecfg)?;
        if verbose {
            if let Some(all) = report.row("all") {
                eprintln!("{method}: ade {:?} fde {:?} pwt {:?} fvmd {:?}", all.ade, all.fde, all.pwt, all.fvmd);
            }
        }
        reports.push(report);
    }

    let stage = Staging::new(&a.out)?;
    write_text(&stage.dir.join(REPORT_CSV), &report_csv(&reports))?;
    write_json(&stage.dir.join(REPORT_JSON), &json!({ "config": ecfg, "horizon": horizon, "reports": reports }))?;
    let manifest_cfg = json!({
        "eval": ecfg,
        "methods": methods,
        "steps": a.steps,
        "eta": a.eta,
        "horizon": horizon,
        "checkpoint_sha256": model.as_ref().map(|m| m.sha256.clone()),
    });
    write_manifest(&stage.dir, "eval", &manifest_cfg, Some(a.seed))?;
    stage.commit()
}
