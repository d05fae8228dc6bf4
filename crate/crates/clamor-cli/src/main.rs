//! Command-line front door for the `clamor` toolkit: corpus synthesis from
//! JSONL manifests, deterministic asset splitting, impulse-response
//! analysis, the heuristic SNR baseline, and batch evaluation reports.
//!
//! Exit codes are script-friendly: `0` on success, `1` when the run
//! completed but some items failed (or a check reported FAIL), `2` for
//! invalid flags, an unreadable config file, or unusable inputs.
//!
//! Every long flag may instead be supplied by a JSON config file passed
//! with `--config FILE`, keyed by the flag's long name (`"p-rir"`,
//! `"workers"`, ...). Explicit flags beat config values, which beat
//! built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use clamor::contamination::{
    FrameGrid, RecipeParams, DEFAULT_NS_RATIO, DEFAULT_P_RIR, DEFAULT_SNR_RANGE_DB,
    FRAME_DURATION_S,
};
use clamor::corpus::{
    read_activity, read_asset_manifest, read_manifest, read_rttm, read_snr_csv, split_assets,
    write_jsonl, AssetRecord, RunConfig, Split,
};
use clamor::heuristic::{heuristic_snr, HeuristicConfig, DEFAULT_HEURISTIC_WINDOW_S};
use clamor::loss::gradient_check;
use clamor::metrics::{bin_report, mae, vad_fscore_with_collar, DetectionCounts};
use clamor::rir::{compute_c50, RoomImpulseResponse};
use clamor::wav::read_wav;

/// Acceptance threshold for the analytic-vs-finite-difference check.
const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "clamor",
    version,
    about = "Synthesize labeled noisy/reverberant speech corpora and evaluate estimators"
)]
struct Cli {
    /// Master seed for every randomized decision.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for synthesis (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Log more (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// JSON config file; keys are long flag names, flags win over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled corpus from speech/noise/RIR manifests.
    Synthesize(SynthesizeArgs),
    /// Tag an asset manifest with a seeded 80/10/10 train/dev/test split.
    SplitAssets(SplitAssetsArgs),
    /// Report onset and C50 for impulse-response WAVs as CSV.
    AnalyzeRir(AnalyzeRirArgs),
    /// Estimate per-frame SNR of a mixture from windowed powers and oracle VAD.
    SnrHeuristic(SnrHeuristicArgs),
    /// Frame-level VAD precision/recall/F against reference RTTMs.
    EvalVad(EvalVadArgs),
    /// Frame-level MAE of predicted SNR or C50 tracks against gold.
    EvalRegression(EvalRegressionArgs),
    /// Mean outcome per conditioning-value quantile bin, with standard errors.
    BinReport(BinReportArgs),
    /// Verify analytic loss gradients against central finite differences.
    LossCheck(LossCheckArgs),
}

#[derive(Args)]
struct SynthesizeArgs {
    /// JSONL manifest of clean utterances: {utterance_id, wav_path, activity_path, split?}.
    #[arg(long)]
    speech: Option<PathBuf>,
    /// JSONL manifest of noise WAVs: {id?, wav_path, split?}.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// JSONL manifest of impulse-response WAVs: {id?, wav_path, split?}.
    #[arg(long)]
    rir: Option<PathBuf>,
    /// Output corpus directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Probability that speech (and, independently, noise) is reverberated.
    #[arg(long)]
    p_rir: Option<f64>,
    /// Lower edge of the uniform target-SNR range, dB.
    #[arg(long, allow_negative_numbers = true)]
    snr_min: Option<f64>,
    /// Upper edge of the uniform target-SNR range, dB.
    #[arg(long, allow_negative_numbers = true)]
    snr_max: Option<f64>,
    /// Non-speech fraction guaranteed by silence extension.
    #[arg(long)]
    ns_ratio: Option<f64>,
}

#[derive(Args)]
struct SplitAssetsArgs {
    /// JSONL asset manifest to split.
    #[arg(long, visible_alias = "ids")]
    assets: Option<PathBuf>,
    /// Train fraction.
    #[arg(long)]
    train_frac: Option<f64>,
    /// Dev fraction.
    #[arg(long)]
    dev_frac: Option<f64>,
    /// Test fraction.
    #[arg(long)]
    test_frac: Option<f64>,
    /// Write the tagged manifest here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeRirArgs {
    /// Impulse-response WAV files to analyze.
    #[arg(required = true, value_name = "WAV")]
    wavs: Vec<PathBuf>,
}

#[derive(Args)]
struct SnrHeuristicArgs {
    /// Mixture WAV to estimate from.
    #[arg(long)]
    wav: Option<PathBuf>,
    /// Oracle speech segmentation (RTTM or onset,offset CSV).
    #[arg(long)]
    vad: Option<PathBuf>,
    /// Analysis window in seconds, centered on each frame.
    #[arg(long)]
    window: Option<f64>,
    /// Value for speech frames whose window holds no non-speech frame
    /// (default: the utterance's mean estimate over frames that have one).
    #[arg(long, allow_negative_numbers = true)]
    fallback_db: Option<f64>,
    /// Write the frame_index,snr_db CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalVadArgs {
    /// Directory of reference RTTM files.
    #[arg(long = "ref", visible_alias = "reference")]
    reference: Option<PathBuf>,
    /// Directory of hypothesis RTTM files, paired by utterance id.
    #[arg(long = "hyp", visible_alias = "hypothesis")]
    hypothesis: Option<PathBuf>,
    /// Frame duration in seconds.
    #[arg(long)]
    frame: Option<f64>,
    /// Forgiveness collar around reference boundaries, seconds.
    #[arg(long)]
    collar: Option<f64>,
}

#[derive(Args)]
struct EvalRegressionArgs {
    /// Directory of predicted per-frame tracks.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Directory of gold per-frame tracks.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Which track to evaluate: files are named <id>.<task>.csv.
    #[arg(long, value_enum)]
    task: Option<Task>,
    /// Clamp both tracks to this range before differencing, dB.
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"], allow_negative_numbers = true)]
    clamp: Option<Vec<f64>>,
}

#[derive(Args)]
struct BinReportArgs {
    /// One conditioning value per line (an optional header line is skipped).
    #[arg(long)]
    cond: Option<PathBuf>,
    /// One outcome value per line, aligned with --cond.
    #[arg(long)]
    outcome: Option<PathBuf>,
    /// Number of equal-count bins.
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args)]
struct LossCheckArgs {
    /// Number of random batches to sweep.
    #[arg(long)]
    batches: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Task {
    Snr,
    C50,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Snr => "snr",
            Task::C50 => "c50",
        }
    }
}

/// A command failure, split by exit code: `Runtime` exits 1 (the run
/// happened but items failed), `Usage` exits 2 (nothing could run).
enum Failure {
    Runtime(anyhow::Error),
    Usage(anyhow::Error),
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

type CmdResult = Result<(), Failure>;

/// Keys the config file may define; anything else draws a warning so
/// typos do not silently fall back to defaults.
const KNOWN_KEYS: &[&str] = &[
    "seed", "workers", "verbose", "speech", "noise", "rir", "out", "p-rir", "snr-min", "snr-max",
    "ns-ratio", "assets", "train-frac", "dev-frac", "test-frac", "wav", "vad", "window",
    "fallback-db", "ref", "hyp", "frame", "collar", "pred", "gold", "task", "clamp", "cond",
    "outcome", "bins", "batches",
];

/// Values from `--config FILE`, consulted wherever a flag was omitted.
struct Config {
    map: serde_json::Map<String, serde_json::Value>,
}

impl Config {
    fn empty() -> Self {
        Self { map: serde_json::Map::new() }
    }

    fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))
            .map_err(usage)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))
            .map_err(usage)?;
        match value {
            serde_json::Value::Object(map) => Ok(Self { map }),
            other => Err(usage(anyhow!(
                "config file {} must hold a JSON object, got {other}",
                path.display()
            ))),
        }
    }

    fn warn_unknown_keys(&self) {
        for key in self.map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                log::warn!("config key '{key}' matches no flag and is ignored");
            }
        }
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, Failure> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .map(Some)
                .ok_or_else(|| usage(anyhow!("config key '{key}' must be a number, got {v}"))),
        }
    }

    fn u64(&self, key: &str) -> Result<Option<u64>, Failure> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.as_u64().map(Some).ok_or_else(|| {
                usage(anyhow!("config key '{key}' must be a non-negative integer, got {v}"))
            }),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>, Failure> {
        Ok(self.u64(key)?.map(|v| v as usize))
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>, Failure> {
        match self.map.get(key) {
            None => Ok(None),
            Some(serde_json::Value::String(s)) => Ok(Some(PathBuf::from(s))),
            Some(v) => Err(usage(anyhow!("config key '{key}' must be a string path, got {v}"))),
        }
    }

    /// `--verbose` repetition count: `true` counts as 1, a number as itself.
    fn verbosity(&self) -> Result<u8, Failure> {
        match self.map.get("verbose") {
            None => Ok(0),
            Some(serde_json::Value::Bool(b)) => Ok(u8::from(*b)),
            Some(v) => match v.as_u64() {
                Some(n) => Ok(n.min(u8::MAX as u64) as u8),
                None => Err(usage(anyhow!("config key 'verbose' must be a bool or integer"))),
            },
        }
    }

    fn f64_pair(&self, key: &str) -> Result<Option<(f64, f64)>, Failure> {
        match self.map.get(key) {
            None => Ok(None),
            Some(serde_json::Value::Array(items)) if items.len() == 2 => {
                match (items[0].as_f64(), items[1].as_f64()) {
                    (Some(a), Some(b)) => Ok(Some((a, b))),
                    _ => Err(usage(anyhow!("config key '{key}' must hold two numbers"))),
                }
            }
            Some(v) => Err(usage(anyhow!(
                "config key '{key}' must be an array of two numbers, got {v}"
            ))),
        }
    }

    fn task(&self) -> Result<Option<Task>, Failure> {
        match self.map.get("task") {
            None => Ok(None),
            Some(serde_json::Value::String(s)) => match s.as_str() {
                "snr" => Ok(Some(Task::Snr)),
                "c50" => Ok(Some(Task::C50)),
                other => Err(usage(anyhow!("config key 'task' must be snr or c50, got '{other}'"))),
            },
            Some(v) => Err(usage(anyhow!("config key 'task' must be a string, got {v}"))),
        }
    }
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T, Failure> {
    value.ok_or_else(|| usage(anyhow!("missing --{flag} (pass the flag or set '{flag}' in the config file)")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::empty(),
    };

    let verbosity = cli.verbose.max(config.verbosity()?);
    let level = match verbosity {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    config.warn_unknown_keys();

    let seed = match cli.seed {
        Some(s) => s,
        None => config.u64("seed")?.unwrap_or(0),
    };
    let workers = match cli.workers {
        Some(w) => w,
        None => config.usize("workers")?.unwrap_or_else(default_workers),
    };
    if workers == 0 {
        return Err(usage(anyhow!("--workers must be at least 1")));
    }

    match cli.command {
        Command::Synthesize(args) => cmd_synthesize(args, &config, seed, workers),
        Command::SplitAssets(args) => cmd_split_assets(args, &config, seed),
        Command::AnalyzeRir(args) => cmd_analyze_rir(args),
        Command::SnrHeuristic(args) => cmd_snr_heuristic(args, &config),
        Command::EvalVad(args) => cmd_eval_vad(args, &config),
        Command::EvalRegression(args) => cmd_eval_regression(args, &config),
        Command::BinReport(args) => cmd_bin_report(args, &config),
        Command::LossCheck(args) => cmd_loss_check(args, &config, seed),
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn cmd_synthesize(args: SynthesizeArgs, config: &Config, seed: u64, workers: usize) -> CmdResult {
    let speech = require(args.speech.or(config.path("speech")?), "speech")?;
    let noise = require(args.noise.or(config.path("noise")?), "noise")?;
    let rir = require(args.rir.or(config.path("rir")?), "rir")?;
    let out_dir = require(args.out.or(config.path("out")?), "out")?;
    let params = RecipeParams {
        p_rir: args.p_rir.or(config.f64("p-rir")?).unwrap_or(DEFAULT_P_RIR),
        snr_range_db: (
            args.snr_min.or(config.f64("snr-min")?).unwrap_or(DEFAULT_SNR_RANGE_DB.0),
            args.snr_max.or(config.f64("snr-max")?).unwrap_or(DEFAULT_SNR_RANGE_DB.1),
        ),
        ns_ratio: args.ns_ratio.or(config.f64("ns-ratio")?).unwrap_or(DEFAULT_NS_RATIO),
    };

    let manifest = read_manifest(&speech)
        .with_context(|| format!("reading speech manifest {}", speech.display()))
        .map_err(usage)?;
    let noise_records = read_asset_manifest(&noise)
        .with_context(|| format!("reading noise manifest {}", noise.display()))
        .map_err(usage)?;
    let rir_records = read_asset_manifest(&rir)
        .with_context(|| format!("reading impulse-response manifest {}", rir.display()))
        .map_err(usage)?;

    let run = RunConfig { master_seed: seed, params, workers, out_dir };
    // Errors here mean the run never got off the ground (bad parameters,
    // unloadable assets, invalid split tagging): invalid configuration.
    let summary = clamor::corpus::run_synthesis(&manifest, &noise_records, &rir_records, &run)
        .map_err(usage)?;

    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    if summary.failed > 0 {
        return Err(runtime(anyhow!(
            "{} of {} utterances failed; see the log above",
            summary.failed,
            summary.utterances
        )));
    }
    Ok(())
}

fn cmd_split_assets(args: SplitAssetsArgs, config: &Config, seed: u64) -> CmdResult {
    let assets_path = require(args.assets.or(config.path("assets")?), "assets")?;
    let fractions = (
        args.train_frac.or(config.f64("train-frac")?).unwrap_or(0.8),
        args.dev_frac.or(config.f64("dev-frac")?).unwrap_or(0.1),
        args.test_frac.or(config.f64("test-frac")?).unwrap_or(0.1),
    );
    let out = args.out.or(config.path("out")?);

    let records = read_asset_manifest(&assets_path)
        .with_context(|| format!("reading asset manifest {}", assets_path.display()))
        .map_err(usage)?;
    let mut ids = Vec::with_capacity(records.len());
    for record in &records {
        let id = record.resolved_id().ok_or_else(|| {
            usage(anyhow!("asset {} has no id and no usable file stem", record.wav_path.display()))
        })?;
        ids.push(id);
    }

    let split = split_assets(&ids, fractions, seed).map_err(usage)?;
    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    for id in &split.train {
        assignment.insert(id, Split::Train);
    }
    for id in &split.dev {
        assignment.insert(id, Split::Dev);
    }
    for id in &split.test {
        assignment.insert(id, Split::Test);
    }

    let tagged: Vec<AssetRecord> = records
        .iter()
        .zip(&ids)
        .map(|(record, id)| AssetRecord {
            id: record.id.clone(),
            wav_path: record.wav_path.clone(),
            split: Some(assignment[id.as_str()]),
        })
        .collect();

    log::info!(
        "split {} assets into train {} / dev {} / test {}",
        ids.len(),
        split.train.len(),
        split.dev.len(),
        split.test.len()
    );
    match out {
        Some(path) => write_jsonl(&path, &tagged).map_err(runtime)?,
        None => {
            for record in &tagged {
                println!("{}", serde_json::to_string(record).expect("record serializes"));
            }
        }
    }
    Ok(())
}

fn cmd_analyze_rir(args: AnalyzeRirArgs) -> CmdResult {
    println!("path,onset_ms,c50_db");
    let mut failures = 0usize;
    let mut analyzed = 0usize;
    for path in &args.wavs {
        match analyze_one_rir(path) {
            Ok((onset_ms, c50_db)) => {
                println!("{},{onset_ms:.3},{c50_db:.4}", path.display());
                analyzed += 1;
            }
            Err(e) => {
                log::error!("{}: {e:#}", path.display());
                failures += 1;
            }
        }
    }
    if analyzed == 0 {
        Err(usage(anyhow!("no impulse response could be analyzed")))
    } else if failures > 0 {
        Err(runtime(anyhow!("{failures} of {} files failed", args.wavs.len())))
    } else {
        Ok(())
    }
}

fn analyze_one_rir(path: &Path) -> anyhow::Result<(f64, f64)> {
    let audio = read_wav(path)?;
    let rate = audio.sample_rate();
    let rir = RoomImpulseResponse::new(audio)?;
    let onset_ms = rir.onset_index() as f64 * 1000.0 / rate as f64;
    Ok((onset_ms, compute_c50(&rir).c50_db))
}

fn cmd_snr_heuristic(args: SnrHeuristicArgs, config: &Config) -> CmdResult {
    let wav = require(args.wav.or(config.path("wav")?), "wav")?;
    let vad_path = require(args.vad.or(config.path("vad")?), "vad")?;
    let window = args
        .window
        .or(config.f64("window")?)
        .unwrap_or(DEFAULT_HEURISTIC_WINDOW_S);
    let fallback = args.fallback_db.or(config.f64("fallback-db")?);
    let out = args.out.or(config.path("out")?);

    let audio = read_wav(&wav)
        .with_context(|| format!("reading {}", wav.display()))
        .map_err(usage)?;
    let activity = read_activity(&vad_path)
        .with_context(|| format!("reading {}", vad_path.display()))
        .map_err(usage)?;
    let grid = FrameGrid::for_buffer(&audio);
    let vad = grid.rasterize(&activity, audio.sample_rate());

    let estimates = match fallback {
        Some(db) => {
            let config = HeuristicConfig::new(window, db);
            heuristic_snr(&audio, &vad, &grid, &config).map_err(usage)?.0
        }
        None => {
            // No fallback given: default to the utterance's mean estimate.
            // A NaN fallback marks the frames that needed one, then a second
            // pass fills them with the mean of the frames that did not.
            let probe = HeuristicConfig::new(window, f64::NAN);
            let (first, diagnostics) = heuristic_snr(&audio, &vad, &grid, &probe).map_err(usage)?;
            if diagnostics.fallback_frames == 0 {
                first
            } else {
                let estimable: Vec<f64> = first.iter().copied().filter(|v| v.is_finite()).collect();
                if estimable.is_empty() {
                    return Err(usage(anyhow!(
                        "every speech frame needs the fallback (no non-speech frame in any \
                         window); pass --fallback-db explicitly"
                    )));
                }
                let mean = estimable.iter().sum::<f64>() / estimable.len() as f64;
                log::info!(
                    "defaulting fallback to the utterance mean {mean:.3} dB \
                     ({} estimable frames, {} fallback frames)",
                    estimable.len(),
                    diagnostics.fallback_frames
                );
                let config = HeuristicConfig::new(window, mean);
                heuristic_snr(&audio, &vad, &grid, &config).map_err(usage)?.0
            }
        }
    };

    let text = snr_csv_text(&estimates);
    match out {
        Some(path) => fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// The `frame_index,snr_db` CSV with an empty value on undefined frames —
/// the same format the synthesis pipeline writes.
fn snr_csv_text(snr_db: &[f64]) -> String {
    let mut out = String::from("frame_index,snr_db\n");
    for (k, v) in snr_db.iter().enumerate() {
        if v.is_nan() {
            writeln!(out, "{k},").expect("writing to String cannot fail");
        } else {
            writeln!(out, "{k},{v}").expect("writing to String cannot fail");
        }
    }
    out
}

fn cmd_eval_vad(args: EvalVadArgs, config: &Config) -> CmdResult {
    let ref_dir = require(args.reference.or(config.path("ref")?), "ref")?;
    let hyp_dir = require(args.hypothesis.or(config.path("hyp")?), "hyp")?;
    let frame = args.frame.or(config.f64("frame")?).unwrap_or(FRAME_DURATION_S);
    let collar = args.collar.or(config.f64("collar")?).unwrap_or(0.0);

    let references = rttm_files(&ref_dir)?;
    if references.is_empty() {
        return Err(usage(anyhow!("no .rttm files in {}", ref_dir.display())));
    }

    let mut rows = Vec::new();
    let mut merged = DetectionCounts::default();
    let mut failures = 0usize;
    for (id, ref_path) in &references {
        match eval_vad_pair(ref_path, &hyp_dir, id, frame, collar) {
            Ok(counts) => {
                merged.merge(&counts);
                rows.push((id.clone(), counts));
            }
            Err(e) => {
                log::error!("{id}: {e:#}");
                failures += 1;
            }
        }
    }

    if rows.is_empty() {
        return Err(usage(anyhow!("no reference/hypothesis pair could be evaluated")));
    }
    println!("file,precision,recall,f_score");
    for (id, counts) in &rows {
        println!(
            "{id},{:.6},{:.6},{:.6}",
            counts.precision(),
            counts.recall(),
            counts.f_score()
        );
    }
    println!(
        "TOTAL,{:.6},{:.6},{:.6}",
        merged.precision(),
        merged.recall(),
        merged.f_score()
    );
    if failures > 0 {
        return Err(runtime(anyhow!("{failures} of {} files failed", references.len())));
    }
    Ok(())
}

fn eval_vad_pair(
    ref_path: &Path,
    hyp_dir: &Path,
    id: &str,
    frame: f64,
    collar: f64,
) -> anyhow::Result<DetectionCounts> {
    let hyp_path = find_counterpart(hyp_dir, id, &[".vad.rttm", ".rttm"])
        .ok_or_else(|| anyhow!("no hypothesis RTTM for '{id}' in {}", hyp_dir.display()))?;
    let reference = read_rttm(ref_path)?;
    let hypothesis = read_rttm(&hyp_path)?;
    // Cover every annotated instant: round the later end up to whole frames
    // (at least one frame so empty-vs-empty still evaluates).
    let end = reference.end().max(hypothesis.end()).max(frame);
    let duration = (end / frame).ceil() * frame;
    Ok(vad_fscore_with_collar(&reference, &hypothesis, duration, frame, collar)?)
}

fn cmd_eval_regression(args: EvalRegressionArgs, config: &Config) -> CmdResult {
    let pred_dir = require(args.pred.or(config.path("pred")?), "pred")?;
    let gold_dir = require(args.gold.or(config.path("gold")?), "gold")?;
    let task = require(args.task.or(config.task()?), "task")?;
    let clamp = match args.clamp {
        Some(values) => Some((values[0], values[1])),
        None => config.f64_pair("clamp")?,
    };
    if let Some((low, high)) = clamp {
        if !low.is_finite() || !high.is_finite() || low >= high {
            return Err(usage(anyhow!("--clamp needs finite LOW < HIGH, got {low} {high}")));
        }
    }

    let suffix = format!(".{}.csv", task.name());
    let golds = files_with_suffix(&gold_dir, &suffix)?;
    if golds.is_empty() {
        return Err(usage(anyhow!("no *{suffix} files in {}", gold_dir.display())));
    }

    let mut rows = Vec::new();
    let mut weighted_sum = 0.0f64;
    let mut total_frames = 0usize;
    let mut failures = 0usize;
    for (id, gold_path) in &golds {
        match eval_regression_pair(gold_path, &pred_dir, id, &suffix, clamp) {
            Ok((frames, value)) => {
                weighted_sum += value * frames as f64;
                total_frames += frames;
                rows.push((id.clone(), frames, value));
            }
            Err(e) => {
                log::error!("{id}: {e:#}");
                failures += 1;
            }
        }
    }

    if rows.is_empty() {
        return Err(usage(anyhow!("no prediction/gold pair could be evaluated")));
    }
    println!("file,frames,mae_db");
    for (id, frames, value) in &rows {
        println!("{id},{frames},{value:.6}");
    }
    println!("TOTAL,{total_frames},{:.6}", weighted_sum / total_frames as f64);
    if failures > 0 {
        return Err(runtime(anyhow!("{failures} of {} files failed", golds.len())));
    }
    Ok(())
}

fn eval_regression_pair(
    gold_path: &Path,
    pred_dir: &Path,
    id: &str,
    suffix: &str,
    clamp: Option<(f64, f64)>,
) -> anyhow::Result<(usize, f64)> {
    let pred_path = find_counterpart(pred_dir, id, &[suffix, ".csv"])
        .ok_or_else(|| anyhow!("no prediction track for '{id}' in {}", pred_dir.display()))?;
    let gold = read_snr_csv(gold_path)?;
    let pred = read_snr_csv(&pred_path)?;
    if gold.len() != pred.len() {
        anyhow::bail!("gold has {} frames but prediction has {}", gold.len(), pred.len());
    }
    // Evaluate where both tracks are defined; each uses NaN off-speech.
    let mask: Vec<bool> = gold
        .iter()
        .zip(&pred)
        .map(|(g, p)| g.is_finite() && p.is_finite())
        .collect();
    let frames = mask.iter().filter(|&&m| m).count();
    if frames == 0 {
        anyhow::bail!("no frame where both tracks are defined");
    }
    let value = mae(&pred, &gold, Some(&mask), clamp)?;
    Ok((frames, value))
}

fn cmd_bin_report(args: BinReportArgs, config: &Config) -> CmdResult {
    let cond_path = require(args.cond.or(config.path("cond")?), "cond")?;
    let outcome_path = require(args.outcome.or(config.path("outcome")?), "outcome")?;
    let bins = args.bins.or(config.usize("bins")?).unwrap_or(10);
    if bins == 0 {
        return Err(usage(anyhow!("--bins must be at least 1")));
    }

    let cond = read_column(&cond_path)?;
    let outcome = read_column(&outcome_path)?;
    if cond.len() != outcome.len() {
        return Err(usage(anyhow!(
            "{} has {} values but {} has {}",
            cond_path.display(),
            cond.len(),
            outcome_path.display(),
            outcome.len()
        )));
    }

    let report = bin_report(&cond, &outcome, bins).map_err(usage)?;
    println!("bin,low,high,count,mean_outcome,std_error");
    for (i, bin) in report.bins.iter().enumerate() {
        println!(
            "{},{:.6},{:.6},{},{:.6},{:.6}",
            i + 1,
            report.bin_edges[i],
            report.bin_edges[i + 1],
            bin.count,
            bin.mean_outcome,
            bin.std_error
        );
    }
    Ok(())
}

fn cmd_loss_check(args: LossCheckArgs, config: &Config, seed: u64) -> CmdResult {
    let batches = args.batches.or(config.usize("batches")?).unwrap_or(100);
    if batches == 0 {
        return Err(usage(anyhow!("--batches must be at least 1")));
    }

    let report = gradient_check(seed, batches);
    println!("task,max_rel_error");
    println!("vad,{:e}", report.max_rel_error_vad);
    println!("snr,{:e}", report.max_rel_error_snr);
    println!("c50,{:e}", report.max_rel_error_c50);
    println!(
        "checked {} frames across {} batches ({} with zero speech; max SNR gradient there {:e})",
        report.frames_checked,
        report.batches,
        report.zero_speech_batches,
        report.max_snr_grad_on_zero_speech
    );

    let pass = report.max_rel_error() <= GRADIENT_TOLERANCE
        && report.max_snr_grad_on_zero_speech == 0.0;
    println!(
        "gradient check: {} (max {:e}, threshold {GRADIENT_TOLERANCE:e})",
        if pass { "PASS" } else { "FAIL" },
        report.max_rel_error()
    );
    if pass {
        Ok(())
    } else {
        Err(runtime(anyhow!("gradient check failed")))
    }
}

/// `(utterance id, path)` for every `*.rttm` in `dir`, sorted by id. The id
/// strips `.rttm` and an optional `.vad` marker, so `utt1.vad.rttm` and
/// `utt1.rttm` name the same utterance (and may not coexist in one dir).
fn rttm_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    let entries = files_with_suffix(dir, ".rttm")?;
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    for (stem, path) in entries {
        let id = stem.strip_suffix(".vad").unwrap_or(&stem).to_string();
        if let Some(earlier) = seen.get(&id) {
            return Err(usage(anyhow!(
                "both {} and {} name utterance '{id}'",
                earlier.display(),
                path.display()
            )));
        }
        seen.insert(id, path);
    }
    Ok(seen.into_iter().collect())
}

/// `(file name minus suffix, path)` for every matching file, sorted.
fn files_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>, Failure> {
    let entries = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))
        .map_err(usage)?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry
            .with_context(|| format!("listing {}", dir.display()))
            .map_err(usage)?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(stem) = name.strip_suffix(suffix) {
            out.push((stem.to_string(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// The first `dir/<id><ext>` that exists, trying extensions in order.
fn find_counterpart(dir: &Path, id: &str, extensions: &[&str]) -> Option<PathBuf> {
    extensions
        .iter()
        .map(|ext| dir.join(format!("{id}{ext}")))
        .find(|p| p.is_file())
}

/// One float per non-blank line; a non-numeric first line is treated as a
/// header and skipped, anything else non-numeric is an error.
fn read_column(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    let mut values = Vec::new();
    let mut maybe_header = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<f64>() {
            Ok(v) => values.push(v),
            Err(_) if maybe_header => {}
            Err(_) => {
                return Err(usage(anyhow!(
                    "{} line {}: '{line}' is not a number",
                    path.display(),
                    i + 1
                )));
            }
        }
        maybe_header = false;
    }
    Ok(values)
}
