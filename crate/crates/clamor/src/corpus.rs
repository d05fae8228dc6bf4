//! Corpus plumbing: manifest and annotation I/O, the deterministic
//! train/dev/test asset split, and the parallel synthesis runner that turns
//! clean speech plus noise and impulse-response assets into a labeled,
//! resumable corpus on disk.
//!
//! # File formats
//!
//! - Speech manifest: JSON Lines of `{utterance_id, wav_path,
//!   activity_path}` with an optional `split` tag per record.
//! - Asset manifests (noise, impulse responses): JSON Lines of
//!   `{wav_path}` with optional `id` (defaults to the file stem) and
//!   optional `split`.
//! - Speech activity: RTTM (`SPEAKER` records) or a two-column CSV of
//!   `onset,offset` seconds.
//! - Per-utterance outputs: `<id>.wav` (the mixture, float32),
//!   `<id>.vad.rttm` (speech regions re-derived from the frame mask),
//!   `<id>.snr.csv` (`frame_index,snr_db`, empty field on non-speech
//!   frames), and `<id>.json` (the label record, doubling as the resume
//!   sidecar).
//! - Corpus outputs: `labels.jsonl` in manifest order and `summary.json`.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::{ActivityError, Region, SpeechActivity};
use crate::contamination::{
    contaminate, derive_seed, AssetStore, ContaminationError, ContaminationRecipe, RecipeParams,
    FRAME_DURATION_S,
};
use crate::metrics::{histogram, HistogramBin};
use crate::rir::{RirError, RoomImpulseResponse};
use crate::wav::{read_wav, write_wav, WavError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid record: {source}")]
    ManifestRecord {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {message}")]
    Annotation {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("utterance id {0:?} is not usable as a file name")]
    InvalidUtteranceId(String),
    #[error("duplicate utterance id {0:?}")]
    DuplicateUtterance(String),
    #[error("asset record in {path} has neither an id nor a file stem")]
    UnnameableAsset { path: PathBuf },
    #[error("split fractions must be non-negative and sum to 1, got ({0}, {1}, {2})")]
    InvalidFractions(f64, f64, f64),
    #[error("cannot split an empty asset list")]
    EmptyAssetList,
    #[error("unknown split tag {0:?} (expected train, dev, or test)")]
    UnknownSplit(String),
    #[error("the {kind} manifest mixes tagged and untagged split fields; tag all records or none")]
    PartialSplitTags { kind: &'static str },
    #[error("no {kind} assets assigned to the {split} split")]
    MissingSplitAssets { kind: &'static str, split: Split },
    #[error("workers must be at least 1")]
    ZeroWorkers,
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Activity(#[from] ActivityError),
    #[error(transparent)]
    Rir(#[from] RirError),
    #[error(transparent)]
    Contamination(#[from] ContaminationError),
}

/// Corpus partition a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(CorpusError::UnknownSplit(other.to_string())),
        }
    }
}

/// One clean-speech input: audio plus its speech segmentation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub wav_path: PathBuf,
    pub activity_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// One noise or impulse-response asset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssetRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub wav_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl AssetRecord {
    /// The explicit id, or the WAV file stem when none was given.
    pub fn resolved_id(&self) -> Option<String> {
        match &self.id {
            Some(id) => Some(id.clone()),
            None => self
                .wav_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned()),
        }
    }
}

/// Validated list of utterance records with unique, filename-safe ids.
#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub records: Vec<UtteranceRecord>,
}

fn valid_utterance_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && !id.contains(|c: char| c.is_whitespace() || c == '/' || c == '\\')
}

impl CorpusManifest {
    pub fn new(records: Vec<UtteranceRecord>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for record in &records {
            if !valid_utterance_id(&record.utterance_id) {
                return Err(CorpusError::InvalidUtteranceId(record.utterance_id.clone()));
            }
            if !seen.insert(record.utterance_id.as_str()) {
                return Err(CorpusError::DuplicateUtterance(record.utterance_id.clone()));
            }
        }
        Ok(Self { records })
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|source| {
            CorpusError::ManifestRecord { path: path.to_path_buf(), line: i + 1, source }
        })?);
    }
    Ok(records)
}

/// Writes records as JSON Lines (one compact JSON object per line).
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for record in records {
        out.push_str(
            &serde_json::to_string(record)
                .map_err(|source| CorpusError::Json { path: path.to_path_buf(), source })?,
        );
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest, CorpusError> {
    CorpusManifest::new(read_jsonl(path)?)
}

pub fn read_asset_manifest(path: &Path) -> Result<Vec<AssetRecord>, CorpusError> {
    read_jsonl(path)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>, CorpusError> {
    read_jsonl(path)
}

fn annotation_error(path: &Path, line: usize, message: String) -> CorpusError {
    CorpusError::Annotation { path: path.to_path_buf(), line: line + 1, message }
}

/// Reads speech regions from an RTTM file. Only `SPEAKER` records are
/// consulted; overlapping or touching regions are unioned.
pub fn read_rttm(path: &Path) -> Result<SpeechActivity, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let mut regions = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] != "SPEAKER" {
            continue;
        }
        if fields.len() < 5 {
            return Err(annotation_error(
                path,
                i,
                format!("SPEAKER record has {} fields, expected at least 5", fields.len()),
            ));
        }
        let onset: f64 = fields[3]
            .parse()
            .map_err(|_| annotation_error(path, i, format!("invalid onset {:?}", fields[3])))?;
        let duration: f64 = fields[4]
            .parse()
            .map_err(|_| annotation_error(path, i, format!("invalid duration {:?}", fields[4])))?;
        regions.push(Region::new(onset, onset + duration));
    }
    Ok(SpeechActivity::from_overlapping(regions)?)
}

/// Writes speech regions as RTTM `SPEAKER` records with millisecond
/// precision (all pipeline region boundaries are frame-aligned, so no
/// precision is lost).
pub fn write_rttm(
    path: &Path,
    utterance_id: &str,
    activity: &SpeechActivity,
) -> Result<(), CorpusError> {
    let mut out = String::new();
    for region in activity.regions() {
        writeln!(
            out,
            "SPEAKER {utterance_id} 1 {:.3} {:.3} <NA> <NA> speech <NA> <NA>",
            region.onset,
            region.offset - region.onset
        )
        .expect("writing to String cannot fail");
    }
    fs::write(path, out).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

/// Reads a two-column `onset,offset` seconds CSV. An optional header line
/// is skipped; overlapping regions are unioned.
pub fn read_activity_csv(path: &Path) -> Result<SpeechActivity, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let mut regions = Vec::new();
    let mut saw_data = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let first = parts.next().unwrap_or("").trim();
        let second = parts.next().unwrap_or("").trim();
        match (first.parse::<f64>(), second.parse::<f64>()) {
            (Ok(onset), Ok(offset)) => {
                saw_data = true;
                regions.push(Region::new(onset, offset));
            }
            _ if !saw_data => continue, // header line
            _ => {
                return Err(annotation_error(
                    path,
                    i,
                    format!("expected onset,offset seconds, got {line:?}"),
                ))
            }
        }
    }
    Ok(SpeechActivity::from_overlapping(regions)?)
}

/// Reads a speech segmentation, dispatching on the file extension:
/// `.rttm` as RTTM, anything else as `onset,offset` CSV.
pub fn read_activity(path: &Path) -> Result<SpeechActivity, CorpusError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("rttm") => read_rttm(path),
        _ => read_activity_csv(path),
    }
}

/// Writes the per-frame SNR track as `frame_index,snr_db` CSV; the value
/// field is empty on non-speech frames (where the SNR is undefined).
pub fn write_snr_csv(path: &Path, snr_db: &[f64]) -> Result<(), CorpusError> {
    let mut out = String::from("frame_index,snr_db\n");
    for (k, v) in snr_db.iter().enumerate() {
        if v.is_nan() {
            writeln!(out, "{k},").expect("writing to String cannot fail");
        } else {
            writeln!(out, "{k},{v}").expect("writing to String cannot fail");
        }
    }
    fs::write(path, out).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

/// Reads a `frame_index,snr_db` CSV back, restoring `NaN` on empty fields.
/// Frame indices must be 0-based and consecutive.
pub fn read_snr_csv(path: &Path) -> Result<Vec<f64>, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let mut values = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || (i == 0 && line.starts_with("frame_index")) {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let index_field = parts.next().unwrap_or("").trim();
        let value_field = parts.next().unwrap_or("").trim();
        let index: usize = index_field
            .parse()
            .map_err(|_| annotation_error(path, i, format!("invalid frame index {index_field:?}")))?;
        if index != values.len() {
            return Err(annotation_error(
                path,
                i,
                format!("frame index {index} out of order, expected {}", values.len()),
            ));
        }
        if value_field.is_empty() {
            values.push(f64::NAN);
        } else {
            let v: f64 = value_field.parse().map_err(|_| {
                annotation_error(path, i, format!("invalid SNR value {value_field:?}"))
            })?;
            values.push(v);
        }
    }
    Ok(values)
}

/// Merges consecutive speech frames of a frame-level mask back into time
/// regions on the frame grid.
pub fn regions_from_frames(frames: &[bool], frame_duration: f64) -> SpeechActivity {
    let mut regions = Vec::new();
    let mut start: Option<usize> = None;
    for (k, &speech) in frames.iter().enumerate() {
        match (speech, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                regions.push(Region::new(s as f64 * frame_duration, k as f64 * frame_duration));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        regions.push(Region::new(
            s as f64 * frame_duration,
            frames.len() as f64 * frame_duration,
        ));
    }
    SpeechActivity::new(regions).expect("merged frame regions are ordered and disjoint")
}

/// A disjoint three-way partition of asset ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetSplit {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl AssetSplit {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Largest-remainder apportionment of `total` items over three buckets.
/// Remainder ties go to the later bucket, so the leftover of the standard
/// 0.8/0.1/0.1 split lands in test.
fn largest_remainder_sizes(total: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut sizes = [
        exact[0].floor() as usize,
        exact[1].floor() as usize,
        exact[2].floor() as usize,
    ];
    let mut assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&x, &y| {
        let fx = exact[x] - exact[x].floor();
        let fy = exact[y] - exact[y].floor();
        fy.total_cmp(&fx).then(y.cmp(&x))
    });
    let mut i = 0;
    while assigned < total {
        sizes[order[i % 3]] += 1;
        assigned += 1;
        i += 1;
    }
    sizes
}

/// Seeded shuffle followed by a contiguous partition into train/dev/test.
/// Deterministic for a given input order and seed; the three lists are
/// pairwise disjoint and cover the input.
pub fn split_assets(
    ids: &[String],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<AssetSplit, CorpusError> {
    if ids.is_empty() {
        return Err(CorpusError::EmptyAssetList);
    }
    let (a, b, c) = fractions;
    let valid = a >= 0.0 && b >= 0.0 && c >= 0.0 && (a + b + c - 1.0).abs() <= 1e-9;
    if !valid {
        return Err(CorpusError::InvalidFractions(a, b, c));
    }
    let mut shuffled = ids.to_vec();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let sizes = largest_remainder_sizes(ids.len(), [a, b, c]);
    let test = shuffled.split_off(sizes[0] + sizes[1]);
    let dev = shuffled.split_off(sizes[0]);
    Ok(AssetSplit { train: shuffled, dev, test })
}

/// Everything a synthesis run needs beyond the manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub master_seed: u64,
    pub params: RecipeParams,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.workers == 0 {
            return Err(CorpusError::ZeroWorkers);
        }
        self.params.validate()?;
        Ok(())
    }
}

/// One line of `labels.jsonl`; also written per utterance as `<id>.json`,
/// where its `recipe_hash` makes reruns skip up-to-date outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub utterance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub c50_db: f64,
    pub target_snr_db: f64,
    pub noise_gain: f64,
    pub duration_s: f64,
    pub speech_s: f64,
    pub num_frames: usize,
    pub speech_frames: usize,
    pub zero_speech_windows: usize,
    pub zero_noise_windows: usize,
    pub recipe: ContaminationRecipe,
    pub recipe_hash: String,
}

/// Corpus-level outcome of a synthesis run, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub utterances: usize,
    pub synthesized: usize,
    pub resumed: usize,
    pub failed: usize,
    pub total_duration_s: f64,
    pub total_speech_s: f64,
    /// Fraction of corpus time outside speech regions; 0 for an empty run.
    pub non_speech_ratio: f64,
    pub snr_histogram: Vec<HistogramBin>,
    pub c50_histogram: Vec<HistogramBin>,
}

fn summarize(
    labels: &[LabelRecord],
    utterances: usize,
    synthesized: usize,
    resumed: usize,
    failed: usize,
) -> RunSummary {
    let total_duration_s: f64 = labels.iter().map(|l| l.duration_s).sum();
    let total_speech_s: f64 = labels.iter().map(|l| l.speech_s).sum();
    let non_speech_ratio = if total_duration_s > 0.0 {
        1.0 - total_speech_s / total_duration_s
    } else {
        0.0
    };
    let snrs: Vec<f64> = labels.iter().map(|l| l.target_snr_db).collect();
    let c50s: Vec<f64> = labels.iter().map(|l| l.c50_db).collect();
    RunSummary {
        utterances,
        synthesized,
        resumed,
        failed,
        total_duration_s,
        total_speech_s,
        non_speech_ratio,
        snr_histogram: histogram(&snrs, 1.0).expect("labels are finite"),
        c50_histogram: histogram(&c50s, 1.0).expect("labels are finite"),
    }
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), CorpusError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| CorpusError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

/// Resolves per-record splits: explicit tags are honored when every record
/// has one; with no tags at all, a seeded 80/10/10 split is derived from
/// the master seed. A mix of tagged and untagged records is rejected.
fn resolve_splits<T>(
    kind: &'static str,
    items: &[T],
    explicit: impl Fn(&T) -> Option<Split>,
    id_of: impl Fn(&T) -> Option<String>,
    master_seed: u64,
) -> Result<Vec<Split>, CorpusError> {
    let tagged = items.iter().filter(|t| explicit(t).is_some()).count();
    if tagged == items.len() {
        return Ok(items.iter().map(|t| explicit(t).expect("all tagged")).collect());
    }
    if tagged != 0 {
        return Err(CorpusError::PartialSplitTags { kind });
    }
    let mut ids = Vec::with_capacity(items.len());
    for item in items {
        // Unnameable assets are caught again (with a path) at load time.
        ids.push(id_of(item).unwrap_or_default());
    }
    let seed = derive_seed(master_seed, "corpus", &format!("split:{kind}"));
    let split = split_assets(&ids, (0.8, 0.1, 0.1), seed)?;
    let lookup: Vec<(&[String], Split)> =
        vec![(&split.train, Split::Train), (&split.dev, Split::Dev), (&split.test, Split::Test)];
    Ok(ids
        .iter()
        .map(|id| {
            lookup
                .iter()
                .find(|(bucket, _)| bucket.contains(id))
                .map(|(_, s)| *s)
                .expect("split covers every id")
        })
        .collect())
}

enum Outcome {
    Done { label: LabelRecord, resumed: bool },
    Failed,
}

/// Synthesizes (or resumes) the whole corpus described by the manifests.
///
/// Utterances are distributed over `config.workers` threads; every
/// per-utterance output depends only on `(master_seed, utterance_id)` and
/// the referenced assets, so the produced bytes are independent of worker
/// count and scheduling. Train utterances only mix with train noise and
/// impulse responses, and likewise for dev and test.
///
/// Per-utterance failures are logged and tallied in the returned summary
/// rather than aborting the run; the summary's `failed` count is the
/// caller's cue for a partial-failure exit status.
pub fn run_synthesis(
    manifest: &CorpusManifest,
    noise_manifest: &[AssetRecord],
    rir_manifest: &[AssetRecord],
    config: &RunConfig,
) -> Result<RunSummary, CorpusError> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)
        .map_err(|source| CorpusError::Io { path: config.out_dir.clone(), source })?;
    let labels_path = config.out_dir.join("labels.jsonl");
    let summary_path = config.out_dir.join("summary.json");

    let records = &manifest.records;
    if records.is_empty() {
        let summary = summarize(&[], 0, 0, 0, 0);
        write_jsonl::<LabelRecord>(&labels_path, &[])?;
        write_json_pretty(&summary_path, &summary)?;
        return Ok(summary);
    }

    let utterance_splits = resolve_splits(
        "speech",
        records,
        |r| r.split,
        |r| Some(r.utterance_id.clone()),
        config.master_seed,
    )?;
    let noise_splits = resolve_splits(
        "noise",
        noise_manifest,
        |r| r.split,
        AssetRecord::resolved_id,
        config.master_seed,
    )?;
    let rir_splits = resolve_splits(
        "rir",
        rir_manifest,
        |r| r.split,
        AssetRecord::resolved_id,
        config.master_seed,
    )?;

    let mut store = AssetStore::new();
    let mut noise_ids_by_split: [Vec<String>; 3] = Default::default();
    for (record, split) in noise_manifest.iter().zip(&noise_splits) {
        let id = record
            .resolved_id()
            .ok_or_else(|| CorpusError::UnnameableAsset { path: record.wav_path.clone() })?;
        store.insert_noise(id.clone(), read_wav(&record.wav_path)?)?;
        noise_ids_by_split[split.index()].push(id);
    }
    let mut rir_ids_by_split: [Vec<String>; 3] = Default::default();
    for (record, split) in rir_manifest.iter().zip(&rir_splits) {
        let id = record
            .resolved_id()
            .ok_or_else(|| CorpusError::UnnameableAsset { path: record.wav_path.clone() })?;
        store.insert_rir(id.clone(), RoomImpulseResponse::new(read_wav(&record.wav_path)?)?)?;
        rir_ids_by_split[split.index()].push(id);
    }

    // Every split actually used by an utterance needs assets to draw from.
    let used: HashSet<Split> = utterance_splits.iter().copied().collect();
    for split in Split::ALL {
        if !used.contains(&split) {
            continue;
        }
        if noise_ids_by_split[split.index()].is_empty() {
            return Err(CorpusError::MissingSplitAssets { kind: "noise", split });
        }
        if config.params.p_rir > 0.0 && rir_ids_by_split[split.index()].is_empty() {
            return Err(CorpusError::MissingSplitAssets { kind: "impulse response", split });
        }
    }

    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..records.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(records.len()) {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= records.len() {
                    break;
                }
                let record = &records[idx];
                let split = utterance_splits[idx];
                let outcome = match synthesize_one(
                    record,
                    split,
                    &store,
                    &noise_ids_by_split[split.index()],
                    &rir_ids_by_split[split.index()],
                    config,
                ) {
                    Ok((label, resumed)) => Outcome::Done { label, resumed },
                    Err(error) => {
                        log::error!("{}: {error}", record.utterance_id);
                        Outcome::Failed
                    }
                };
                outcomes.lock().expect("no worker panicked")[idx] = Some(outcome);
            });
        }
    });

    let outcomes = outcomes.into_inner().expect("no worker panicked");
    let mut labels = Vec::new();
    let mut synthesized = 0usize;
    let mut resumed = 0usize;
    let mut failed = 0usize;
    for outcome in outcomes {
        match outcome.expect("every index was claimed") {
            Outcome::Done { label, resumed: was_resumed } => {
                if was_resumed {
                    resumed += 1;
                } else {
                    synthesized += 1;
                }
                labels.push(label);
            }
            Outcome::Failed => failed += 1,
        }
    }
    let summary = summarize(&labels, records.len(), synthesized, resumed, failed);
    write_jsonl(&labels_path, &labels)?;
    write_json_pretty(&summary_path, &summary)?;
    log::info!(
        "synthesized {synthesized}, resumed {resumed}, failed {failed} of {} utterances",
        records.len()
    );
    Ok(summary)
}

fn synthesize_one(
    record: &UtteranceRecord,
    split: Split,
    store: &AssetStore,
    noise_ids: &[String],
    rir_ids: &[String],
    config: &RunConfig,
) -> Result<(LabelRecord, bool), CorpusError> {
    let id = &record.utterance_id;
    let recipe =
        ContaminationRecipe::draw(id, config.master_seed, &config.params, noise_ids, rir_ids)?;
    let recipe_hash = recipe.content_hash();

    let wav_path = config.out_dir.join(format!("{id}.wav"));
    let rttm_path = config.out_dir.join(format!("{id}.vad.rttm"));
    let snr_path = config.out_dir.join(format!("{id}.snr.csv"));
    let sidecar_path = config.out_dir.join(format!("{id}.json"));

    if let Some(existing) = read_sidecar(&sidecar_path) {
        if existing.recipe_hash == recipe_hash
            && wav_path.exists()
            && rttm_path.exists()
            && snr_path.exists()
        {
            log::debug!("{id}: outputs up to date, skipping");
            return Ok((existing, true));
        }
    }

    let speech = read_wav(&record.wav_path)?;
    let activity = read_activity(&record.activity_path)?;
    let output = contaminate(&speech, &activity, store, &recipe)?;
    let utterance = &output.utterance;

    write_wav(&utterance.audio, &wav_path)?;
    write_rttm(&rttm_path, id, &regions_from_frames(&utterance.vad, FRAME_DURATION_S))?;
    write_snr_csv(&snr_path, &utterance.snr_db)?;

    let label = LabelRecord {
        utterance_id: id.clone(),
        split: Some(split),
        c50_db: utterance.c50.c50_db,
        target_snr_db: recipe.target_snr_db,
        noise_gain: output.noise_gain,
        duration_s: utterance.audio.duration(),
        speech_s: output.activity.total_speech(),
        num_frames: utterance.vad.len(),
        speech_frames: utterance.vad.iter().filter(|&&v| v).count(),
        zero_speech_windows: output.diagnostics.zero_speech_windows,
        zero_noise_windows: output.diagnostics.zero_noise_windows,
        recipe,
        recipe_hash,
    };
    // The sidecar goes last: an interrupted utterance never leaves a valid
    // sidecar pointing at incomplete outputs.
    let mut sidecar_text = serde_json::to_string(&label)
        .map_err(|source| CorpusError::Json { path: sidecar_path.clone(), source })?;
    sidecar_text.push('\n');
    fs::write(&sidecar_path, sidecar_text)
        .map_err(|source| CorpusError::Io { path: sidecar_path.clone(), source })?;
    Ok((label, false))
}

/// Best-effort sidecar read: anything unreadable or unparsable simply
/// triggers resynthesis.
fn read_sidecar(path: &Path) -> Option<LabelRecord> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}
