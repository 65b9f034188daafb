//! Augmentation pipeline: recognizer training, encoder-state extraction,
//! text-to-encoder training, state generation from unpaired text, decoder
//! retraining and scoring. Every stage writes its artifacts under a
//! stage-named directory of the run directory and is skipped on later runs
//! when its inputs and outputs are unchanged.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::asr::{extract_states, train_asr, AsrConfig, AsrModel, AsrTrainConfig, AsrTrainLog};
use crate::corpus::batch::{Dataset, InputKind, InputSource};
use crate::corpus::features::FrameConfig;
use crate::corpus::manifest::{load_manifest, EntryKind, Manifest};
use crate::decode::{
    attention_heatmap, decode_dataset, score_decoded, train_char_lm, tune_fusion_weight, word_recall,
    BeamConfig, CharLm, CharLmConfig, Decoded, Fusion, LmTrainConfig, LmTrainLog, ScoreSummary,
};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tte::{check_states, generate_manifest, TteConfig, TteModel, TteTrainConfig, TteTrainLog};

/// Training arms compared by the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Recognizer trained on paired data only.
    Baseline,
    /// Decoder retrained on extracted plus generated states.
    RetrainState,
    /// As `RetrainState` with attention parameters frozen.
    RetrainStateFrozen,
    /// Decoder retrained on paired features plus generated states.
    RetrainJoint,
    /// Decoder retrained on states extracted from real audio of the unpaired text.
    OracleState,
    /// As `OracleState` with attention parameters frozen.
    OracleStateFrozen,
    /// Whole recognizer trained on real audio of paired and unpaired text.
    OracleFeature,
}

pub const VARIANTS: [Variant; 7] = [
    Variant::Baseline,
    Variant::RetrainState,
    Variant::RetrainStateFrozen,
    Variant::RetrainJoint,
    Variant::OracleState,
    Variant::OracleStateFrozen,
    Variant::OracleFeature,
];

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::RetrainState => "retrain_state",
            Self::RetrainStateFrozen => "retrain_state_frozen",
            Self::RetrainJoint => "retrain_joint",
            Self::OracleState => "oracle_state",
            Self::OracleStateFrozen => "oracle_state_frozen",
            Self::OracleFeature => "oracle_feature",
        }
    }

    /// Row label in the results table.
    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::RetrainState => "Retrain-State",
            Self::RetrainStateFrozen => "Retrain-State (frozen att.)",
            Self::RetrainJoint => "Retrain-Joint",
            Self::OracleState => "Oracle-State",
            Self::OracleStateFrozen => "Oracle-State (frozen att.)",
            Self::OracleFeature => "Oracle-Feature",
        }
    }

    pub fn uses_tte(self) -> bool {
        matches!(self, Self::RetrainState | Self::RetrainStateFrozen | Self::RetrainJoint)
    }

    pub fn retrains_decoder(self) -> bool {
        self.uses_tte() || matches!(self, Self::OracleState | Self::OracleStateFrozen)
    }

    pub fn freezes_attention(self) -> bool {
        matches!(self, Self::RetrainStateFrozen | Self::OracleStateFrozen)
    }

    pub fn needs_unpaired_audio(self) -> bool {
        matches!(self, Self::OracleState | Self::OracleStateFrozen | Self::OracleFeature)
    }

    /// How retraining utterances are read: paired features alongside
    /// generated states for the joint arm, states only otherwise.
    pub fn retrain_source(self) -> InputSource {
        if self == Self::RetrainJoint {
            InputSource::Mixed
        } else {
            InputSource::StoredStates
        }
    }

    /// Trainable flags per parameter group while retraining. The encoder
    /// is always frozen.
    pub fn freeze_spec(self) -> [(&'static str, bool); 4] {
        [
            ("encoder", false),
            ("attention", !self.freezes_attention()),
            ("decoder", true),
            ("output", true),
        ]
    }

    pub fn stages(self) -> Vec<Stage> {
        let mut s = vec![Stage::TrainAsr];
        if self.uses_tte() {
            s.extend([Stage::ExtractStates, Stage::TrainTte, Stage::GenerateStates, Stage::Retrain]);
        } else if self.retrains_decoder() {
            s.extend([Stage::ExtractStates, Stage::Retrain]);
        }
        s.extend([Stage::TrainLm, Stage::Decode]);
        s
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VARIANTS.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = VARIANTS.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TrainAsr,
    ExtractStates,
    TrainTte,
    GenerateStates,
    Retrain,
    TrainLm,
    Decode,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::TrainAsr => "train_asr",
            Self::ExtractStates => "extract_states",
            Self::TrainTte => "train_tte",
            Self::GenerateStates => "generate_states",
            Self::Retrain => "retrain",
            Self::TrainLm => "train_lm",
            Self::Decode => "decode",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSettings {
    pub enabled: bool,
    pub model: CharLmConfig,
    pub train: LmTrainConfig,
    /// Fusion weights tried on the validation set.
    pub grid: Vec<f64>,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            model: CharLmConfig::default(),
            train: LmTrainConfig::default(),
            grid: vec![0.0, 0.1, 0.2, 0.3, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub seed: u64,
    /// Worker threads for extraction, generation and decoding. Results do
    /// not depend on it.
    pub jobs: usize,
    pub paired: PathBuf,
    pub unpaired: PathBuf,
    /// Real audio for the unpaired text; read by the oracle arms only.
    pub unpaired_audio: Option<PathBuf>,
    pub valid: PathBuf,
    pub eval: Option<PathBuf>,
    /// Newline-separated words whose recall is reported.
    pub held_out_words: Option<PathBuf>,
    pub frames: FrameConfig,
    pub asr: AsrConfig,
    pub asr_train: AsrTrainConfig,
    pub retrain: AsrTrainConfig,
    pub tte: TteConfig,
    pub tte_train: TteTrainConfig,
    /// Generation frame budget per character; estimated from the paired
    /// states when absent.
    pub frames_per_char: Option<f64>,
    pub lm: LmSettings,
    pub beam: BeamConfig,
    /// Fixed fusion weight; tuned on the validation set when absent.
    pub lm_weight: Option<f64>,
    /// Validation utterances rendered as attention heatmaps per model.
    pub heatmaps: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let corpus = Path::new("corpus");
        Self {
            variant: Variant::RetrainJoint,
            seed: 1,
            jobs: 1,
            paired: corpus.join("paired.jsonl"),
            unpaired: corpus.join("unpaired.jsonl"),
            unpaired_audio: Some(corpus.join("unpaired_audio.jsonl")),
            valid: corpus.join("valid.jsonl"),
            eval: Some(corpus.join("eval.jsonl")),
            held_out_words: Some(corpus.join("held_out_words.txt")),
            frames: FrameConfig::default(),
            asr: AsrConfig::desk(),
            asr_train: AsrTrainConfig::desk(),
            retrain: AsrTrainConfig {
                epochs: 15,
                ..AsrTrainConfig::desk()
            },
            tte: TteConfig::desk(),
            tte_train: TteTrainConfig::default(),
            frames_per_char: None,
            lm: LmSettings::default(),
            beam: BeamConfig::default(),
            lm_weight: None,
            heatmaps: 2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.variant.needs_unpaired_audio() && self.unpaired_audio.is_none() {
            return Err(Error::Config(format!(
                "variant {} needs unpaired_audio",
                self.variant
            )));
        }
        if self.asr.feature_dim != self.frames.num_mel_bins {
            return Err(Error::Config(format!(
                "asr.feature_dim {} differs from frames.num_mel_bins {}",
                self.asr.feature_dim, self.frames.num_mel_bins
            )));
        }
        if self.variant.uses_tte() && self.tte.state_dim != self.asr.projection {
            return Err(Error::Config(format!(
                "tte.state_dim {} differs from the recognizer's state size {}",
                self.tte.state_dim, self.asr.projection
            )));
        }
        if self.frames_per_char.is_some_and(|f| !(f > 0.0)) {
            return Err(Error::Config("frames_per_char must be positive".into()));
        }
        if self.lm.enabled && self.lm_weight.is_none() && self.lm.grid.is_empty() {
            return Err(Error::Config("lm.grid is empty".into()));
        }
        self.beam.validate()?;
        self.tte.validate()
    }
}

/// Seed for a named sub-task, independent of the order tasks run in.
pub fn derived_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sha256_json(v: &Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// A stage output file and its content hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory, with `/` separators.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Hash of everything the stage's outputs depend on.
    pub fingerprint: String,
    pub outputs: Vec<Artifact>,
    /// Set when the stage was skipped because its artifacts were current.
    #[serde(skip)]
    pub reused: bool,
}

impl StageRecord {
    /// Hash over all output hashes; downstream fingerprints include it.
    pub fn digest(&self) -> String {
        sha256_json(&json!(self.outputs))
    }
}

const STAMP: &str = "stage.json";

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn list_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            list_files(&path, out)?;
        } else if path.file_name().is_some_and(|n| n != STAMP) {
            out.push(path);
        }
    }
    Ok(())
}

/// Decoding results of one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub cer: f64,
    pub wer: f64,
    pub utterances: usize,
    /// Recall of the held-out words that occur in the references.
    pub held_out_recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// Key used in decode artifact names.
    pub key: String,
    pub lm_weight: f64,
    pub valid: SplitScore,
    pub eval: Option<SplitScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub utterances: usize,
    pub truncated: usize,
    pub frames_per_char: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub rows: Vec<ReportRow>,
    pub asr_log: Option<AsrTrainLog>,
    pub tte_log: Option<TteTrainLog>,
    pub generation: Option<GenerationSummary>,
    pub retrain_log: Option<AsrTrainLog>,
    pub lm_log: Option<LmTrainLog>,
    /// `(weight, validation CER)` per fusion weight tried, per model key.
    pub fusion_grid: BTreeMap<String, Vec<(f64, f64)>>,
}

impl RunReport {
    pub fn row(&self, key: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.key == key)
    }

    /// Plain-text results table, one row per decoded model.
    pub fn table(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut out = format!(
            "{:<34} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "Method", "dev CER", "dev WER", "eval CER", "eval WER", "recall"
        );
        for r in &self.rows {
            let recall = r.eval.as_ref().and_then(|e| e.held_out_recall).or(r.valid.held_out_recall);
            out += &format!(
                "{:<34} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
                r.method,
                fmt_opt(Some(r.valid.cer)),
                fmt_opt(Some(r.valid.wer)),
                fmt_opt(r.eval.as_ref().map(|e| e.cer)),
                fmt_opt(r.eval.as_ref().map(|e| e.wer)),
                fmt_opt(recall),
            );
        }
        out
    }
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "log.json";

/// Concatenates two manifests into one whose paths are all resolved.
/// Duplicate ids across the sources are an error.
pub fn union_manifest(a: &Manifest, b: &Manifest) -> Result<Manifest> {
    let mut seen: HashSet<&str> = HashSet::new();
    for e in a.entries.iter().chain(&b.entries) {
        if !seen.insert(&e.id) {
            return Err(Error::invalid(format!("utterance id {} occurs in both sources", e.id)));
        }
    }
    let mut entries = a.with_resolved_paths().entries;
    entries.extend(b.with_resolved_paths().entries);
    Manifest::new(entries, PathBuf::new())
}

/// Union of paired utterances and generated states. Paired entries keep
/// their kind (read as features under mixed routing); generated entries
/// must carry states.
pub fn build_mixed_manifest(paired: &Manifest, generated: &Manifest) -> Result<Manifest> {
    if let Some(e) = paired.entries.iter().find(|e| e.kind != EntryKind::Paired) {
        return Err(Error::invalid(format!("entry {} is not paired", e.id)));
    }
    if let Some(e) = generated
        .entries
        .iter()
        .find(|e| e.kind != EntryKind::Generated || e.states.is_none())
    {
        return Err(Error::invalid(format!("entry {} is not a generated states entry", e.id)));
    }
    union_manifest(paired, generated)
}

/// Retrains the decoder side of a trained recognizer. The encoder is frozen
/// in every arm; attention is frozen in the `_frozen` arms.
pub fn retrain_decoder(
    model: &AsrModel,
    store: &mut ParamStore<f32>,
    train: &Dataset,
    valid: &Dataset,
    variant: Variant,
    config: &AsrTrainConfig,
    seed: u64,
) -> Result<AsrTrainLog> {
    if !variant.retrains_decoder() {
        return Err(Error::Config(format!("variant {variant} does not retrain the decoder")));
    }
    let has = |k: InputKind| train.examples.iter().any(|e| e.input.kind == k);
    match variant.retrain_source() {
        InputSource::Mixed if !has(InputKind::Features) => {
            return Err(Error::invalid(format!(
                "variant {variant} needs paired utterances with audio"
            )))
        }
        InputSource::StoredStates if has(InputKind::Features) => {
            return Err(Error::invalid(format!("variant {variant} takes encoder states only")))
        }
        _ => {}
    }
    model.set_trainable(store, &variant.freeze_spec())?;
    let log = train_asr(model, store, train, valid, config, seed);
    model.set_trainable(store, &[("encoder", true), ("attention", true), ("decoder", true), ("output", true)])?;
    log
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn manifest_hash(path: &Path) -> Result<String> {
    sha256_file(path)
}

fn read_word_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.split_whitespace().map(str::to_owned).collect())
}

/// Runs the stages of one variant under a run directory.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub run_dir: PathBuf,
    records: BTreeMap<Stage, StageRecord>,
}

impl Pipeline {
    /// Validates the configuration and records it as `config.json` in the
    /// run directory.
    pub fn new(config: PipelineConfig, run_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let run_dir = run_dir.into();
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        write_json(&run_dir.join(CONFIG_FILE), &config)?;
        Ok(Self {
            config,
            run_dir,
            records: BTreeMap::new(),
        })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.name())
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.records.get(&stage)
    }

    fn upstream(&self, stage: Stage) -> Result<String> {
        self.records
            .get(&stage)
            .map(StageRecord::digest)
            .ok_or_else(|| Error::Config(format!("stage {stage} has not run")))
    }

    /// Runs `stage` and everything before it in the variant's graph.
    pub fn run_until(&mut self, stage: Stage) -> Result<()> {
        let stages = self.config.variant.stages();
        if !stages.contains(&stage) {
            return Err(Error::Config(format!(
                "stage {stage} is not part of variant {}",
                self.config.variant
            )));
        }
        for s in stages {
            if !self.records.contains_key(&s) {
                self.run_stage(s).map_err(|e| Error::Stage {
                    stage: s.name().into(),
                    source: Box::new(e),
                })?;
            }
            if s == stage {
                break;
            }
        }
        Ok(())
    }

    /// Runs every stage and writes `report.json` and `report.txt`.
    pub fn run(&mut self) -> Result<RunReport> {
        self.run_until(Stage::Decode)?;
        let report = self.report()?;
        write_json(&self.run_dir.join(REPORT_JSON), &report)?;
        let txt = self.run_dir.join(REPORT_TEXT);
        std::fs::write(&txt, report.table()).map_err(|e| Error::io(&txt, e))?;
        Ok(report)
    }

    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let inputs = self.fingerprint_inputs(stage)?;
        let fingerprint = sha256_json(&json!({ "stage": stage.name(), "inputs": inputs }));
        let dir = self.stage_dir(stage);
        if let Some(rec) = self.current_record(stage, &fingerprint)? {
            info!("stage {stage}: artifacts are current, skipping");
            self.records.insert(stage, rec);
            return Ok(());
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        info!("stage {stage}: running");
        match stage {
            Stage::TrainAsr => self.train_asr_stage(&dir)?,
            Stage::ExtractStates => self.extract_stage(&dir)?,
            Stage::TrainTte => self.train_tte_stage(&dir)?,
            Stage::GenerateStates => self.generate_stage(&dir)?,
            Stage::Retrain => self.retrain_stage(&dir)?,
            Stage::TrainLm => self.train_lm_stage(&dir)?,
            Stage::Decode => self.decode_stage(&dir)?,
        }
        let mut files = Vec::new();
        list_files(&dir, &mut files)?;
        files.sort();
        let outputs = files
            .iter()
            .map(|p| {
                Ok(Artifact {
                    path: rel_string(p.strip_prefix(&self.run_dir).unwrap_or(p)),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = StageRecord {
            stage,
            fingerprint,
            outputs,
            reused: false,
        };
        write_json(&dir.join(STAMP), &rec)?;
        self.records.insert(stage, rec);
        Ok(())
    }

    /// The stamp on disk, if its fingerprint matches and every output still
    /// hashes to the recorded value.
    fn current_record(&self, stage: Stage, fingerprint: &str) -> Result<Option<StageRecord>> {
        let stamp = self.stage_dir(stage).join(STAMP);
        if !stamp.exists() {
            return Ok(None);
        }
        let Ok(mut rec) = read_json::<StageRecord>(&stamp) else {
            return Ok(None);
        };
        if rec.fingerprint != fingerprint || rec.stage != stage {
            return Ok(None);
        }
        for a in &rec.outputs {
            let p = self.run_dir.join(&a.path);
            if !p.exists() || sha256_file(&p)? != a.sha256 {
                return Ok(None);
            }
        }
        rec.reused = true;
        Ok(Some(rec))
    }

    fn fingerprint_inputs(&self, stage: Stage) -> Result<Value> {
        let c = &self.config;
        let v = c.variant;
        let hash_opt = |p: &Option<PathBuf>| -> Result<Value> {
            Ok(match p {
                Some(p) => json!(manifest_hash(p)?),
                None => Value::Null,
            })
        };
        Ok(match stage {
            Stage::TrainAsr => json!({
                "asr": c.asr, "train": c.asr_train, "frames": c.frames, "seed": c.seed,
                "paired": manifest_hash(&c.paired)?, "valid": manifest_hash(&c.valid)?,
                "unpaired_audio": if v == Variant::OracleFeature { hash_opt(&c.unpaired_audio)? } else { Value::Null },
            }),
            Stage::ExtractStates => json!({
                "asr": self.upstream(Stage::TrainAsr)?, "frames": c.frames,
                "paired": manifest_hash(&c.paired)?, "valid": manifest_hash(&c.valid)?,
                "unpaired_audio": if v.needs_unpaired_audio() { hash_opt(&c.unpaired_audio)? } else { Value::Null },
            }),
            Stage::TrainTte => json!({
                "states": self.upstream(Stage::ExtractStates)?, "tte": c.tte, "train": c.tte_train, "seed": c.seed,
            }),
            Stage::GenerateStates => json!({
                "tte": self.upstream(Stage::TrainTte)?, "states": self.upstream(Stage::ExtractStates)?,
                "unpaired": manifest_hash(&c.unpaired)?, "frames_per_char": c.frames_per_char, "seed": c.seed,
            }),
            Stage::Retrain => json!({
                "variant": v, "asr": self.upstream(Stage::TrainAsr)?, "states": self.upstream(Stage::ExtractStates)?,
                "generated": if v.uses_tte() { json!(self.upstream(Stage::GenerateStates)?) } else { Value::Null },
                "train": c.retrain, "frames": c.frames, "seed": c.seed,
            }),
            Stage::TrainLm => json!({
                "lm": c.lm.enabled.then(|| json!({ "model": c.lm.model, "train": c.lm.train })),
                "paired": manifest_hash(&c.paired)?, "unpaired": manifest_hash(&c.unpaired)?, "seed": c.seed,
            }),
            Stage::Decode => json!({
                "variant": v, "asr": self.upstream(Stage::TrainAsr)?,
                "retrain": if v.retrains_decoder() { json!(self.upstream(Stage::Retrain)?) } else { Value::Null },
                "lm": self.upstream(Stage::TrainLm)?, "grid": c.lm.grid, "lm_weight": c.lm_weight,
                "beam": c.beam, "frames": c.frames, "heatmaps": c.heatmaps,
                "valid": manifest_hash(&c.valid)?, "eval": hash_opt(&c.eval)?,
                "held_out": hash_opt(&c.held_out_words)?,
            }),
        })
    }

    fn load_features(&self, path: &Path) -> Result<Dataset> {
        Dataset::load(&load_manifest(path)?, InputSource::Features, &self.config.frames)
    }

    fn unpaired_audio(&self) -> Result<&Path> {
        self.config
            .unpaired_audio
            .as_deref()
            .ok_or_else(|| Error::Config(format!("variant {} needs unpaired_audio", self.config.variant)))
    }

    fn train_asr_stage(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let paired = load_manifest(&c.paired)?;
        let manifest = if c.variant == Variant::OracleFeature {
            union_manifest(&paired, &load_manifest(self.unpaired_audio()?)?)?
        } else {
            paired
        };
        let train = Dataset::load(&manifest, InputSource::Features, &c.frames)?;
        let valid = self.load_features(&c.valid)?;
        let mut store = ParamStore::new();
        let vocab = crate::corpus::vocab::Vocabulary::default();
        let model = AsrModel::build(&c.asr, vocab, &mut store, derived_seed(c.seed, "asr.init"))?;
        let log = train_asr(&model, &mut store, &train, &valid, &c.asr_train, derived_seed(c.seed, "asr.train"))?;
        model.save(&store, &dir.join(MODEL_FILE))?;
        write_json(&dir.join(LOG_FILE), &log)
    }

    fn extract_stage(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let (model, store) = AsrModel::load(&self.stage_dir(Stage::TrainAsr).join(MODEL_FILE))?;
        let mut sets = vec![("paired", c.paired.clone()), ("valid", c.valid.clone())];
        if c.variant.needs_unpaired_audio() {
            sets.push(("unpaired", self.unpaired_audio()?.to_path_buf()));
        }
        for (name, path) in sets {
            let m = load_manifest(&path)?;
            let out = extract_states(&model, &store, &m, &dir.join(name), &c.frames, c.jobs)?;
            out.save_within(&dir.join(format!("{name}.jsonl")), &self.run_dir)?;
        }
        Ok(())
    }

    fn states(&self, name: &str) -> Result<Manifest> {
        load_manifest(&self.stage_dir(Stage::ExtractStates).join(format!("{name}.jsonl")))
    }

    /// Trains a text-to-encoder model on this run's extracted states with
    /// `train_config`, using the same data and seeds as the pipeline stage.
    pub fn train_tte_arm(&self, train_config: &TteTrainConfig) -> Result<(TteModel, ParamStore<f32>, TteTrainLog)> {
        let c = &self.config;
        let train = Dataset::load(&self.states("paired")?, InputSource::StoredStates, &c.frames)?;
        let valid = Dataset::load(&self.states("valid")?, InputSource::StoredStates, &c.frames)?;
        let mut store = ParamStore::new();
        let vocab = crate::corpus::vocab::Vocabulary::default();
        let model = TteModel::build(&c.tte, vocab, &mut store, derived_seed(c.seed, "tte.init"))?;
        let log = crate::tte::train_tte(&model, &mut store, &train, &valid, train_config, derived_seed(c.seed, "tte.train"))?;
        Ok((model, store, log))
    }

    fn train_tte_stage(&self, dir: &Path) -> Result<()> {
        let (model, store, log) = self.train_tte_arm(&self.config.tte_train)?;
        model.save(&store, &dir.join(MODEL_FILE))?;
        write_json(&dir.join(LOG_FILE), &log)
    }

    /// Budget of 1.5 times the largest states-per-character ratio among the
    /// paired utterances.
    fn estimate_frames_per_char(&self) -> Result<f64> {
        let m = self.states("paired")?;
        let mut ratio: f64 = 0.0;
        for e in &m.entries {
            let path = m.states_path(e).ok_or_else(|| Error::invalid("extracted entry without states"))?;
            let rows = crate::corpus::tensor_io::read_tensor(&path)?.rows();
            ratio = ratio.max(rows as f64 / e.text.chars().count().max(1) as f64);
        }
        Ok(1.5 * ratio.max(1.0))
    }

    fn generate_stage(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let (model, store) = TteModel::load(&self.stage_dir(Stage::TrainTte).join(MODEL_FILE))?;
        let fpc = match c.frames_per_char {
            Some(f) => f,
            None => self.estimate_frames_per_char()?,
        };
        let unpaired = load_manifest(&c.unpaired)?;
        let seed = derived_seed(c.seed, "generate");
        let (generated, truncated) = generate_manifest(&model, &store, &unpaired, &dir.join("states"), fpc, seed, c.jobs)?;
        generated.save_within(&dir.join("generated.jsonl"), &self.run_dir)?;
        let summary = GenerationSummary {
            utterances: generated.len(),
            truncated,
            frames_per_char: fpc,
        };
        info!("generated {} utterances, {} hit the frame budget", summary.utterances, truncated);
        write_json(&dir.join("summary.json"), &summary)
    }

    /// Training manifest for the retraining stage of this variant.
    pub fn retrain_manifest(&self) -> Result<Manifest> {
        let v = self.config.variant;
        let paired = self.states("paired")?;
        if v.uses_tte() {
            let generated = load_manifest(&self.stage_dir(Stage::GenerateStates).join("generated.jsonl"))?;
            check_states(&generated)?;
            build_mixed_manifest(&paired, &generated)
        } else {
            union_manifest(&paired, &self.states("unpaired")?)
        }
    }

    fn retrain_stage(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let mixed = self.retrain_manifest()?;
        mixed.save_within(&dir.join("mixed.jsonl"), &self.run_dir)?;
        let train = Dataset::load(&mixed, c.variant.retrain_source(), &c.frames)?;
        let valid = self.load_features(&c.valid)?;
        let (model, mut store) = AsrModel::load(&self.stage_dir(Stage::TrainAsr).join(MODEL_FILE))?;
        let log = retrain_decoder(&model, &mut store, &train, &valid, c.variant, &c.retrain, derived_seed(c.seed, "retrain"))?;
        model.save(&store, &dir.join(MODEL_FILE))?;
        write_json(&dir.join(LOG_FILE), &log)
    }

    fn train_lm_stage(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        if !c.lm.enabled {
            return write_json(&dir.join("disabled.json"), &json!({ "enabled": false }));
        }
        let mut texts = load_manifest(&c.paired)?.texts();
        texts.extend(load_manifest(&c.unpaired)?.texts());
        let vocab = crate::corpus::vocab::Vocabulary::default();
        let (lm, store, log) = train_char_lm(&texts, &vocab, &c.lm.model, &c.lm.train, derived_seed(c.seed, "lm"))?;
        lm.save(&store, &dir.join(MODEL_FILE))?;
        write_json(&dir.join(LOG_FILE), &log)
    }

    /// Models decoded for the table: the first-pass recognizer plus the
    /// retrained one when the variant has it.
    fn decode_models(&self) -> Vec<(String, String, PathBuf)> {
        let v = self.config.variant;
        let first = if v == Variant::OracleFeature { v } else { Variant::Baseline };
        let mut models = vec![(
            first.name().to_string(),
            first.label().to_string(),
            self.stage_dir(Stage::TrainAsr).join(MODEL_FILE),
        )];
        if v.retrains_decoder() {
            models.push((v.name().into(), v.label().into(), self.stage_dir(Stage::Retrain).join(MODEL_FILE)));
        }
        models
    }

    fn decode_stage(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let valid = self.load_features(&c.valid)?;
        let eval = c.eval.as_deref().map(|p| self.load_features(p)).transpose()?;
        let held = c.held_out_words.as_deref().map(read_word_list).transpose()?;
        let lm_path = self.stage_dir(Stage::TrainLm).join(MODEL_FILE);
        let lm = if c.lm.enabled { Some(CharLm::load(&lm_path)?) } else { None };
        let heat_dir = dir.join("heatmaps");
        let mut rows = Vec::new();
        let mut grids: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for (key, label, path) in self.decode_models() {
            let (model, store) = AsrModel::load(&path)?;
            let score_split = |name: &str, data: &Dataset, cfg: &BeamConfig, fusion: Option<Fusion<'_>>, tag: &str| -> Result<(SplitScore, Vec<Decoded>)> {
                let decoded = decode_dataset(&model, &store, data, cfg, fusion, c.jobs)?;
                let (utts, sum) = score_decoded(&decoded)?;
                write_scores(&dir.join(format!("{tag}.{name}.jsonl")), &utts, &sum)?;
                let pairs: Vec<(String, String)> = decoded.iter().map(|d| (d.reference.clone(), d.text.clone())).collect();
                let split = SplitScore {
                    cer: sum.cer,
                    wer: sum.wer,
                    utterances: sum.utterances,
                    held_out_recall: held.as_ref().and_then(|h| word_recall(&pairs, h)),
                };
                Ok((split, decoded))
            };
            let (v_score, decoded) = score_split("valid", &valid, &c.beam, None, &key)?;
            if c.heatmaps > 0 {
                std::fs::create_dir_all(&heat_dir).map_err(|e| Error::io(&heat_dir, e))?;
                for d in decoded.iter().take(c.heatmaps) {
                    attention_heatmap(&d.hypothesis.attention_matrix(), &heat_dir.join(format!("{key}.{}.pgm", d.id)))?;
                }
            }
            let e_score = eval.as_ref().map(|e| score_split("eval", e, &c.beam, None, &key)).transpose()?;
            rows.push(ReportRow {
                method: label.clone(),
                key: key.clone(),
                lm_weight: 0.0,
                valid: v_score,
                eval: e_score.map(|x| x.0),
            });
            if let Some((lm, lm_store)) = &lm {
                let fusion = Fusion { lm, store: lm_store };
                let weight = match c.lm_weight {
                    Some(w) => w,
                    None => {
                        let t = tune_fusion_weight(&model, &store, fusion, &valid, &c.lm.grid, &c.beam, c.jobs)?;
                        grids.insert(key.clone(), t.grid);
                        t.best_weight
                    }
                };
                let cfg = BeamConfig {
                    lm_weight: weight,
                    ..c.beam.clone()
                };
                let tag = format!("{key}_lm");
                let (v_score, _) = score_split("valid", &valid, &cfg, Some(fusion), &tag)?;
                let e_score = eval.as_ref().map(|e| score_split("eval", e, &cfg, Some(fusion), &tag)).transpose()?;
                rows.push(ReportRow {
                    method: format!("{label} + LM"),
                    key: tag,
                    lm_weight: weight,
                    valid: v_score,
                    eval: e_score.map(|x| x.0),
                });
            }
        }
        write_json(&dir.join("rows.json"), &json!({ "rows": rows, "fusion_grid": grids }))
    }

    /// Assembles the report from the artifacts of completed stages.
    pub fn report(&self) -> Result<RunReport> {
        let stage_file = |s: Stage, f: &str| self.stage_dir(s).join(f);
        let has = |s: Stage| self.records.contains_key(&s);
        let decoded: Value = read_json(&stage_file(Stage::Decode, "rows.json"))?;
        let rows: Vec<ReportRow> =
            serde_json::from_value(decoded["rows"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        let fusion_grid =
            serde_json::from_value(decoded["fusion_grid"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        let lm_log = if self.config.lm.enabled {
            Some(read_json(&stage_file(Stage::TrainLm, LOG_FILE))?)
        } else {
            None
        };
        Ok(RunReport {
            variant: self.config.variant,
            seed: self.config.seed,
            stages: self.config.variant.stages().iter().filter_map(|s| self.records.get(s).cloned()).collect(),
            rows,
            asr_log: Some(read_json(&stage_file(Stage::TrainAsr, LOG_FILE))?),
            tte_log: has(Stage::TrainTte).then(|| read_json(&stage_file(Stage::TrainTte, LOG_FILE))).transpose()?,
            generation: has(Stage::GenerateStates)
                .then(|| read_json(&stage_file(Stage::GenerateStates, "summary.json")))
                .transpose()?,
            retrain_log: has(Stage::Retrain).then(|| read_json(&stage_file(Stage::Retrain, LOG_FILE))).transpose()?,
            lm_log,
            fusion_grid,
        })
    }
}

/// Writes one JSON line per utterance followed by a summary file next to it.
pub fn write_scores(path: &Path, utterances: &[crate::decode::UtteranceScore], summary: &ScoreSummary) -> Result<()> {
    let mut out = String::new();
    for u in utterances {
        out += &serde_json::to_string(u).map_err(|e| Error::Format(e.to_string()))?;
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    write_json(&path.with_extension("summary.json"), summary)
}

/// Runs the whole pipeline for `config` under `run_dir`.
pub fn run_pipeline(config: &PipelineConfig, run_dir: &Path) -> Result<RunReport> {
    Pipeline::new(config.clone(), run_dir)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::manifest::Entry;

    fn entry(id: &str, kind: EntryKind) -> Entry {
        Entry {
            id: id.into(),
            text: "ab".into(),
            audio: (kind == EntryKind::Paired).then(|| PathBuf::from(format!("a/{id}.wav"))),
            states: (kind == EntryKind::Generated).then(|| PathBuf::from(format!("s/{id}.bin"))),
            kind,
        }
    }

    #[test]
    fn mixed_manifest_keeps_kinds_and_rejects_collisions() {
        let paired = Manifest::new(vec![entry("p1", EntryKind::Paired), entry("p2", EntryKind::Paired)], "/c").unwrap();
        let gen = Manifest::new(
            vec![entry("g1", EntryKind::Generated), entry("g2", EntryKind::Generated), entry("g3", EntryKind::Generated)],
            "/r",
        )
        .unwrap();
        let m = build_mixed_manifest(&paired, &gen).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.entries.iter().filter(|e| e.kind == EntryKind::Generated).count(), 3);
        assert_eq!(m.audio_path(&m.entries[0]).unwrap(), PathBuf::from("/c/a/p1.wav"));
        assert_eq!(m.states_path(&m.entries[4]).unwrap(), PathBuf::from("/r/s/g3.bin"));

        let empty = Manifest::new(vec![], "/r").unwrap();
        assert_eq!(build_mixed_manifest(&paired, &empty).unwrap().entries, paired.with_resolved_paths().entries);

        let clash = Manifest::new(vec![entry("p1", EntryKind::Generated)], "/r").unwrap();
        assert!(build_mixed_manifest(&paired, &clash).is_err());
        assert!(build_mixed_manifest(&gen, &gen).is_err());
    }

    #[test]
    fn variants_round_trip_and_define_their_stages() {
        for v in VARIANTS {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_value(v).unwrap(), json!(v.name()));
            let stages = v.stages();
            assert_eq!(stages.first(), Some(&Stage::TrainAsr));
            assert_eq!(stages.last(), Some(&Stage::Decode));
            assert_eq!(stages.contains(&Stage::TrainTte), v.uses_tte());
            assert_eq!(stages.contains(&Stage::Retrain), v.retrains_decoder());
            assert!(v.freeze_spec().contains(&("encoder", false)));
        }
        assert_eq!(Variant::Baseline.stages(), vec![Stage::TrainAsr, Stage::TrainLm, Stage::Decode]);
        assert!("joint".parse::<Variant>().is_err());
        assert!(Variant::RetrainStateFrozen.freeze_spec().contains(&("attention", false)));
        assert!(Variant::RetrainJoint.freeze_spec().contains(&("attention", true)));
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(serde_json::from_value::<PipelineConfig>(v).unwrap(), c);
        let bad = PipelineConfig {
            jobs: 0,
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_name() {
        assert_ne!(derived_seed(1, "a"), derived_seed(1, "b"));
        assert_eq!(derived_seed(1, "a"), derived_seed(1, "a"));
    }
}
