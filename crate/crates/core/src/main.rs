use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use tte_core::asr::AsrModel;
use tte_core::augment::{write_scores, Pipeline, Stage};
use tte_core::config::{parse_override, RunConfig};
use tte_core::corpus::batch::{Dataset, InputSource};
use tte_core::corpus::manifest::load_manifest;
use tte_core::corpus::toy::make_toy_corpus;
use tte_core::corpus::vocab::Vocabulary;
use tte_core::decode::{decode_dataset, score, score_decoded, BeamConfig, CharLm, Fusion};
use tte_core::{verify, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tte", version, about = "Speech recognition with text-to-encoder data augmentation")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// JSON configuration file layered over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "PATH")]
    run_dir: Option<PathBuf>,
    /// baseline, retrain_state, retrain_state_frozen, retrain_joint,
    /// oracle_state, oracle_state_frozen or oracle_feature.
    #[arg(long, global = true, value_name = "NAME")]
    variant: Option<String>,
    /// Beam width.
    #[arg(long, global = true, value_name = "N")]
    beam: Option<usize>,
    /// Fixed language model weight (tuned on validation data when unset).
    #[arg(long, global = true, value_name = "F")]
    lm_weight: Option<f64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Override any configuration key, e.g. `--set asr_train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Log warnings and errors only.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the toy corpus.
    MakeCorpus {
        #[arg(default_value = "corpus")]
        dir: PathBuf,
    },
    /// Train the recognizer on paired audio.
    TrainAsr,
    /// Store encoder states for the paired and validation sets.
    ExtractStates,
    /// Train the text-to-encoder model.
    TrainTte,
    /// Generate encoder states for the unpaired text.
    GenerateStates,
    /// Retrain the recognizer decoder on the augmented set.
    Retrain,
    /// Decode a manifest with a trained recognizer.
    Decode {
        model: PathBuf,
        manifest: PathBuf,
        /// Language model checkpoint for shallow fusion.
        lm: Option<PathBuf>,
    },
    /// Score hypotheses against a reference manifest.
    Score {
        reference: PathBuf,
        hypotheses: PathBuf,
    },
    /// Run every stage of the configured variant and write the report.
    Pipeline,
    /// Check analytic gradients against finite differences.
    Gradcheck,
}

impl GlobalOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(s) = self.seed {
            overrides.push(("seed".to_string(), json!(s)));
        }
        if let Some(d) = &self.run_dir {
            overrides.push(("run_dir".to_string(), json!(d)));
        }
        if let Some(v) = &self.variant {
            overrides.push(("variant".to_string(), json!(v)));
        }
        if let Some(b) = self.beam {
            overrides.push(("beam.beam_size".to_string(), json!(b)));
        }
        if let Some(w) = self.lm_weight {
            overrides.push(("lm_weight".to_string(), json!(w)));
        }
        if let Some(j) = self.jobs {
            overrides.push(("jobs".to_string(), json!(j)));
        }
        for s in &self.set {
            overrides.push(parse_override(s)?);
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?);
    Ok(())
}

fn run_stage(config: RunConfig, stage: Stage) -> Result<()> {
    let mut p = Pipeline::new(config.pipeline, &config.run_dir)?;
    p.run_until(stage)?;
    let rec = p.record(stage).expect("stage just ran");
    print_json(rec)
}

fn decode(config: &RunConfig, model: &Path, manifest: &Path, lm: Option<&Path>) -> Result<()> {
    let c = &config.pipeline;
    let (asr, store) = AsrModel::load(model)?;
    let data = Dataset::load(&load_manifest(manifest)?, InputSource::Features, &c.frames)?;
    let lm = lm.map(CharLm::load).transpose()?;
    let beam = BeamConfig {
        lm_weight: if lm.is_some() { c.lm_weight.unwrap_or(c.beam.lm_weight) } else { 0.0 },
        ..c.beam.clone()
    };
    let fusion = lm.as_ref().map(|(lm, store)| Fusion { lm, store });
    let decoded = decode_dataset(&asr, &store, &data, &beam, fusion, c.jobs)?;
    let (utts, summary) = score_decoded(&decoded)?;
    let out_dir = config.run_dir.join("decode");
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("decoded");
    let out = out_dir.join(format!("{stem}.jsonl"));
    write_scores(&out, &utts, &summary)?;
    print_json(&json!({ "hypotheses": out, "lm_weight": beam.lm_weight, "summary": summary }))
}

#[derive(Deserialize)]
struct HypLine {
    utterance_id: String,
    hyp: String,
}

fn score_files(reference: &Path, hypotheses: &Path) -> Result<()> {
    let refs = load_manifest(reference)?;
    let text = std::fs::read_to_string(hypotheses).map_err(|e| Error::io(hypotheses, e))?;
    let mut hyps = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let h: HypLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: hypotheses.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if hyps.insert(h.utterance_id.clone(), h.hyp).is_some() {
            return Err(Error::invalid(format!("duplicate hypothesis for {}", h.utterance_id)));
        }
    }
    let triples = refs
        .entries
        .iter()
        .map(|e| {
            let h = hyps
                .remove(&e.id)
                .ok_or_else(|| Error::invalid(format!("no hypothesis for {}", e.id)))?;
            Ok((e.id.clone(), e.text.clone(), h))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = hyps.keys().min() {
        return Err(Error::invalid(format!("hypothesis {extra} has no reference")));
    }
    let (_, summary) = score(&triples)?;
    print_json(&summary)
}

fn gradcheck() -> Result<bool> {
    let results = verify::full_suite()?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let mark = if r.passed() { "ok" } else { "FAIL" };
        println!("{:width$}  {:.3e}  {mark}", r.name, r.max_rel_error);
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} (tolerance {:.0e})", verify::TOLERANCE);
    Ok(results.iter().all(|r| r.passed()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Gradcheck = cli.command {
        return Ok(if gradcheck()? { ExitCode::SUCCESS } else { ExitCode::from(2) });
    }
    let config = cli.opts.resolve()?;
    match cli.command {
        Command::MakeCorpus { dir } => {
            let corpus = make_toy_corpus(&dir, &config.corpus, &Vocabulary::default(), config.pipeline.seed)?;
            let counts: Value = json!({
                "dir": dir,
                "paired": corpus.paired.len(),
                "unpaired": corpus.unpaired.len(),
                "valid": corpus.valid.len(),
                "eval": corpus.eval.len(),
                "held_out_words": corpus.held_out.len(),
            });
            print_json(&counts)?;
        }
        Command::TrainAsr => run_stage(config, Stage::TrainAsr)?,
        Command::ExtractStates => run_stage(config, Stage::ExtractStates)?,
        Command::TrainTte => run_stage(config, Stage::TrainTte)?,
        Command::GenerateStates => run_stage(config, Stage::GenerateStates)?,
        Command::Retrain => run_stage(config, Stage::Retrain)?,
        Command::Decode { model, manifest, lm } => decode(&config, &model, &manifest, lm.as_deref())?,
        Command::Score { reference, hypotheses } => score_files(&reference, &hypotheses)?,
        Command::Pipeline => {
            let report = Pipeline::new(config.pipeline, &config.run_dir)?.run()?;
            print!("{}", report.table());
        }
        Command::Gradcheck => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.opts.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
