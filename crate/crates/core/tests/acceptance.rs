//! Acceptance criteria, one pass/fail line each.
//!
//! Run all with `cargo test --test acceptance`, or a subset by number, e.g.
//! `cargo test --test acceptance -- 3 4`. Setting `ACCEPTANCE_DIR` keeps the
//! trained runs there and resumes from them on the next invocation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use tte_core::asr::{AsrConfig, AsrModel};
use tte_core::augment::{Pipeline, PipelineConfig, RunReport, Stage, Variant};
use tte_core::corpus::toy::{make_toy_corpus, ToyCorpusConfig};
use tte_core::corpus::vocab::Vocabulary;
use tte_core::corpus::batch::{Dataset, InputSource};
use tte_core::corpus::manifest::load_manifest;
use tte_core::decode::{beam_search, cer, encoder_states, greedy_decode, wer, BeamConfig, CharLm, Fusion};
use tte_core::nn::graph::log_softmax_rows;
use tte_core::nn::{AttentionMode, Graph, LocationAttention, Mode, ParamStore, SeqLayout, Session};
use tte_core::tte::{generate_states, max_frames_for, TteConfig, TteModel, TteTrainConfig, TteTrainLog};
use tte_core::{verify, Tensor};

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn(&mut Runs) -> Outcome;

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, Check); 11] = [
        (1, "gradient suite", gradient_suite),
        (2, "normalization", normalization),
        (3, "length algebra", length_algebra),
        (4, "edit-distance oracle", edit_distance_oracle),
        (5, "beam degeneracy", beam_degeneracy),
        (6, "generation range and stop", generation_contract),
        (7, "L1 ablation", l1_ablation),
        (8, "augmentation effect", augmentation_effect),
        (9, "overfitting contrast", overfitting_contrast),
        (10, "freeze contract", freeze_contract),
        (11, "determinism", determinism),
    ];
    let mut runs = Runs::new();
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = check(&mut runs);
        let mark = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {mark} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn gradient_suite(_: &mut Runs) -> Outcome {
    let start = Instant::now();
    let results = verify::full_suite().expect("gradient suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("suite is nonempty");
    let all = results.iter().all(|r| r.max_rel_error < 1e-4);
    outcome(
        all && secs < 120.0,
        format!(
            "{} checks, worst {} at {:.2e} (< 1e-4), {secs:.1}s (< 120s)",
            results.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

fn normalization(_: &mut Runs) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut masked_nonzero = 0usize;
    let mut distributions = 0usize;
    let mut check_row = |row: &[f32], valid: &dyn Fn(usize) -> bool, worst: &mut f64| {
        let total: f64 = row.iter().map(|&v| v as f64).sum();
        *worst = worst.max((total - 1.0).abs());
        masked_nonzero += row.iter().enumerate().filter(|&(i, &v)| !valid(i) && v != 0.0).count();
    };
    for shape in 0..1000 {
        let batch = rng.gen_range(1..=4);
        let lens: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=30)).collect();
        let layout = SeqLayout::new(lens.clone());
        let (qd, sd, ad) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=6));
        let width = 2 * rng.gen_range(0..=4) + 1;
        let mode = if shape % 2 == 0 { AttentionMode::Previous } else { AttentionMode::Cumulative };
        let mut store = ParamStore::<f32>::new();
        let att = LocationAttention::new(&mut store, "att", qd, sd, ad, 3, width, mode, &mut rng).unwrap();
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::EVAL, ChaCha8Rng::seed_from_u64(shape));
        let scale = [0.1f32, 1.0, 10.0][shape as usize % 3];
        let states = Tensor::from_fn(layout.steps * batch, sd, |_, _| rng.gen_range(-scale..scale));
        let mem = att.prepare(&s, s.constant(states), &layout).unwrap();
        let mut state = att.initial_state(&s, &mem);
        for _ in 0..3 {
            let query = s.constant(Tensor::from_fn(batch, qd, |_, _| rng.gen_range(-scale..scale)));
            let (_, next) = att.attend(&s, &mem, query, &state);
            let w = g.value(next.weights).clone();
            for (b, &len) in lens.iter().enumerate() {
                check_row(w.row(b), &|t| t < len, &mut worst);
                distributions += 1;
            }
            state = next;
        }

        let (rows, cols) = (rng.gen_range(1..=5), rng.gen_range(1..=40));
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.6)).collect();
        for r in 0..rows {
            let keep = rng.gen_range(0..cols);
            mask[r * cols + keep] = true;
        }
        let logits = Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-50.0f32..50.0));
        let p = g.masked_softmax(s.constant(logits.clone()), &mask);
        let p = g.value(p).clone();
        for r in 0..rows {
            let m = &mask[r * cols..(r + 1) * cols];
            check_row(p.row(r), &|c| m[c], &mut worst);
            distributions += 1;
        }
        let lp = log_softmax_rows(&logits).map(f32::exp);
        for r in 0..rows {
            check_row(lp.row(r), &|_| true, &mut worst);
            distributions += 1;
        }
    }
    outcome(
        worst <= 1e-6 && masked_nonzero == 0,
        format!("{distributions} distributions over 1000 shapes, max |sum - 1| = {worst:.1e} (<= 1e-6), {masked_nonzero} nonzero masked entries"),
    )
}

fn length_algebra(_: &mut Runs) -> Outcome {
    let mut store = ParamStore::<f32>::new();
    let model = AsrModel::build(&AsrConfig::tiny(4), Vocabulary::default(), &mut store, 5).unwrap();
    let mut bad = Vec::new();
    for t in 1..=100usize {
        let expect = t.div_ceil(2).div_ceil(2);
        let frames = Tensor::from_fn(t, 4, |r, c| ((r * 4 + c) as f32 * 0.1).sin());
        let got = model.encode_utterance(&store, &frames).unwrap().rows();
        if got != expect || model.output_length(t) != expect {
            bad.push(t);
        }
    }
    outcome(bad.is_empty(), format!("T = 1..100, mismatches at {bad:?}"))
}

/// Full-table Levenshtein distance.
fn table_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn edit_distance_oracle(_: &mut Runs) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let words = ["a", "ab", "ba", "abc", "c", "cab"];
    let sentence = |rng: &mut ChaCha8Rng, min: usize| -> String {
        let n = rng.gen_range(min..=8);
        (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
    };
    let mut mismatches = 0;
    for _ in 0..200 {
        let r = sentence(&mut rng, 1);
        let h = sentence(&mut rng, 0);
        let (rc, hc): (Vec<char>, Vec<char>) = (r.chars().collect(), h.chars().collect());
        let (rw, hw): (Vec<&str>, Vec<&str>) = (r.split_whitespace().collect(), h.split_whitespace().collect());
        let c_oracle = table_distance(&rc, &hc) as f64 / rc.len() as f64;
        let w_oracle = table_distance(&rw, &hw) as f64 / rw.len() as f64;
        if cer(&r, &h).unwrap() != c_oracle || wer(&r, &h).unwrap() != w_oracle {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("200 random pairs, {mismatches} mismatches"))
}

fn beam_degeneracy(runs: &mut Runs) -> Outcome {
    let run = runs.seed_run(1);
    let (model, store) = AsrModel::load(&run.stage_file(Stage::TrainAsr, "model.ckpt")).unwrap();
    let (lm, lm_store) = CharLm::load(&run.stage_file(Stage::TrainLm, "model.ckpt")).unwrap();
    let valid = Dataset::load(&load_manifest(&run.config.valid).unwrap(), InputSource::Features, &run.config.frames).unwrap();
    let fusion = Fusion { lm: &lm, store: &lm_store };
    let (mut greedy_diff, mut fusion_diff, mut n) = (0, 0, 0);
    for e in valid.examples.iter().take(50) {
        let states = encoder_states(&model, &store, &e.input).unwrap();
        let one = BeamConfig {
            beam_size: 1,
            ..BeamConfig::default()
        };
        let beam = beam_search(&model, &store, &states, &one, None).unwrap();
        let greedy = greedy_decode(&model, &store, &states, &one).unwrap();
        if beam.first().map(|h| &h.tokens) != Some(&greedy.tokens) {
            greedy_diff += 1;
        }
        let wide = BeamConfig {
            lm_weight: 0.0,
            ..BeamConfig::default()
        };
        let plain = beam_search(&model, &store, &states, &wide, None).unwrap();
        let fused = beam_search(&model, &store, &states, &wide, Some(fusion)).unwrap();
        let same = plain.len() == fused.len()
            && plain.iter().zip(&fused).all(|(a, b)| {
                a.tokens == b.tokens && a.log_score.to_bits() == b.log_score.to_bits() && a.attention == b.attention
            });
        if !same {
            fusion_diff += 1;
        }
        n += 1;
    }
    outcome(
        n == 50 && greedy_diff == 0 && fusion_diff == 0,
        format!("{n} utterances: beam 1 differs from greedy on {greedy_diff}, zero-weight fusion differs on {fusion_diff}"),
    )
}

/// Tallies stop-token halts, budget halts and contract violations over `texts`.
fn check_generation(model: &TteModel, store: &ParamStore<f32>, texts: &[String], fpc: f64, tally: &mut [usize; 3]) {
    let threshold = model.config.stop_threshold;
    for (i, text) in texts.iter().enumerate() {
        let max = max_frames_for(text.chars().count(), fpc);
        let out = generate_states(model, store, text, max, i as u64).unwrap();
        let p = &out.stop_probabilities;
        let in_range = out.states.data().iter().all(|&v| v > -1.0 && v < 1.0);
        let frames_ok = out.states.rows() == p.len() && !p.is_empty() && p.len() <= max;
        let early_ok = p[..p.len() - 1].iter().all(|&x| x <= threshold);
        let halt_ok = if out.truncated {
            p.len() == max && p[p.len() - 1] <= threshold
        } else {
            p[p.len() - 1] > threshold
        };
        if in_range && frames_ok && early_ok && halt_ok {
            tally[usize::from(out.truncated)] += 1;
        } else {
            tally[2] += 1;
        }
    }
}

fn generation_contract(runs: &mut Runs) -> Outcome {
    let run = runs.seed_run(1);
    let (trained, trained_store) = TteModel::load(&run.stage_file(Stage::TrainTte, "model.ckpt")).unwrap();
    let texts: Vec<String> = load_manifest(&run.config.unpaired).unwrap().texts().into_iter().take(200).collect();
    let fpc = run.joint.generation.as_ref().map_or(2.0, |g| g.frames_per_char);
    let mut tally = [0usize; 3];
    check_generation(&trained, &trained_store, &texts, fpc, &mut tally);
    let mut store = ParamStore::new();
    let untrained = TteModel::build(&TteConfig::desk(), Vocabulary::default(), &mut store, 9).unwrap();
    let mut raw = [0usize; 3];
    check_generation(&untrained, &store, &texts[..50], fpc, &mut raw);
    outcome(
        tally[2] + raw[2] == 0,
        format!(
            "trained model: {} stop-token halts, {} budget halts; untrained: {} / {}; violations {}",
            tally[0],
            tally[1],
            raw[0],
            raw[1],
            tally[2] + raw[2]
        ),
    )
}

fn l1_ablation(runs: &mut Runs) -> Outcome {
    let mut faster = 0;
    let mut lower = 0;
    let mut parts = Vec::new();
    let mut secs = 0.0;
    for seed in SEEDS {
        let run = runs.seed_run(seed);
        secs += run.stage_secs.get(&Stage::TrainTte).copied().unwrap_or(0.0);
        let with = run.joint.tte_log.clone().expect("joint run trains the text-to-encoder model");
        let (without, arm_secs) = runs.no_l1_arm(seed);
        secs += arm_secs;
        let epochs = with.epochs.len();
        // An arm that never reaches the threshold is counted as reaching it
        // one epoch after the budget.
        let reach = |log: &TteTrainLog| log.attention_epoch.unwrap_or(epochs + 1) as f64;
        let quick = with.attention_epoch.is_some() && reach(&with) <= reach(&without) / 2.0;
        let better = with.final_valid_mse() <= without.final_valid_mse();
        faster += usize::from(quick);
        lower += usize::from(better);
        let show = |e: Option<usize>| e.map_or(format!(">{epochs}"), |e| e.to_string());
        parts.push(format!(
            "seed {seed}: epoch {} vs {}, mse {:.4} vs {:.4}",
            show(with.attention_epoch),
            show(without.attention_epoch),
            with.final_valid_mse(),
            without.final_valid_mse()
        ));
    }
    outcome(
        faster >= 2 && lower >= 2 && secs < 1200.0,
        format!(
            "with vs without L1: {}; halved in {faster}/3, lower mse in {lower}/3, training {secs:.0}s (< 1200s)",
            parts.join("; ")
        ),
    )
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn augmentation_effect(runs: &mut Runs) -> Outcome {
    let mut rows = Vec::new();
    let mut secs = 0.0;
    for seed in SEEDS {
        let run = runs.seed_run(seed);
        secs += run.joint_secs;
        let base = run.joint.row("baseline").expect("baseline row").valid.clone();
        let joint = run.joint.row("retrain_joint").expect("retrain_joint row").valid.clone();
        rows.push((base, joint));
    }
    let base_cer = mean(rows.iter().map(|r| r.0.cer));
    let joint_cer = mean(rows.iter().map(|r| r.1.cer));
    let base_recall = mean(rows.iter().map(|r| r.0.held_out_recall.unwrap_or(0.0)));
    let joint_recall = mean(rows.iter().map(|r| r.1.held_out_recall.unwrap_or(0.0)));
    outcome(
        joint_cer < base_cer && joint_recall > base_recall && secs < 2700.0,
        format!(
            "mean validation CER {:.2}% -> {:.2}%, held-out recall {:.1}% -> {:.1}%, pipelines {secs:.0}s (< 2700s)",
            100.0 * base_cer,
            100.0 * joint_cer,
            100.0 * base_recall,
            100.0 * joint_recall
        ),
    )
}

fn overfitting_contrast(runs: &mut Runs) -> Outcome {
    let mut joint = Vec::new();
    let mut state = Vec::new();
    for seed in SEEDS {
        let run = runs.seed_run(seed);
        joint.push(run.joint.row("retrain_joint").expect("retrain_joint row").valid.cer);
        state.push(run.state.as_ref().unwrap().row("retrain_state").expect("retrain_state row").valid.cer);
    }
    let (j, s) = (mean(joint.iter().copied()), mean(state.iter().copied()));
    let per_seed: Vec<String> = joint
        .iter()
        .zip(&state)
        .map(|(j, s)| format!("{:.2}/{:.2}", 100.0 * j, 100.0 * s))
        .collect();
    outcome(
        j <= s,
        format!(
            "mean validation CER Retrain-Joint {:.2}% vs Retrain-State {:.2}% (per seed {})",
            100.0 * j,
            100.0 * s,
            per_seed.join(", ")
        ),
    )
}

fn group_values(path: &Path, prefix: &str) -> Vec<(String, Tensor<f32>)> {
    let (_, store) = AsrModel::load(path).unwrap();
    let values: Vec<_> = store.named_values().into_iter().filter(|(n, _)| n.starts_with(prefix)).collect();
    assert!(!values.is_empty(), "no parameters under {prefix}");
    values
}

fn bits_equal(a: &[(String, Tensor<f32>)], b: &[(String, Tensor<f32>)]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((na, ta), (nb, tb))| {
            na == nb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

fn freeze_contract(runs: &mut Runs) -> Outcome {
    let before = runs.seed_run(1).stage_file(Stage::TrainAsr, "model.ckpt");
    let retrained = |runs: &mut Runs, v: Variant| runs.arm_dir(1, v).join(Stage::Retrain.name()).join("model.ckpt");
    let arms = [Variant::RetrainJoint, Variant::RetrainState, Variant::RetrainStateFrozen];
    let mut facts = Vec::new();
    let mut ok = true;
    for v in arms {
        let after = retrained(runs, v);
        let enc = bits_equal(&group_values(&before, "encoder."), &group_values(&after, "encoder."));
        let att = bits_equal(&group_values(&before, "attention."), &group_values(&after, "attention."));
        let dec = bits_equal(&group_values(&before, "decoder."), &group_values(&after, "decoder."));
        ok &= enc && att == v.freezes_attention() && !dec;
        facts.push(format!(
            "{v}: encoder {}, attention {}, decoder {}",
            if enc { "identical" } else { "changed" },
            if att { "identical" } else { "changed" },
            if dec { "identical" } else { "changed" },
        ));
    }
    outcome(ok, facts.join("; "))
}

fn sha256_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&path).unwrap())));
            }
        }
    }
    out
}

fn determinism(runs: &mut Runs) -> Outcome {
    let root = runs.root.join("determinism");
    std::fs::create_dir_all(&root).unwrap();
    let config = root.join("config.json");
    std::fs::write(
        &config,
        r#"{"corpus": {"paired": 30, "unpaired": 30, "valid": 10, "eval": 5},
            "asr_train": {"epochs": 3}, "retrain": {"epochs": 2}, "tte_train": {"epochs": 2},
            "lm": {"train": {"epochs": 1}, "grid": [0.0, 0.3]}, "beam": {"beam_size": 4}}"#,
    )
    .unwrap();
    let tte = |args: &[&str]| {
        let status = Command::new(env!("CARGO_BIN_EXE_tte"))
            .current_dir(&root)
            .args(args)
            .args(["--quiet", "--config", "config.json", "--jobs", "1"])
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success(), "tte {args:?} failed");
    };
    for d in ["corpus", "a", "b"] {
        let _ = std::fs::remove_dir_all(root.join(d));
    }
    tte(&["make-corpus", "corpus"]);
    tte(&["pipeline", "--run-dir", "a"]);
    tte(&["pipeline", "--run-dir", "b"]);
    let (a, b) = (sha256_tree(&root.join("a")), sha256_tree(&root.join("b")));
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let checkpoints = a.keys().filter(|k| k.ends_with(".ckpt")).count();
    outcome(
        a.len() == b.len() && differing.is_empty() && checkpoints >= 4 && a.contains_key("report.json"),
        format!(
            "{} files ({checkpoints} checkpoints, reports included), {} differ",
            a.len(),
            differing.len()
        ),
    )
}

struct SeedRun {
    config: PipelineConfig,
    dir: PathBuf,
    joint: RunReport,
    state: Option<RunReport>,
    joint_secs: f64,
    stage_secs: BTreeMap<Stage, f64>,
}

impl SeedRun {
    fn stage_file(&self, stage: Stage, name: &str) -> PathBuf {
        self.dir.join(stage.name()).join(name)
    }
}

/// Trained pipeline runs shared across criteria. Each retraining arm has its
/// own run directory; the stages it shares with the joint arm are copied
/// over and picked up by the pipeline's resume check.
struct Runs {
    root: PathBuf,
    _temp: Option<tempfile::TempDir>,
    seeds: BTreeMap<u64, SeedRun>,
    no_l1: BTreeMap<u64, (TteTrainLog, f64)>,
}

const SHARED: [Stage; 5] = [Stage::TrainAsr, Stage::ExtractStates, Stage::TrainTte, Stage::GenerateStates, Stage::TrainLm];

impl Runs {
    fn new() -> Self {
        let (root, temp) = match std::env::var_os("ACCEPTANCE_DIR") {
            Some(d) => (PathBuf::from(d), None),
            None => {
                let t = tempfile::tempdir().unwrap();
                (t.path().to_path_buf(), Some(t))
            }
        };
        std::fs::create_dir_all(&root).unwrap();
        Self {
            root,
            _temp: temp,
            seeds: BTreeMap::new(),
            no_l1: BTreeMap::new(),
        }
    }

    fn config(&self, seed: u64, variant: Variant) -> PipelineConfig {
        let corpus = self.root.join(format!("corpus{seed}"));
        if !corpus.join("held_out_words.txt").exists() {
            make_toy_corpus(&corpus, &ToyCorpusConfig::default(), &Vocabulary::default(), seed).unwrap();
        }
        PipelineConfig {
            variant,
            seed,
            paired: corpus.join("paired.jsonl"),
            unpaired: corpus.join("unpaired.jsonl"),
            unpaired_audio: Some(corpus.join("unpaired_audio.jsonl")),
            valid: corpus.join("valid.jsonl"),
            eval: Some(corpus.join("eval.jsonl")),
            held_out_words: Some(corpus.join("held_out_words.txt")),
            ..PipelineConfig::default()
        }
    }

    /// Runs the stages one by one so each stage is timed.
    fn timed_run(config: PipelineConfig, dir: &Path, secs: &mut BTreeMap<Stage, f64>) -> RunReport {
        let mut p = Pipeline::new(config.clone(), dir).unwrap();
        for stage in config.variant.stages() {
            let start = Instant::now();
            p.run_until(stage).unwrap_or_else(|e| panic!("seed {} {stage}: {e}", config.seed));
            *secs.entry(stage).or_default() += start.elapsed().as_secs_f64();
        }
        p.run().unwrap()
    }

    fn dir(&self, seed: u64, variant: Variant) -> PathBuf {
        match variant {
            Variant::RetrainJoint => self.root.join(format!("run{seed}")),
            v => self.root.join(format!("run{seed}.{v}")),
        }
    }

    /// Runs (or resumes) the `variant` arm for `seed`, which must not be
    /// the joint arm, and returns its directory and report.
    fn run_arm(&mut self, seed: u64, variant: Variant) -> (PathBuf, RunReport) {
        let joint_dir = self.dir(seed, Variant::RetrainJoint);
        let dir = self.dir(seed, variant);
        for stage in SHARED {
            if !dir.join(stage.name()).exists() {
                copy_dir(&joint_dir.join(stage.name()), &dir.join(stage.name()));
            }
        }
        let report = Self::timed_run(self.config(seed, variant), &dir, &mut BTreeMap::new());
        (dir, report)
    }

    /// Run directory of a finished `variant` pipeline for `seed`.
    fn arm_dir(&mut self, seed: u64, variant: Variant) -> PathBuf {
        self.seed_run(seed);
        match variant {
            Variant::RetrainJoint => self.dir(seed, variant),
            v => self.run_arm(seed, v).0,
        }
    }

    fn seed_run(&mut self, seed: u64) -> &SeedRun {
        if !self.seeds.contains_key(&seed) {
            let dir = self.dir(seed, Variant::RetrainJoint);
            let mut stage_secs = BTreeMap::new();
            let config = self.config(seed, Variant::RetrainJoint);
            let joint = Self::timed_run(config.clone(), &dir, &mut stage_secs);
            let joint_secs: f64 = stage_secs.values().sum();
            self.seeds.insert(
                seed,
                SeedRun {
                    config,
                    dir,
                    joint,
                    state: None,
                    joint_secs,
                    stage_secs,
                },
            );
            let (_, state) = self.run_arm(seed, Variant::RetrainState);
            self.seeds.get_mut(&seed).unwrap().state = Some(state);
        }
        &self.seeds[&seed]
    }

    fn no_l1_arm(&mut self, seed: u64) -> (TteTrainLog, f64) {
        if !self.no_l1.contains_key(&seed) {
            let run = self.seed_run(seed);
            let (config, dir) = (run.config.clone(), run.dir.clone());
            let cached = self.root.join(format!("no_l1.{seed}.json"));
            let arm = match std::fs::read(&cached).ok().and_then(|b| serde_json::from_slice(&b).ok()) {
                Some(arm) => arm,
                None => {
                    let mut p = Pipeline::new(config.clone(), &dir).unwrap();
                    p.run_until(Stage::ExtractStates).unwrap();
                    let train = TteTrainConfig {
                        use_l1: false,
                        ..config.tte_train.clone()
                    };
                    let start = Instant::now();
                    let (_, _, log) = p.train_tte_arm(&train).unwrap();
                    let arm = (log, start.elapsed().as_secs_f64());
                    std::fs::write(&cached, serde_json::to_vec(&arm).unwrap()).unwrap();
                    arm
                }
            };
            self.no_l1.insert(seed, arm);
        }
        self.no_l1[&seed].clone()
    }
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let path = entry.unwrap().path();
        let target = to.join(path.file_name().unwrap());
        if path.is_dir() {
            copy_dir(&path, &target);
        } else {
            std::fs::copy(&path, &target).unwrap();
        }
    }
}
