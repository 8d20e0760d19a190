//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits non-zero if any failed.
//!
//! The training criteria share one synthetic benchmark and a cache of
//! trained models, so the whole suite takes a while on one core.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use costt::corpus::{build_vocab, synth_generate, SynthConfig, SynthCorpus, Vocabulary};
use costt::ctc::{collapse, ctc_brute_force, ctc_loss, ctc_loss_value};
use costt::eval::{decode_corpus, score, Hypothesis, Reference};
use costt::metrics::{corpus_bleu, edit_distance, error_rate, BleuSmoothing, EvalReport};
use costt::model::{Forward, Model, ModelConfig};
use costt::rng::{self, StreamRng};
use costt::shrink::{self, ShrinkPlan};
use costt::tensor::{finite_diff_check, Tape, Tensor, TensorError, Var};
use costt::train::{
    average_checkpoints, encode_corpus, encode_text, joint_loss, masked_pretrain_loss, train_from_scratch,
    train_with_pretrain, tt_ce_loss, Example, LossOptions, Record, RunOptions, Stage, TrainConfig, TrainError,
    TrainReport,
};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'a str, Box<dyn FnMut(&mut Bench) -> Outcome>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng_for(name: &str, index: u64) -> StreamRng {
    rng::stream(20_260_101, name, index)
}

fn random_log_probs(r: &mut StreamRng, t: usize, v: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            let logits: Vec<f64> = (0..v).map(|_| r.random_range(-3.0..3.0)).collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            logits.iter().map(|x| x - z).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

// ---------------------------------------------------------------- criterion 1

fn ctc_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut infeasible = 0;
    for t in 1..=6 {
        for u in 0..=3 {
            for v in 2..=4 {
                for draw in 0..20 {
                    let mut r = rng_for("ctc", (t * 100 + u * 10 + v) as u64 * 20 + draw);
                    let lp = random_log_probs(&mut r, t, v);
                    let target: Vec<usize> = (0..u).map(|_| r.random_range(0..v - 1)).collect();
                    let brute = ctc_brute_force(&lp, &target).unwrap();
                    let dp = ctc_loss_value(&lp, &target).unwrap();
                    let mut tape = Tape::new();
                    let x = tape.constant(lp.clone());
                    let taped = ctc_loss(&mut tape, x, &target).unwrap().map(|l| tape.value(l).item());
                    cases += 1;
                    if brute.is_infinite() {
                        infeasible += 1;
                        if !(dp.is_infinite() && taped.is_none()) {
                            return Err(format!("T={t} U={u} V'={v}: brute force infeasible, DP gave {dp}"));
                        }
                        continue;
                    }
                    let Some(taped) = taped else {
                        return Err(format!("T={t} U={u} V'={v}: tape loss reported infeasible"));
                    };
                    worst = worst.max((dp - brute).abs()).max((taped - brute).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-9 && secs < 60.0,
        format!("{cases} cases ({infeasible} infeasible), max |DP - brute| = {worst:.2e}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn toy_corpus() -> (SynthCorpus, Vocabulary) {
    let cfg = SynthConfig {
        lexicon_size: 8,
        phonemes: 6,
        feature_dim: 4,
        train_size: 4,
        dev_size: 1,
        test_size: 1,
        text_size: 2,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&cfg).unwrap();
    let vocab = build_vocab(&[&corpus.train], &corpus.text).unwrap();
    (corpus, vocab)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut results = Vec::new();
    let mut r = rng_for("grad", 0);

    let logits = random_log_probs(&mut r, 7, 4);
    let g = finite_diff_check(
        |t: &mut Tape, v: &[Var]| -> Result<Var, TrainError> {
            let lp = t.log_softmax(v[0]);
            Ok(ctc_loss(t, lp, &[0, 1, 1])?.expect("feasible"))
        },
        &[logits],
        1e-5,
    )
    .unwrap();
    results.push(("ctc_loss", g.max_rel_error));

    let posts = random_log_probs(&mut r, 9, 3);
    let h = Tensor::matrix(9, 5, (0..45).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let g = finite_diff_check(
        |t: &mut Tape, v: &[Var]| -> Result<Var, TensorError> {
            let out = shrink::shrink(t, v[0], &posts)?;
            Ok(t.sum(out.h_prime))
        },
        &[h],
        1e-5,
    )
    .unwrap();
    results.push(("shrink+sum", g.max_rel_error));

    let gold = [0, 5, 6, 1, 7, 5, 2];
    let logits = Tensor::matrix(6, 9, (0..54).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
    let g = finite_diff_check(
        |t: &mut Tape, v: &[Var]| tt_ce_loss(t, v[0], &gold, LossOptions::default()),
        std::slice::from_ref(&logits),
        1e-5,
    )
    .unwrap();
    results.push(("tt_ce_loss", g.max_rel_error));
    let g = finite_diff_check(
        |t: &mut Tape, v: &[Var]| masked_pretrain_loss(t, v[0], &gold, 2, LossOptions::default()),
        &[logits],
        1e-5,
    )
    .unwrap();
    results.push(("masked_pretrain_loss", g.max_rel_error));

    let (corpus, vocab) = toy_corpus();
    let cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        pre_shrink_layers: 1,
        post_shrink_layers: 1,
        decoder_layers: 1,
        ffn_dim: 24,
        dropout: 0.0,
        right_context: 2,
        ..ModelConfig::default()
    }
    .for_vocab(&vocab, 4);
    let model = Model::new(cfg, 3).unwrap();
    let ex = &encode_corpus(&corpus.train[..1], &vocab).unwrap()[0];
    let g = finite_diff_check(
        |t: &mut Tape, v: &[Var]| -> Result<Var, TrainError> {
            let p = model.bind_vars(t, v)?;
            let mut fwd = Forward::eval();
            let out = model.as_forward(t, &p, &ex.features, &mut fwd)?;
            let input = &ex.sequence[..ex.sequence.len() - 1];
            let logits = model.tt_forward(t, &p, out.h_as, input, &mut fwd)?;
            let j = joint_loss(
                t,
                out.ctc_log_probs,
                &ex.phonemes,
                logits,
                &ex.sequence,
                0.5,
                LossOptions::default(),
            )?;
            assert!(j.l_as.is_some());
            Ok(j.total)
        },
        model.params().values(),
        1e-5,
    )
    .unwrap();
    results.push(("joint loss", g.max_rel_error));

    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(
        worst < 1e-3 && secs < 120.0,
        format!("{}; {secs:.1}s", detail.join(", ")),
    )
}

// ---------------------------------------------------------------- criterion 3

/// Runs of equal non-blank argmax labels, found independently of the shrink module.
fn argmax_runs(lp: &Tensor) -> Vec<(usize, Vec<usize>)> {
    let blank = lp.cols() - 1;
    let mut runs: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut prev: Option<usize> = None;
    for t in 0..lp.rows() {
        let row = lp.row(t);
        let mut best = 0;
        for (k, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = k;
            }
        }
        if best != blank {
            match runs.last_mut() {
                Some((label, frames)) if prev == Some(best) && *label == best => frames.push(t),
                _ => runs.push((best, vec![t])),
            }
        }
        prev = Some(best);
    }
    runs
}

fn shrink_consistency() -> Outcome {
    let mut degenerate = 0;
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let mut r = rng_for("shrink", i);
        let t = r.random_range(1..=30);
        let v = r.random_range(2..=6);
        let d = r.random_range(1..=8);
        let mut lp = random_log_probs(&mut r, t, v);
        // Bias toward blank so runs and gaps both occur.
        for row in 0..t {
            if r.random_bool(0.4) {
                lp.data_mut()[row * v + v - 1] += 3.0;
            }
        }
        let h = Tensor::matrix(t, d, (0..t * d).map(|_| r.random_range(-5.0..5.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let out = shrink::shrink(&mut tape, hv, &lp).unwrap();
        let plan: &ShrinkPlan = &out.plan;
        let greedy: Vec<usize> = (0..t)
            .map(|row| {
                let x = lp.row(row);
                (0..v).fold(0, |b, k| if x[k] > x[b] { k } else { b })
            })
            .collect();
        let collapsed = collapse(&greedy, v - 1);
        if plan.degenerate {
            degenerate += 1;
            if !collapsed.is_empty() {
                return Err(format!("pair {i}: degenerate plan with non-empty collapse"));
            }
            continue;
        }
        if plan.len() != collapsed.len() {
            return Err(format!(
                "pair {i}: L = {} but |collapse| = {}",
                plan.len(),
                collapsed.len()
            ));
        }
        let runs = argmax_runs(&lp);
        let got = tape.value(out.h_prime);
        for (k, (_, frames)) in runs.iter().enumerate() {
            for c in 0..d {
                let mean = frames.iter().map(|&f| h.at(f, c)).sum::<f64>() / frames.len() as f64;
                worst = worst.max((got.at(k, c) - mean).abs());
            }
        }
    }
    check(
        worst <= 1e-12,
        format!("1000 pairs ({degenerate} degenerate), max |row - span mean| = {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn oracle_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    let count = |seq: &[u32], g: &[u32]| seq.windows(g.len()).filter(|w| *w == g).count();
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            if h.len() < n {
                continue;
            }
            total += h.len() - n + 1;
            let mut seen: Vec<&[u32]> = Vec::new();
            for g in h.windows(n) {
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                matched += count(h, g).min(count(r, g));
            }
        }
        if matched == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln() / 4.0;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * log_sum.exp()
}

/// Minimal edits by exhaustive recursion over every edit script.
fn brute_edit(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_edit(ra, rb) + usize::from(x != y);
            let del = brute_edit(ra, b) + 1;
            let ins = brute_edit(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

fn metric_oracles() -> Outcome {
    let mut worst_bleu = 0.0f64;
    let mut nonzero = 0;
    for i in 0..100 {
        let mut r = rng_for("bleu", i);
        let n = r.random_range(1..=4);
        let vocab = r.random_range(2..=5);
        let seq =
            |r: &mut StreamRng| -> Vec<u32> { (0..r.random_range(4..=10)).map(|_| r.random_range(0..vocab)).collect() };
        let refs: Vec<Vec<u32>> = (0..n).map(|_| seq(&mut r)).collect();
        let hyps: Vec<Vec<u32>> = (0..n).map(|_| seq(&mut r)).collect();
        let got = corpus_bleu(&hyps, &refs, 4, BleuSmoothing::None).unwrap();
        let want = oracle_bleu(&hyps, &refs);
        if want > 0.0 {
            nonzero += 1;
        }
        worst_bleu = worst_bleu.max((got - want).abs());
        let same = corpus_bleu(&refs, &refs, 4, BleuSmoothing::None).unwrap();
        if same != 100.0 {
            return Err(format!("corpus {i}: BLEU(h, h) = {same}"));
        }
    }
    let mut pairs = 0;
    for i in 0..400 {
        let mut r = rng_for("edit", i);
        let a: Vec<u8> = (0..r.random_range(0..=6)).map(|_| r.random_range(0..3)).collect();
        let b: Vec<u8> = (0..r.random_range(0..=6)).map(|_| r.random_range(0..3)).collect();
        let got = edit_distance(&a, &b);
        if got.distance != brute_edit(&a, &b) {
            return Err(format!(
                "edit distance {a:?} vs {b:?}: {} != {}",
                got.distance,
                brute_edit(&a, &b)
            ));
        }
        if got.substitutions + got.insertions + got.deletions != got.distance {
            return Err(format!("edit ops of {a:?} vs {b:?} do not sum to the distance"));
        }
        if !a.is_empty() && error_rate(&a, &a).unwrap() != 0.0 {
            return Err("WER(h, h) != 0".into());
        }
        pairs += 1;
    }
    check(
        worst_bleu <= 1e-9,
        format!(
            "100 BLEU corpora ({nonzero} non-zero), max |BLEU - oracle| = {worst_bleu:.1e}; {pairs} edit pairs exact"
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

const DETERMINISM_CFG: &str = "\
data.train_size = 60
data.dev_size = 8
data.test_size = 8
data.text_size = 20
model.d_model = 32
model.heads = 4
model.pre_shrink_layers = 1
model.post_shrink_layers = 1
model.decoder_layers = 1
model.ffn_dim = 64
train.max_steps = 100
train.validate_every = 50
train.batch_frames = 600
";

fn costt(cfg: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_costt"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("costt {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let mut run_files = Vec::new();
    let mut decodes = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("run.cfg");
        fs::write(
            &cfg,
            format!(
                "{DETERMINISM_CFG}paths.corpus_dir = {}\npaths.checkpoint_dir = {}\n",
                dir.join("data").display(),
                dir.join("ckpt").display()
            ),
        )
        .unwrap();
        costt(&cfg, &["gen-data"])?;
        costt(&cfg, &["train", "--mode", "scratch", "--quiet"])?;
        let final_bin = dir.join("ckpt/scratch/final.bin");
        decodes.push(costt(&cfg, &["decode", "--checkpoint", final_bin.to_str().unwrap()])?);
        run_files.push(dir);
    }
    let compare = [
        "data/train.manifest",
        "data/train.f64",
        "data/test.manifest",
        "data/text.tsv",
        "data/vocab.txt",
        "ckpt/scratch/final.bin",
        "ckpt/scratch/ckpt-scratch-000100.bin",
        "ckpt/scratch/report.jsonl",
    ];
    for rel in compare {
        let a = fs::read(run_files[0].join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        let b = fs::read(run_files[1].join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        if a != b {
            return Err(format!("{rel} differs between invocations"));
        }
    }
    if decodes[0] != decodes[1] || decodes[0].is_empty() {
        return Err("decode output differs between invocations".into());
    }

    // Save/load round trip and K=1 averaging, in process.
    let (corpus, vocab) = toy_corpus();
    let cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        ffn_dim: 32,
        max_decode_len: 40,
        ..ModelConfig::default()
    }
    .for_vocab(&vocab, 4);
    let model = Model::new(cfg.clone(), 5).unwrap();
    let before = decode_corpus(&model, &vocab, &corpus.train).unwrap();
    let path = root.join("roundtrip.bin");
    model.params().save(&path).unwrap();
    let mut loaded = Model::new(cfg, 99).unwrap();
    loaded.params_mut().load_into(&path).unwrap();
    let after = decode_corpus(&loaded, &vocab, &corpus.train).unwrap();
    if before != after {
        return Err("decode differs after checkpoint save/load".into());
    }
    let avg = average_checkpoints(std::slice::from_ref(model.params())).unwrap();
    let identical = (0..avg.len()).all(|i| {
        avg.name(i) == model.params().name(i)
            && avg
                .value(i)
                .data()
                .iter()
                .zip(model.params().value(i).data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    });
    check(
        identical,
        format!(
            "gen-data/train(100 steps)/decode byte-identical across 2 invocations; save/load decode equal on {} samples; K=1 average identity",
            before.len()
        ),
    )
}

// ------------------------------------------------------------ training criteria

/// The synthetic benchmark of the training criteria.
fn benchmark_data() -> SynthConfig {
    SynthConfig {
        phonemes: 20,
        lexicon_size: 60,
        train_size: 500,
        dev_size: 50,
        test_size: 50,
        text_size: 2000,
        swap_window: 2,
        seed: 1,
        ..SynthConfig::default()
    }
}

fn benchmark_model(vocab: &Vocabulary, feature_dim: usize) -> ModelConfig {
    ModelConfig {
        d_model: 64,
        heads: 4,
        pre_shrink_layers: 2,
        post_shrink_layers: 2,
        decoder_layers: 2,
        ffn_dim: 128,
        dropout: 0.3,
        ..ModelConfig::default()
    }
    .for_vocab(vocab, feature_dim)
}

fn benchmark_train(seed: u64) -> TrainConfig {
    TrainConfig {
        max_steps: 5000,
        pretrain_steps: 2000,
        am_steps: 500,
        batch_frames: 2000,
        text_batch_tokens: 600,
        peak_lr: 3e-3,
        warmup_steps: 200,
        augment: false,
        am_augment: false,
        validate_every: 250,
        average_last: 4,
        patience: 20,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Variant {
    Full,
    Pretrained,
    NoShrink,
    NoAsLoss,
}

struct Trained {
    model: Model,
    report: TrainReport,
    test: EvalReport,
    test_hyps: Vec<Hypothesis>,
    secs: f64,
}

struct Bench {
    corpus: SynthCorpus,
    vocab: Vocabulary,
    train: Vec<Example>,
    dev: Vec<Example>,
    runs: HashMap<(Variant, u64), Trained>,
}

impl Bench {
    fn new() -> Self {
        let corpus = synth_generate(&benchmark_data()).unwrap();
        let vocab = build_vocab(&[&corpus.train, &corpus.dev, &corpus.test], &corpus.text).unwrap();
        let train = encode_corpus(&corpus.train, &vocab).unwrap();
        let dev = encode_corpus(&corpus.dev, &vocab).unwrap();
        Self {
            corpus,
            vocab,
            train,
            dev,
            runs: HashMap::new(),
        }
    }

    fn get(&mut self, variant: Variant, seed: u64) -> &Trained {
        if !self.runs.contains_key(&(variant, seed)) {
            let t = self.train_variant(variant, seed);
            eprintln!(
                "    trained {variant:?} seed {seed}: {:.0}s, test BLEU {:.2} WER {:.2} PER {:.2}",
                t.secs, t.test.bleu, t.test.wer, t.test.per
            );
            self.runs.insert((variant, seed), t);
        }
        &self.runs[&(variant, seed)]
    }

    fn train_variant(&self, variant: Variant, seed: u64) -> Trained {
        let feature_dim = self.corpus.train[0].features.cols();
        let mut mcfg = benchmark_model(&self.vocab, feature_dim);
        let mut tcfg = benchmark_train(seed);
        match variant {
            Variant::NoShrink => mcfg.shrink = false,
            Variant::NoAsLoss => {
                mcfg.shrink = false;
                tcfg.alpha = 0.0;
            }
            Variant::Full | Variant::Pretrained => {}
        }
        let start = Instant::now();
        let mut model = Model::new(mcfg, seed).unwrap();
        let opts = RunOptions::default();
        let report = if variant == Variant::Pretrained {
            let text = encode_text(&self.corpus.text, &self.vocab).unwrap();
            train_with_pretrain(&mut model, &self.train, &self.dev, &text, &tcfg, &opts).unwrap()
        } else {
            train_from_scratch(&mut model, &self.train, &self.dev, &tcfg, &opts).unwrap()
        };
        let test_hyps = decode_corpus(&model, &self.vocab, &self.corpus.test).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let refs: Vec<Reference> = self.corpus.test.iter().map(Reference::from).collect();
        let test = score(&test_hyps, &refs).unwrap();
        Trained {
            model,
            report,
            test,
            test_hyps,
            secs,
        }
    }
}

fn toy_training(bench: &mut Bench) -> Outcome {
    let run = bench.get(Variant::Full, 1);
    let steps = run.report.steps().count();
    let st_violations = run
        .test_hyps
        .iter()
        .filter(|h| h.flags.missing_st || h.flags.extra_st > 0)
        .count();
    let t = &run.test;
    check(
        t.per <= 5.0 && t.wer <= 10.0 && t.bleu >= 85.0 && steps <= 5000 && run.secs <= 900.0 && st_violations == 0,
        format!(
            "PER {:.2} WER {:.2} BLEU {:.2} after {steps} steps in {:.0}s; {st_violations} sequences without exactly one <st>",
            t.per, t.wer, t.bleu, run.secs
        ),
    )
}

fn val_loss_at(report: &TrainReport, stage: Stage, step: usize) -> Option<f64> {
    report.records.iter().find_map(|r| match r {
        Record::Val(v) if v.stage == stage && v.step == step => Some(v.loss),
        _ => None,
    })
}

fn pretraining_benefit(bench: &mut Bench) -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    let (mut bleu_pre, mut bleu_scratch) = (0.0, 0.0);
    for seed in 1..=3 {
        let scratch = val_loss_at(&bench.get(Variant::Full, seed).report, Stage::Scratch, 1000);
        let sb = bench.get(Variant::Full, seed).test.bleu;
        let pre = val_loss_at(&bench.get(Variant::Pretrained, seed).report, Stage::St, 1000);
        let pb = bench.get(Variant::Pretrained, seed).test.bleu;
        let (Some(s), Some(p)) = (scratch, pre) else {
            return Err(format!("seed {seed}: no dev loss recorded at step 1000"));
        };
        if p < s {
            wins += 1;
        }
        bleu_pre += pb / 3.0;
        bleu_scratch += sb / 3.0;
        lines.push(format!(
            "seed {seed}: dev@1000 {p:.4} vs {s:.4}, BLEU {pb:.2} vs {sb:.2}"
        ));
    }
    check(
        wins >= 2 && bleu_pre >= bleu_scratch - 0.5,
        format!(
            "pretrained lower dev loss in {wins}/3 seeds; mean BLEU {bleu_pre:.2} vs {bleu_scratch:.2} ({})",
            lines.join("; ")
        ),
    )
}

fn ablation_direction(bench: &mut Bench) -> Outcome {
    let mut shrink_wins = 0;
    let mut as_wins = 0;
    let mut order_wins = 0;
    let mut lines = Vec::new();
    for seed in 1..=3 {
        let full = bench.get(Variant::Full, seed).test.bleu;
        let no_shrink = bench.get(Variant::NoShrink, seed).test.bleu;
        let no_as = bench.get(Variant::NoAsLoss, seed).test.bleu;
        shrink_wins += usize::from(full > no_shrink);
        as_wins += usize::from(full > no_as);
        order_wins += usize::from(no_shrink > no_as);
        lines.push(format!("seed {seed}: {full:.2} / {no_shrink:.2} / {no_as:.2}"));
    }
    check(
        shrink_wins >= 2 && as_wins >= 2 && order_wins >= 2,
        format!(
            "BLEU full / no shrink / no AS loss: {}; full beats no-shrink {shrink_wins}/3, no-AS {as_wins}/3; no-AS worst {order_wins}/3",
            lines.join("; ")
        ),
    )
}

fn shrink_length_stats(bench: &mut Bench) -> Outcome {
    bench.get(Variant::Full, 1);
    let run = &bench.runs[&(Variant::Full, 1)];
    let hyps = decode_corpus(&run.model, &bench.vocab, &bench.corpus.train).unwrap();
    let refs: Vec<Reference> = bench.corpus.train.iter().map(Reference::from).collect();
    let report = score(&hyps, &refs).unwrap();
    let table = report.shrink_table.ok_or("no shrink lengths recorded")?;
    let p3 = table.cumulative[3];
    let row: Vec<String> = table.cumulative.iter().map(|p| format!("{p:.3}")).collect();
    check(
        p3 >= 0.90,
        format!(
            "P(|L - T_u| <= 3) = {p3:.3} on {} training samples; k=0..9: {}",
            table.samples,
            row.join(" ")
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that matches no criterion skips the suite.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    if filter.as_deref().is_some_and(|f| !"acceptance".contains(f)) {
        return;
    }
    let mut bench = Bench::new();
    let criteria: Vec<Criterion> = vec![
        ("1 CTC oracle equivalence", Box::new(|_| ctc_oracle())),
        ("2 gradient suite", Box::new(|_| gradient_suite())),
        ("3 shrink consistency", Box::new(|_| shrink_consistency())),
        ("4 toy end-to-end training", Box::new(toy_training)),
        ("5 pretraining benefit", Box::new(pretraining_benefit)),
        ("6 ablation direction", Box::new(ablation_direction)),
        ("7 shrink-length statistics", Box::new(shrink_length_stats)),
        ("8 metric oracles", Box::new(|_| metric_oracles())),
        ("9 determinism and serialization", Box::new(|_| determinism())),
    ];
    // ACCEPTANCE_CRITERIA=1,2,8 runs a subset.
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut failed = 0;
    for (name, mut run) in criteria {
        let number = name.split(' ').next().unwrap_or_default();
        if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == number)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&mut bench)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail}) [{secs:.0}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail}) [{secs:.0}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
