//! Training loops, validation and resumable state.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::augment::spec_augment;
use super::batch::BatchStream;
use super::loss::{ctc_term, masked_pretrain_term, mix, reduce_terms, tt_ce_term, LossTerm};
use super::optim::{clip_factor, learning_rate, Adam};
use super::{average_checkpoints, Record, Stage, StepRecord, TrainConfig, TrainError, TrainReport, ValRecord};
use crate::corpus::{Partition, Quadruple, TextPair, Vocabulary};
use crate::ctc::is_feasible;
use crate::model::{consecutive_sequence, Forward, Model, ParamGroup, ParamStore};
use crate::rng::{self, AUGMENT_STREAM, DROPOUT_STREAM};
use crate::tensor::{checkpoint, Tape, Tensor};

/// A speech sample with ids resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    /// Raw frames, `T_raw × d_feat`.
    pub features: Tensor,
    pub phonemes: Vec<usize>,
    /// `[<asr>, z…, <st>, y…, <eos>]`.
    pub sequence: Vec<usize>,
    pub z_len: usize,
}

/// A text pair laid out as a consecutive sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TextExample {
    pub sequence: Vec<usize>,
    pub z_len: usize,
}

pub fn encode_corpus(corpus: &[Quadruple], vocab: &Vocabulary) -> Result<Vec<Example>, TrainError> {
    corpus
        .iter()
        .map(|q| {
            let z = vocab.encode(Partition::Source, &q.transcript)?;
            let y = vocab.encode(Partition::Target, &q.translation)?;
            Ok(Example {
                id: q.id.clone(),
                features: q.features.clone(),
                phonemes: vocab.encode(Partition::Phoneme, &q.phonemes)?,
                sequence: consecutive_sequence(vocab, &z, &y),
                z_len: z.len(),
            })
        })
        .collect()
}

pub fn encode_text(pairs: &[TextPair], vocab: &Vocabulary) -> Result<Vec<TextExample>, TrainError> {
    pairs
        .iter()
        .map(|p| {
            let z = vocab.encode(Partition::Source, &p.source)?;
            let y = vocab.encode(Partition::Target, &p.target)?;
            Ok(TextExample {
                sequence: consecutive_sequence(vocab, &z, &y),
                z_len: z.len(),
            })
        })
        .collect()
}

/// Where and how a run persists itself.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Receives `ckpt-<stage>-<step>.bin`, `state.json`/`state.bin`,
    /// `report.jsonl` and `final.bin`.
    pub out_dir: Option<PathBuf>,
    /// Continue from `state.json`/`state.bin` in `out_dir`.
    pub resume: bool,
    /// Print validation lines to stderr.
    pub verbose: bool,
}

/// Validation losses, computed without dropout, masking or label smoothing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValLosses {
    pub l_as: Option<f64>,
    pub l_tt: Option<f64>,
    pub loss: f64,
}

fn frames_after_downsample(model: &Model, ex: &Example) -> usize {
    ex.features.rows().div_ceil(model.config().downsample_rate)
}

fn check_feasibility(model: &Model, train: &[Example], cfg: &TrainConfig) -> Result<(), TrainError> {
    let infeasible = train
        .iter()
        .filter(|ex| !is_feasible(frames_after_downsample(model, ex), &ex.phonemes))
        .count();
    if infeasible as f64 > cfg.max_infeasible_fraction * train.len() as f64 {
        return Err(TrainError::TooManyInfeasible {
            infeasible,
            total: train.len(),
        });
    }
    Ok(())
}

/// Dev-set loss of the objective optimized in `stage`.
pub fn dev_loss(model: &Model, dev: &[Example], stage: Stage, cfg: &TrainConfig) -> Result<ValLosses, TrainError> {
    if dev.is_empty() {
        return Err(TrainError::EmptyCorpus { what: "dev set" });
    }
    let norm = cfg.loss_norm;
    let mut as_terms = Vec::new();
    let mut tt_terms = Vec::new();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, |_| false);
    let mut fwd = Forward::eval();
    for ex in dev {
        match stage {
            Stage::Condec => {
                let logits = model.tt_pretrain_forward(&mut tape, &p, &ex.sequence, &mut fwd)?;
                tt_terms.push(masked_pretrain_term(&mut tape, logits, &ex.sequence, ex.z_len, 0.0)?);
            }
            Stage::Am => {
                let lp = model.ctc_forward(&mut tape, &p, &ex.features, &mut fwd)?;
                as_terms.extend(ctc_term(&mut tape, lp, &ex.phonemes)?);
            }
            Stage::Scratch | Stage::St => {
                let out = model.as_forward(&mut tape, &p, &ex.features, &mut fwd)?;
                as_terms.extend(ctc_term(&mut tape, out.ctc_log_probs, &ex.phonemes)?);
                let input = &ex.sequence[..ex.sequence.len() - 1];
                let logits = model.tt_forward(&mut tape, &p, out.h_as, input, &mut fwd)?;
                tt_terms.push(tt_ce_term(&mut tape, logits, &ex.sequence, 0.0)?);
            }
        }
    }
    let l_as = reduce_terms(&mut tape, &as_terms, norm)?;
    let l_tt = reduce_terms(&mut tape, &tt_terms, norm)?;
    let loss = match (stage, l_as, l_tt) {
        (Stage::Am, Some(a), _) => tape.value(a).item(),
        (Stage::Am, None, _) => f64::INFINITY,
        (_, a, Some(t)) => {
            let v = mix(&mut tape, a, t, cfg.alpha)?;
            tape.value(v).item()
        }
        _ => f64::INFINITY,
    };
    Ok(ValLosses {
        l_as: l_as.map(|v| tape.value(v).item()),
        l_tt: l_tt.map(|v| tape.value(v).item()),
        loss,
    })
}

const STATE_FORMAT: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateMeta {
    format: u32,
    stage: Stage,
    step: usize,
    epoch: u64,
    position: usize,
    best: Option<f64>,
    bad: usize,
    early: bool,
    adam_t: Vec<u64>,
    snapshot_steps: Vec<usize>,
    report: TrainReport,
}

/// Mutable progress of one stage.
struct StageState {
    stage: Stage,
    step: usize,
    adam: Adam,
    batches: BatchStream,
    best: Option<f64>,
    bad: usize,
    early: bool,
    snapshots: Snapshots,
}

fn state_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("state.json"), dir.join("state.bin"))
}

fn save_state(dir: &Path, model: &Model, st: &StageState, report: &TrainReport) -> Result<(), TrainError> {
    let (json_path, bin_path) = state_paths(dir);
    let (epoch, position) = st.batches.cursor();
    let meta = StateMeta {
        format: STATE_FORMAT,
        stage: st.stage,
        step: st.step,
        epoch,
        position,
        best: st.best,
        bad: st.bad,
        early: st.early,
        adam_t: st.adam.t.clone(),
        snapshot_steps: st.snapshots.iter().map(|(s, _)| *s).collect(),
        report: report.clone(),
    };
    let params = model.params();
    let mut entries = Vec::new();
    for id in 0..params.len() {
        let name = params.name(id);
        let shape = params.value(id).shape().to_vec();
        entries.push((format!("p:{name}"), params.value(id).clone()));
        entries.push((format!("m:{name}"), Tensor::new(shape.clone(), st.adam.m[id].clone())?));
        entries.push((format!("v:{name}"), Tensor::new(shape, st.adam.v[id].clone())?));
    }
    for (k, (_, snap)) in st.snapshots.iter().enumerate() {
        for id in 0..snap.len() {
            entries.push((format!("s{k}:{}", snap.name(id)), snap.value(id).clone()));
        }
    }
    checkpoint::save(&bin_path, &entries)?;
    let json = serde_json::to_string(&meta).expect("plain data");
    fs::write(&json_path, json).map_err(TrainError::io(&json_path))
}

/// Averaging snapshots with the step each was taken at.
type Snapshots = VecDeque<(usize, ParamStore)>;

/// Restores params into `model` and returns the saved stage progress.
fn load_state(
    dir: &Path,
    model: &mut Model,
    cfg: &TrainConfig,
) -> Result<Option<(StateMeta, Adam, Snapshots)>, TrainError> {
    let (json_path, bin_path) = state_paths(dir);
    if !json_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&json_path).map_err(TrainError::io(&json_path))?;
    let meta: StateMeta =
        serde_json::from_str(&text).map_err(|e| TrainError::Resume(format!("{}: {e}", json_path.display())))?;
    if meta.format != STATE_FORMAT {
        return Err(TrainError::Resume(format!("unsupported state format {}", meta.format)));
    }
    let entries = checkpoint::load(&bin_path)?;
    let pick = |prefix: &str| -> Vec<(String, Tensor)> {
        entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    };
    model.params_mut().load_entries(&pick("p:"))?;
    let mut adam = Adam::new(cfg.adam, model.params().values());
    adam.t = meta.adam_t.clone();
    if adam.t.len() != model.params().len() {
        return Err(TrainError::Resume("optimizer state does not match the model".into()));
    }
    let mut tmp = model.params().clone();
    for (prefix, slot) in [("m:", &mut adam.m), ("v:", &mut adam.v)] {
        tmp.load_entries(&pick(prefix))?;
        *slot = tmp.values().iter().map(|t| t.data().to_vec()).collect();
    }
    let mut snapshots = VecDeque::new();
    for (k, &step) in meta.snapshot_steps.iter().enumerate() {
        let mut s = model.params().clone();
        s.load_entries(&pick(&format!("s{k}:")))?;
        snapshots.push_back((step, s));
    }
    Ok(Some((meta, adam, snapshots)))
}

fn trainable(stage: Stage) -> impl Fn(ParamGroup) -> bool {
    move |g| match stage {
        Stage::Condec => g == ParamGroup::Decoder,
        Stage::Am => g == ParamGroup::Acoustic,
        Stage::Scratch | Stage::St => true,
    }
}

struct Data<'a> {
    train: &'a [Example],
    dev: &'a [Example],
    text: &'a [TextExample],
}

impl Data<'_> {
    fn lengths(&self, stage: Stage) -> Vec<usize> {
        match stage {
            Stage::Condec => self.text.iter().map(|t| t.sequence.len()).collect(),
            _ => self.train.iter().map(|e| e.features.rows()).collect(),
        }
    }
}

fn budget(stage: Stage, cfg: &TrainConfig) -> usize {
    match stage {
        Stage::Condec => cfg.pretrain_steps,
        Stage::Am => cfg.am_steps,
        Stage::Scratch | Stage::St => cfg.max_steps,
    }
}

fn batch_budget(stage: Stage, cfg: &TrainConfig) -> usize {
    match stage {
        Stage::Condec => cfg.text_batch_tokens,
        _ => cfg.batch_frames,
    }
}

/// Runs one optimizer step. Returns `None` when the batch had nothing to learn from.
fn train_step(
    model: &mut Model,
    data: &Data<'_>,
    cfg: &TrainConfig,
    st: &mut StageState,
    batch: &[usize],
) -> Result<Option<StepRecord>, TrainError> {
    let stage = st.stage;
    let step = st.step + 1;
    let key = (stage.code() << 40) | step as u64;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable(stage));
    let mut fwd = if model.config().dropout > 0.0 {
        Forward::train(rng::stream(cfg.seed, DROPOUT_STREAM, key))
    } else {
        Forward::eval()
    };
    let mut aug = rng::stream(cfg.seed, AUGMENT_STREAM, key);
    let eps = cfg.label_smoothing;
    let mut as_terms: Vec<LossTerm> = Vec::new();
    let mut tt_terms: Vec<LossTerm> = Vec::new();
    let mut skipped = 0;
    let augment = match stage {
        Stage::Am => cfg.am_augment,
        _ => cfg.augment,
    };
    for &i in batch {
        match stage {
            Stage::Condec => {
                let ex = &data.text[i];
                let logits = model.tt_pretrain_forward(&mut tape, &bound, &ex.sequence, &mut fwd)?;
                tt_terms.push(masked_pretrain_term(&mut tape, logits, &ex.sequence, ex.z_len, eps)?);
            }
            Stage::Am | Stage::Scratch | Stage::St => {
                let ex = &data.train[i];
                let x = if augment {
                    spec_augment(&ex.features, &cfg.spec_augment, &mut aug)
                } else {
                    ex.features.clone()
                };
                if stage == Stage::Am {
                    let lp = model.ctc_forward(&mut tape, &bound, &x, &mut fwd)?;
                    match ctc_term(&mut tape, lp, &ex.phonemes)? {
                        Some(t) => as_terms.push(t),
                        None => skipped += 1,
                    }
                    continue;
                }
                let out = model.as_forward(&mut tape, &bound, &x, &mut fwd)?;
                if cfg.alpha > 0.0 {
                    match ctc_term(&mut tape, out.ctc_log_probs, &ex.phonemes)? {
                        Some(t) => as_terms.push(t),
                        None => skipped += 1,
                    }
                }
                let input = &ex.sequence[..ex.sequence.len() - 1];
                let logits = model.tt_forward(&mut tape, &bound, out.h_as, input, &mut fwd)?;
                tt_terms.push(tt_ce_term(&mut tape, logits, &ex.sequence, eps)?);
            }
        }
    }
    let l_as = reduce_terms(&mut tape, &as_terms, cfg.loss_norm)?;
    let l_tt = reduce_terms(&mut tape, &tt_terms, cfg.loss_norm)?;
    let total = match (l_as, l_tt) {
        (a, Some(t)) => mix(&mut tape, a, t, cfg.alpha)?,
        (Some(a), None) => a,
        (None, None) => return Ok(None),
    };
    let loss = tape.value(total).item();
    if !loss.is_finite() {
        return Err(TrainError::NonFinite { stage, step });
    }
    let grads = tape.backward(total)?;
    let params = model.params();
    let updates: Vec<(usize, &[f64])> = (0..params.len())
        .filter_map(|id| {
            tape.requires_grad(bound.var(id))
                .then(|| grads.get(bound.var(id)).map(|g| (id, g)))
                .flatten()
        })
        .collect();
    if updates.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(TrainError::NonFinite { stage, step });
    }
    let factor = clip_factor(&updates.iter().map(|(_, g)| *g).collect::<Vec<_>>(), cfg.clip_norm);
    let lr = learning_rate(cfg.peak_lr, cfg.warmup_steps, step);
    let updates: Vec<(usize, Vec<f64>)> = updates
        .into_iter()
        .map(|(id, g)| {
            (
                id,
                if factor == 1.0 {
                    g.to_vec()
                } else {
                    g.iter().map(|v| v * factor).collect()
                },
            )
        })
        .collect();
    drop(grads);
    let params = model.params_mut();
    for (id, g) in updates {
        st.adam.update(id, params.value_mut(id).data_mut(), &g, lr);
    }
    st.step = step;
    Ok(Some(StepRecord {
        stage,
        step,
        l_as: l_as.map(|v| tape.value(v).item()),
        l_tt: l_tt.map(|v| tape.value(v).item()),
        loss,
        lr,
        samples: batch.len(),
        skipped,
    }))
}

fn save_checkpoint(dir: &Path, model: &Model, stage: Stage, step: usize) -> Result<(), TrainError> {
    model
        .params()
        .save(&dir.join(format!("ckpt-{}-{step:06}.bin", stage.tag())))?;
    Ok(())
}

/// Runs (or continues) one stage until its budget or early stop.
fn run_stage(
    model: &mut Model,
    data: &Data<'_>,
    cfg: &TrainConfig,
    opts: &RunOptions,
    mut st: StageState,
    report: &mut TrainReport,
    keep_snapshots: bool,
) -> Result<StageState, TrainError> {
    let stage = st.stage;
    let limit = budget(stage, cfg);
    let mut last_saved = None;
    while st.step < limit && !st.early {
        let batch = st.batches.next_batch();
        let Some(rec) = train_step(model, data, cfg, &mut st, &batch)? else {
            report.skipped_batches += 1;
            continue;
        };
        report.skipped_infeasible += rec.skipped;
        report.records.push(Record::Step(rec));
        if !st.step.is_multiple_of(cfg.validate_every) {
            continue;
        }
        if !data.dev.is_empty() {
            let v = dev_loss(model, data.dev, stage, cfg)?;
            if opts.verbose {
                eprintln!(
                    "[{stage}] step {} train {:.4} dev {:.4} (as {:?}, tt {:?})",
                    st.step,
                    report.steps().last().map_or(f64::NAN, |s| s.loss),
                    v.loss,
                    v.l_as,
                    v.l_tt
                );
            }
            report.records.push(Record::Val(ValRecord {
                stage,
                step: st.step,
                l_as: v.l_as,
                l_tt: v.l_tt,
                loss: v.loss,
            }));
            if st.best.is_none_or(|b| v.loss < b) {
                st.best = Some(v.loss);
                st.bad = 0;
            } else {
                st.bad += 1;
                st.early = st.bad >= cfg.patience;
            }
        }
        if keep_snapshots {
            st.snapshots.push_back((st.step, model.params().clone()));
            while st.snapshots.len() > cfg.average_last {
                st.snapshots.pop_front();
            }
        }
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(dir, model, stage, st.step)?;
            save_state(dir, model, &st, report)?;
            report.save(&dir.join("report.jsonl"))?;
            last_saved = Some(st.step);
        }
    }
    report.records.push(Record::End {
        stage,
        step: st.step,
        early: st.early,
    });
    if let Some(dir) = &opts.out_dir {
        if last_saved != Some(st.step) {
            save_checkpoint(dir, model, stage, st.step)?;
        }
        save_state(dir, model, &st, report)?;
        report.save(&dir.join("report.jsonl"))?;
    }
    Ok(st)
}

fn fresh_stage(model: &Model, data: &Data<'_>, cfg: &TrainConfig, stage: Stage) -> StageState {
    StageState {
        stage,
        step: 0,
        adam: Adam::new(cfg.adam, model.params().values()),
        batches: BatchStream::at(
            data.lengths(stage),
            batch_budget(stage, cfg),
            cfg.seed,
            stage.code() << 32,
            0,
        ),
        best: None,
        bad: 0,
        early: false,
        snapshots: VecDeque::new(),
    }
}

fn run_stages(
    model: &mut Model,
    data: &Data<'_>,
    cfg: &TrainConfig,
    opts: &RunOptions,
    stages: &[Stage],
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(TrainError::io(dir))?;
    }
    let mut report = TrainReport::default();
    let mut first = 0;
    let mut resumed: Option<StageState> = None;
    if let (true, Some(dir)) = (opts.resume, &opts.out_dir) {
        if let Some((meta, adam, snapshots)) = load_state(dir, model, cfg)? {
            let idx = stages
                .iter()
                .position(|&s| s == meta.stage)
                .ok_or_else(|| TrainError::Resume(format!("saved stage `{}` is not part of this run", meta.stage)))?;
            report = meta.report.clone();
            let done = meta.early || meta.step >= budget(meta.stage, cfg);
            if !done {
                if let Some(Record::End {
                    stage, early: false, ..
                }) = report.records.last()
                {
                    if *stage == meta.stage {
                        report.records.pop();
                    }
                }
            }
            let st = StageState {
                stage: meta.stage,
                step: meta.step,
                adam,
                batches: BatchStream::at(
                    data.lengths(meta.stage),
                    batch_budget(meta.stage, cfg),
                    cfg.seed,
                    meta.epoch,
                    meta.position,
                ),
                best: meta.best,
                bad: meta.bad,
                early: meta.early,
                snapshots,
            };
            if done && idx + 1 < stages.len() {
                first = idx + 1;
            } else {
                first = idx;
                resumed = Some(st);
            }
        }
    }
    let last = stages.len() - 1;
    let mut final_state = None;
    for (i, &stage) in stages.iter().enumerate().skip(first) {
        if stage != Stage::Condec {
            check_feasibility(model, data.train, cfg)?;
        }
        let st = match resumed.take() {
            Some(st) => st,
            None => fresh_stage(model, data, cfg, stage),
        };
        let done = run_stage(model, data, cfg, opts, st, &mut report, i == last)?;
        if i == last {
            final_state = Some(done);
        }
    }
    if let Some(st) = final_state {
        if cfg.average_last > 1 && !st.snapshots.is_empty() {
            let stores: Vec<ParamStore> = st.snapshots.into_iter().map(|(_, s)| s).collect();
            *model.params_mut() = average_checkpoints(&stores)?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        model.params().save(&dir.join("final.bin"))?;
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Runs `stages` in order on one model. Stages after the first start from
/// the parameters the previous one left; the final stage's validation
/// snapshots are averaged into the returned model.
pub fn train_stages(
    model: &mut Model,
    train: &[Example],
    dev: &[Example],
    text: &[TextExample],
    stages: &[Stage],
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainReport, TrainError> {
    if stages.is_empty() {
        return Err(TrainError::Config("no stages to run".into()));
    }
    if stages.contains(&Stage::Condec) && text.is_empty() {
        return Err(TrainError::EmptyCorpus { what: "text corpus" });
    }
    if stages.iter().any(|&s| s != Stage::Condec) && train.is_empty() {
        return Err(TrainError::EmptyCorpus {
            what: "training corpus",
        });
    }
    let data = Data { train, dev, text };
    run_stages(model, &data, cfg, opts, stages)
}

/// Joint training on speech quadruples only.
pub fn train_from_scratch(
    model: &mut Model,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainReport, TrainError> {
    train_stages(model, train, dev, &[], &[Stage::Scratch], cfg, opts)
}

/// Decoder pretraining on `text`, acoustic pretraining on CTC, then joint fine-tuning.
pub fn train_with_pretrain(
    model: &mut Model,
    train: &[Example],
    dev: &[Example],
    text: &[TextExample],
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainReport, TrainError> {
    train_stages(
        model,
        train,
        dev,
        text,
        &[Stage::Condec, Stage::Am, Stage::St],
        cfg,
        opts,
    )
}
