use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use costt::config::RunConfig;
use costt::corpus::{
    build_vocab, load_manifest, load_text_pairs, save_manifest, save_text_pairs, synth_generate, Vocabulary,
};
use costt::eval::{decode_corpus, score, Hypothesis, Reference};
use costt::model::Model;
use costt::train::{encode_corpus, encode_text, train_stages, RunOptions, Stage, TrainError};
use costt::Error;

const TRAIN_MANIFEST: &str = "train.manifest";
const DEV_MANIFEST: &str = "dev.manifest";
const TEST_MANIFEST: &str = "test.manifest";
const TEXT_PAIRS: &str = "text.tsv";
const VOCAB: &str = "vocab.txt";

#[derive(Parser)]
#[command(
    name = "costt",
    version,
    about = "Consecutive speech transcription and translation on synthetic data"
)]
struct Cli {
    /// Flat `section.key = value` config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Scratch,
    Pretrained,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/dev/test manifests, text pairs and vocabulary.
    GenData {
        /// Output directory [default: paths.corpus_dir].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the decoder on the text pairs alone.
    PretrainMt {
        /// Run directory [default: <paths.checkpoint_dir>/pretrain].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the state saved in the run directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Train a speech translation model.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Run directory [default: <paths.checkpoint_dir>/<mode>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pretrained-mode start point from `pretrain-mt`; skips decoder pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from the state saved in the run directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Greedy consecutive decoding of a manifest into JSONL hypotheses.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to decode [default: <paths.corpus_dir>/test.manifest].
        #[arg(long)]
        input: Option<PathBuf>,
        /// Hypotheses file [default: stdout].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score hypotheses against references; prints a table.
    Evaluate {
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// Also write the report as one JSON line.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit status 2 for bad input or config, 3 for numerical failure.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Train(TrainError::NonFinite { .. }) => 3,
            _ => 2,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

fn input_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

fn io_failure(path: &Path) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |e| input_error(format!("{}: {e}", path.display()))
}

macro_rules! tri {
    ($e:expr) => {
        $e.map_err(|e| Failure::from(Error::from(e)))?
    };
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(path) => tri!(RunConfig::load(path)),
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.resolved();
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, out.unwrap_or_else(|| cfg.paths.corpus_dir.clone())),
        Command::PretrainMt { out, resume, quiet } => {
            let out = out.unwrap_or_else(|| cfg.paths.checkpoint_dir.join("pretrain"));
            train(&cfg, &[Stage::Condec], None, out, resume, quiet)
        }
        Command::Train {
            mode,
            out,
            checkpoint,
            resume,
            quiet,
        } => {
            let (stages, name): (&[Stage], _) = match (mode, &checkpoint) {
                (Mode::Scratch, Some(_)) => return Err(input_error("--checkpoint only applies to --mode pretrained")),
                (Mode::Scratch, None) => (&[Stage::Scratch], "scratch"),
                (Mode::Pretrained, Some(_)) => (&[Stage::Am, Stage::St], "pretrained"),
                (Mode::Pretrained, None) => (&[Stage::Condec, Stage::Am, Stage::St], "pretrained"),
            };
            let out = out.unwrap_or_else(|| cfg.paths.checkpoint_dir.join(name));
            train(&cfg, stages, checkpoint.as_deref(), out, resume, quiet)
        }
        Command::Decode { checkpoint, input, out } => {
            let input = input.unwrap_or_else(|| cfg.paths.corpus_dir.join(TEST_MANIFEST));
            decode(&cfg, &checkpoint, &input, out.as_deref())
        }
        Command::Evaluate { hyps, refs, out } => evaluate(&hyps, &refs, out.as_deref()),
    }
}

fn write_jsonl<T: serde::Serialize>(path: Option<&Path>, rows: &[T]) -> Result<(), Failure> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("plain data"));
        text.push('\n');
    }
    match path {
        Some(p) => fs::write(p, text).map_err(io_failure(p)),
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            w.write_all(text.as_bytes())
                .and_then(|_| w.flush())
                .map_err(io_failure(Path::new("<stdout>")))
        }
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    let text = fs::read_to_string(path).map_err(io_failure(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| input_error(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn gen_data(cfg: &RunConfig, out: PathBuf) -> Result<(), Failure> {
    let corpus = tri!(synth_generate(&cfg.data));
    fs::create_dir_all(&out).map_err(io_failure(&out))?;
    let vocab = tri!(build_vocab(&[&corpus.train, &corpus.dev, &corpus.test], &corpus.text));
    for (name, split) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        tri!(save_manifest(split, &out.join(format!("{name}.manifest"))));
        let refs: Vec<Reference> = split.iter().map(Reference::from).collect();
        write_jsonl(Some(&out.join(format!("{name}.ref.jsonl"))), &refs)?;
    }
    tri!(save_text_pairs(&corpus.text, &out.join(TEXT_PAIRS)));
    tri!(vocab.save(&out.join(VOCAB)));
    tri!(cfg.save(&out.join("config.txt")));
    for c in vocab.collisions() {
        eprintln!("note: token `{c}` appears in more than one partition");
    }
    eprintln!(
        "wrote {} train / {} dev / {} test samples and {} text pairs to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.text.len(),
        out.display()
    );
    Ok(())
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary, Failure> {
    Ok(tri!(Vocabulary::load(&cfg.paths.corpus_dir.join(VOCAB))))
}

fn build_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Model, Failure> {
    let mcfg = cfg.model.clone().for_vocab(vocab, cfg.data.feature_dim);
    Ok(tri!(Model::new(mcfg, cfg.seed)))
}

fn train(
    cfg: &RunConfig,
    stages: &[Stage],
    init: Option<&Path>,
    out: PathBuf,
    resume: bool,
    quiet: bool,
) -> Result<(), Failure> {
    let dir = &cfg.paths.corpus_dir;
    let vocab = load_vocab(cfg)?;
    let mut model = build_model(cfg, &vocab)?;
    if let Some(path) = init {
        tri!(model.params_mut().load_into(path));
    }
    let speech = stages.iter().any(|&s| s != Stage::Condec);
    let train = if speech {
        tri!(encode_corpus(&tri!(load_manifest(&dir.join(TRAIN_MANIFEST))), &vocab))
    } else {
        Vec::new()
    };
    let dev = tri!(encode_corpus(&tri!(load_manifest(&dir.join(DEV_MANIFEST))), &vocab));
    let text = if stages.contains(&Stage::Condec) {
        tri!(encode_text(&tri!(load_text_pairs(&dir.join(TEXT_PAIRS))), &vocab))
    } else {
        Vec::new()
    };
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        resume,
        verbose: !quiet,
    };
    let report = tri!(train_stages(&mut model, &train, &dev, &text, stages, &cfg.train, &opts));
    if !quiet {
        eprintln!(
            "{} steps in {:.1}s; skipped {} infeasible samples and {} batches; model in {}",
            report.steps().count(),
            report.wall_clock_secs,
            report.skipped_infeasible,
            report.skipped_batches,
            out.join("final.bin").display()
        );
    }
    Ok(())
}

fn decode(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let vocab = load_vocab(cfg)?;
    let mut model = build_model(cfg, &vocab)?;
    tri!(model.params_mut().load_into(checkpoint));
    let samples = tri!(load_manifest(input));
    let hyps = tri!(decode_corpus(&model, &vocab, &samples));
    write_jsonl(out, &hyps)
}

fn evaluate(hyps: &Path, refs: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let h: Vec<Hypothesis> = read_jsonl(hyps)?;
    let r: Vec<Reference> = read_jsonl(refs)?;
    let report = tri!(score(&h, &r));
    print!("{}", report.to_table());
    if let Some(p) = out {
        fs::write(p, format!("{}\n", report.to_json_line())).map_err(io_failure(p))?;
    }
    Ok(())
}
