//! Synthetic speech-translation data.
//!
//! Each phoneme owns a fixed template vector. An utterance is a random word
//! sequence; words expand to phonemes (with an optional separator phoneme
//! between words) and each phoneme is rendered as a random number of frames
//! of its template plus Gaussian noise. The translation is the dictionary
//! image of the transcript with every block of `swap_window` tokens
//! reversed (adjacent-pair swaps for a window of 2).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CorpusError, Quadruple, TextPair};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

pub const WORD_SEPARATOR: &str = "<space>";

const PHONE_NAMES: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY", "JH", "K",
    "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
];
const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ne", "su", "ta", "ri", "po", "de", "gu", "ba", "fe"];
const MAX_LEXICON: usize = 12 * 12 * 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DictionarySpec {
    /// Each source word translates to the same surface form.
    Identity,
    /// A seeded bijection between source surface forms.
    Shuffled,
    /// `source<whitespace>target` lines covering the whole lexicon.
    File(PathBuf),
}

impl TryFrom<String> for DictionarySpec {
    type Error = CorpusError;

    fn try_from(s: String) -> Result<Self, CorpusError> {
        Self::parse(&s)
    }
}

impl From<DictionarySpec> for String {
    fn from(d: DictionarySpec) -> String {
        d.to_spec_string()
    }
}

impl DictionarySpec {
    pub fn parse(s: &str) -> Result<Self, CorpusError> {
        match s {
            "identity" => Ok(Self::Identity),
            "shuffled" => Ok(Self::Shuffled),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Self::File(PathBuf::from(p))),
                _ => Err(CorpusError::Config(format!(
                    "dictionary must be identity, shuffled or file:PATH, got `{s}`"
                ))),
            },
        }
    }

    pub fn to_spec_string(&self) -> String {
        match self {
            Self::Identity => "identity".into(),
            Self::Shuffled => "shuffled".into(),
            Self::File(p) => format!("file:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub phonemes: usize,
    pub lexicon_size: usize,
    pub phonemes_per_word: (usize, usize),
    pub words_per_utterance: (usize, usize),
    pub frames_per_phoneme: (usize, usize),
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub word_separator: bool,
    pub dictionary: DictionarySpec,
    /// Reverse each block of this many target tokens; 0 or 1 disables.
    pub swap_window: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub text_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            phonemes: 20,
            lexicon_size: 60,
            phonemes_per_word: (2, 4),
            words_per_utterance: (2, 4),
            frames_per_phoneme: (3, 5),
            feature_dim: 16,
            noise_sigma: 0.3,
            word_separator: true,
            dictionary: DictionarySpec::Identity,
            swap_window: 2,
            train_size: 500,
            dev_size: 50,
            test_size: 50,
            text_size: 2000,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let range = |name: &str, (lo, hi): (usize, usize)| {
            if lo == 0 || lo > hi {
                Err(CorpusError::Config(format!(
                    "{name} range {lo}..={hi} is empty or starts at 0"
                )))
            } else {
                Ok(())
            }
        };
        range("phonemes_per_word", self.phonemes_per_word)?;
        range("words_per_utterance", self.words_per_utterance)?;
        range("frames_per_phoneme", self.frames_per_phoneme)?;
        if self.phonemes < 2 {
            return Err(CorpusError::Config("need at least 2 phonemes".into()));
        }
        if self.lexicon_size == 0 || self.lexicon_size > MAX_LEXICON {
            return Err(CorpusError::Config(format!(
                "lexicon_size must be in 1..={MAX_LEXICON}"
            )));
        }
        if self.feature_dim == 0 {
            return Err(CorpusError::Config("feature_dim must be positive".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(CorpusError::Config(format!(
                "noise_sigma must be ≥ 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<Quadruple>,
    pub dev: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
    pub text: Vec<TextPair>,
}

/// Lexicon, pronunciations, templates and dictionary for one config.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    cfg: SynthConfig,
    phoneme_names: Vec<String>,
    words: Vec<String>,
    pronunciations: Vec<Vec<usize>>,
    /// One template per phoneme, plus the separator when enabled (last).
    templates: Vec<Vec<f64>>,
    dictionary: Vec<String>,
}

fn word_name(i: usize) -> String {
    let mut s = String::new();
    s.push_str(SYLLABLES[i % 12]);
    s.push_str(SYLLABLES[(i / 12) % 12]);
    if i >= 144 {
        s.push_str(SYLLABLES[(i / 144) % 12]);
    }
    s
}

fn phoneme_name(i: usize) -> String {
    PHONE_NAMES
        .get(i)
        .map_or_else(|| format!("PH{i}"), |s| (*s).to_string())
}

impl Synthesizer {
    pub fn new(cfg: &SynthConfig) -> Result<Self, CorpusError> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, rng::DATA_STREAM, 0);
        let mut phoneme_names: Vec<String> = (0..cfg.phonemes).map(phoneme_name).collect();
        if cfg.word_separator {
            phoneme_names.push(WORD_SEPARATOR.to_string());
        }
        let templates = phoneme_names
            .iter()
            .map(|_| (0..cfg.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let words: Vec<String> = (0..cfg.lexicon_size).map(word_name).collect();

        // distinct pronunciations without adjacent repeats
        let mut seen = HashSet::new();
        let mut pronunciations = Vec::with_capacity(words.len());
        let mut attempts = 0;
        while pronunciations.len() < words.len() {
            attempts += 1;
            if attempts > 1000 * words.len() {
                return Err(CorpusError::Config(
                    "not enough distinct pronunciations for the lexicon".into(),
                ));
            }
            let len = rng.random_range(cfg.phonemes_per_word.0..=cfg.phonemes_per_word.1);
            let mut p: Vec<usize> = Vec::with_capacity(len);
            while p.len() < len {
                let c = rng.random_range(0..cfg.phonemes);
                if p.last() != Some(&c) {
                    p.push(c);
                }
            }
            if seen.insert(p.clone()) {
                pronunciations.push(p);
            }
        }

        let dictionary = match &cfg.dictionary {
            DictionarySpec::Identity => words.clone(),
            DictionarySpec::Shuffled => {
                let mut d = words.clone();
                d.shuffle(&mut rng);
                d
            }
            DictionarySpec::File(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CorpusError::Config(format!("dictionary {}: {e}", path.display())))?;
                let mut map = BTreeMap::new();
                for (n, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let mut it = line.split_whitespace();
                    match (it.next(), it.next(), it.next()) {
                        (Some(s), Some(t), None) => {
                            map.insert(s.to_string(), t.to_string());
                        }
                        _ => {
                            return Err(CorpusError::Config(format!(
                                "dictionary {} line {}: expected `source target`",
                                path.display(),
                                n + 1
                            )))
                        }
                    }
                }
                words
                    .iter()
                    .map(|w| {
                        map.get(w).cloned().ok_or_else(|| {
                            CorpusError::Config(format!("dictionary {} has no entry for `{w}`", path.display()))
                        })
                    })
                    .collect::<Result<_, _>>()?
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            phoneme_names,
            words,
            pronunciations,
            templates,
            dictionary,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn pronunciation(&self, word: usize) -> &[usize] {
        &self.pronunciations[word]
    }

    /// Template vector per phoneme name.
    pub fn templates(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.phoneme_names
            .iter()
            .map(String::as_str)
            .zip(self.templates.iter().map(Vec::as_slice))
    }

    fn phoneme_indices(&self, words: &[usize]) -> Vec<usize> {
        let sep = self.cfg.phonemes;
        let mut out = Vec::new();
        for (i, &w) in words.iter().enumerate() {
            if i > 0 && self.cfg.word_separator {
                out.push(sep);
            }
            out.extend_from_slice(&self.pronunciations[w]);
        }
        out
    }

    pub fn translate(&self, words: &[usize]) -> Vec<String> {
        let mut y: Vec<String> = words.iter().map(|&w| self.dictionary[w].clone()).collect();
        if self.cfg.swap_window >= 2 {
            for block in y.chunks_mut(self.cfg.swap_window) {
                block.reverse();
            }
        }
        y
    }

    /// Renders features for a phoneme-index sequence.
    pub fn render(&self, phonemes: &[usize], rng: &mut StreamRng) -> Tensor {
        let (lo, hi) = self.cfg.frames_per_phoneme;
        let d = self.cfg.feature_dim;
        let noise = Normal::new(0.0, self.cfg.noise_sigma).expect("validated sigma");
        let mut data = Vec::new();
        for &p in phonemes {
            let k = rng.random_range(lo..=hi);
            for _ in 0..k {
                data.extend(self.templates[p].iter().map(|&v| {
                    if self.cfg.noise_sigma > 0.0 {
                        v + noise.sample(rng)
                    } else {
                        v
                    }
                }));
            }
        }
        let rows = data.len() / d;
        Tensor::matrix(rows, d, data).expect("at least one phoneme")
    }

    pub fn utterance(&self, id: String, words: &[usize], rng: &mut StreamRng) -> Quadruple {
        let ph = self.phoneme_indices(words);
        Quadruple {
            id,
            features: self.render(&ph, rng),
            phonemes: ph.iter().map(|&p| self.phoneme_names[p].clone()).collect(),
            transcript: words.iter().map(|&w| self.words[w].clone()).collect(),
            translation: self.translate(words),
        }
    }

    fn sample_words(&self, rng: &mut StreamRng) -> Vec<usize> {
        let (lo, hi) = self.cfg.words_per_utterance;
        let n = rng.random_range(lo..=hi);
        (0..n).map(|_| rng.random_range(0..self.words.len())).collect()
    }
}

/// Generates disjoint train / dev / test speech splits and the text-only corpus.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus, CorpusError> {
    let synth = Synthesizer::new(cfg)?;
    let mut text_rng = rng::stream(cfg.seed, rng::DATA_STREAM, 1);
    let total = cfg.train_size + cfg.dev_size + cfg.test_size + cfg.text_size;
    let mut seen = HashSet::new();
    let mut sentences = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while sentences.len() < total {
        attempts += 1;
        if attempts > 100 * total + 1000 {
            return Err(CorpusError::Exhausted {
                got: sentences.len(),
                wanted: total,
            });
        }
        let w = synth.sample_words(&mut text_rng);
        if seen.insert(w.clone()) {
            sentences.push(w);
        }
    }
    let mut it = sentences.into_iter();
    let mut speech = |split: &str, n: usize, stream: u64| -> Vec<Quadruple> {
        let mut frng = rng::stream(cfg.seed, rng::DATA_STREAM, stream);
        (&mut it)
            .take(n)
            .enumerate()
            .map(|(i, w)| synth.utterance(format!("{split}-{i:05}"), &w, &mut frng))
            .collect()
    };
    let train = speech("train", cfg.train_size, 2);
    let dev = speech("dev", cfg.dev_size, 3);
    let test = speech("test", cfg.test_size, 4);
    let text = it
        .map(|w| TextPair {
            source: w.iter().map(|&i| synth.words[i].clone()).collect(),
            target: synth.translate(&w),
        })
        .collect();
    Ok(SynthCorpus { train, dev, test, text })
}
