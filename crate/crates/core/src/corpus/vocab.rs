use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use super::{CorpusError, Quadruple, TextPair};

pub const ASR: &str = "<asr>";
pub const ST: &str = "<st>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const BLANK_TOKEN: &str = "<blank>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Special,
    Phoneme,
    Source,
    Target,
    Blank,
}

impl Partition {
    fn as_str(self) -> &'static str {
        match self {
            Partition::Special => "special",
            Partition::Phoneme => "phoneme",
            Partition::Source => "source",
            Partition::Target => "target",
            Partition::Blank => "blank",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "special" => Partition::Special,
            "phoneme" => Partition::Phoneme,
            "source" => Partition::Source,
            "target" => Partition::Target,
            "blank" => Partition::Blank,
            _ => return None,
        })
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bijective token ↔ id map over `V′ = specials ∪ phonemes ∪ source ∪ target ∪ {blank}`.
///
/// Tokens are keyed by partition, so the same surface form may appear in
/// more than one partition with distinct ids; such forms are listed by
/// [`Vocabulary::collisions`]. The blank is always the last id and `V` is
/// every id before it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<(Partition, String)>,
    index: HashMap<(Partition, String), usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<(Partition, String)>) -> Result<Self, String> {
        let specials = [ASR, ST, EOS, PAD];
        for (i, s) in specials.iter().enumerate() {
            if tokens.get(i) != Some(&(Partition::Special, (*s).to_string())) {
                return Err(format!("id {i} must be special token {s}"));
            }
        }
        match tokens.last() {
            Some((Partition::Blank, _)) => {}
            _ => return Err("last entry must be the blank".into()),
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.0 == Partition::Blank && i + 1 != tokens.len() {
                return Err(format!("blank at id {i} is not last"));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate {} token `{}`", t.0, t.1));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn asr(&self) -> usize {
        0
    }

    pub fn st(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn pad(&self) -> usize {
        3
    }

    pub fn blank(&self) -> usize {
        self.tokens.len() - 1
    }

    /// `|V|`, the decoder's output size.
    pub fn output_size(&self) -> usize {
        self.tokens.len() - 1
    }

    /// `|V′| = |V| + 1`, the CTC head's output size.
    pub fn ctc_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, partition: Partition, token: &str) -> Option<usize> {
        self.index.get(&(partition, token.to_string())).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id].1
    }

    pub fn partition(&self, id: usize) -> Partition {
        self.tokens[id].0
    }

    pub fn ids_in(&self, partition: Partition) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.0 == partition)
            .map(|(i, _)| i)
    }

    pub fn encode(&self, partition: Partition, tokens: &[String]) -> Result<Vec<usize>, CorpusError> {
        tokens
            .iter()
            .map(|t| {
                self.id(partition, t).ok_or_else(|| CorpusError::UnknownToken {
                    partition,
                    token: t.clone(),
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Surface forms present in more than one partition.
    pub fn collisions(&self) -> Vec<String> {
        let mut seen: HashMap<&str, Partition> = HashMap::new();
        let mut out = BTreeSet::new();
        for (p, t) in &self.tokens {
            if let Some(prev) = seen.insert(t, *p) {
                if prev != *p {
                    out.insert(t.clone());
                }
            }
        }
        out.into_iter().collect()
    }

    /// One line per id: `partition<TAB>token`.
    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|(p, t)| format!("{p}\t{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let tokens = text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                let (p, t) = line
                    .split_once('\t')
                    .ok_or_else(|| format!("line {}: expected `partition<TAB>token`", i + 1))?;
                let p = Partition::parse(p).ok_or_else(|| format!("line {}: unknown partition `{p}`", i + 1))?;
                Ok((p, t.to_string()))
            })
            .collect::<Result<Vec<_>, String>>()?;
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_text()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text).map_err(|msg| CorpusError::Malformed {
            path: path.display().to_string(),
            line: 0,
            field: "vocabulary",
            msg,
        })
    }
}

/// Deterministic vocabulary: specials, then phonemes, source tokens and
/// target tokens (each sorted), then the blank.
pub fn build_vocab(corpora: &[&[Quadruple]], text: &[TextPair]) -> Result<Vocabulary, CorpusError> {
    if corpora.iter().all(|c| c.is_empty()) && text.is_empty() {
        return Err(CorpusError::Config(
            "cannot build a vocabulary from empty corpora".into(),
        ));
    }
    let mut phonemes = BTreeSet::new();
    let mut source = BTreeSet::new();
    let mut target = BTreeSet::new();
    for q in corpora.iter().flat_map(|c| c.iter()) {
        phonemes.extend(q.phonemes.iter().cloned());
        source.extend(q.transcript.iter().cloned());
        target.extend(q.translation.iter().cloned());
    }
    for p in text {
        source.extend(p.source.iter().cloned());
        target.extend(p.target.iter().cloned());
    }
    let mut tokens: Vec<(Partition, String)> = [ASR, ST, EOS, PAD]
        .iter()
        .map(|s| (Partition::Special, (*s).to_string()))
        .collect();
    tokens.extend(phonemes.into_iter().map(|t| (Partition::Phoneme, t)));
    tokens.extend(source.into_iter().map(|t| (Partition::Source, t)));
    tokens.extend(target.into_iter().map(|t| (Partition::Target, t)));
    tokens.push((Partition::Blank, BLANK_TOKEN.to_string()));
    Vocabulary::from_tokens(tokens).map_err(CorpusError::Config)
}
