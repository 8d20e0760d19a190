//! Manifest files.
//!
//! A speech manifest is UTF-8 text. The first line is a header
//!
//! ```text
//! #costt-manifest<TAB>version=1<TAB>d_feat=16<TAB>sidecar=train.f64
//! ```
//!
//! and every following line is one sample with five tab-separated fields:
//!
//! ```text
//! id  offset+length  phonemes  transcript  translation
//! ```
//!
//! where `offset+length` counts float64 values into the sidecar (little-endian
//! f64, next to the manifest) and the three token fields are space-separated.
//! Text-only corpora use `#costt-text<TAB>version=1` followed by
//! `source<TAB>target` lines.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{CorpusError, Quadruple, TextPair};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_MAGIC: &str = "#costt-manifest";
const TEXT_MAGIC: &str = "#costt-text";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Sidecar file that holds the features of `manifest`.
pub fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("f64")
}

pub fn save_manifest(samples: &[Quadruple], path: &Path) -> Result<(), CorpusError> {
    let d_feat = samples.first().map_or(0, |q| q.features.cols());
    if let Some(q) = samples.iter().find(|q| q.features.cols() != d_feat) {
        return Err(CorpusError::Config(format!(
            "sample {} has {} feature columns, expected {d_feat}",
            q.id,
            q.features.cols()
        )));
    }
    let sidecar = sidecar_path(path);
    let sidecar_name = sidecar
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut text = format!("{MANIFEST_MAGIC}\tversion={MANIFEST_VERSION}\td_feat={d_feat}\tsidecar={sidecar_name}\n");
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for q in samples {
        if q.id.is_empty() || q.id.contains(['\t', '\n']) {
            return Err(CorpusError::Config(format!(
                "sample id `{}` must be non-empty without tabs",
                q.id
            )));
        }
        let n = q.features.len();
        text.push_str(&format!(
            "{}\t{}+{}\t{}\t{}\t{}\n",
            q.id,
            offset,
            n,
            q.phonemes.join(" "),
            q.transcript.join(" "),
            q.translation.join(" ")
        ));
        for v in q.features.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += n;
    }
    fs::write(path, text).map_err(io_err(path))?;
    let mut f = fs::File::create(&sidecar).map_err(io_err(&sidecar))?;
    f.write_all(&blob).map_err(io_err(&sidecar))
}

fn header_field<'a>(path: &Path, header: &'a str, key: &'static str) -> Result<&'a str, CorpusError> {
    header
        .split('\t')
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| CorpusError::Malformed {
            path: path.display().to_string(),
            line: 1,
            field: key,
            msg: "missing from header".into(),
        })
}

pub fn load_manifest(path: &Path) -> Result<Vec<Quadruple>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let malformed = |line: usize, field: &'static str, msg: String| CorpusError::Malformed {
        path: path.display().to_string(),
        line,
        field,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with(MANIFEST_MAGIC) {
        return Err(malformed(1, "header", format!("expected `{MANIFEST_MAGIC}`")));
    }
    let version = header_field(path, header, "version")?;
    if version != MANIFEST_VERSION.to_string() {
        return Err(malformed(1, "version", format!("unsupported version {version}")));
    }
    let d_feat: usize = header_field(path, header, "d_feat")?
        .parse()
        .map_err(|e| malformed(1, "d_feat", format!("{e}")))?;
    let sidecar_name = header_field(path, header, "sidecar")?;
    let sidecar = path.with_file_name(sidecar_name);

    let records: Vec<(usize, &str)> = lines
        .enumerate()
        .map(|(i, l)| (i + 2, l))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let blob = match fs::read(&sidecar) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CorpusError::MissingFeatures {
                path: sidecar.display().to_string(),
            })
        }
        Err(e) => return Err(io_err(&sidecar)(e)),
    };
    let split_tokens =
        |s: &str| -> Vec<String> { s.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect() };

    let mut out = Vec::with_capacity(records.len());
    for (line, record) in records {
        let fields: Vec<&str> = record.split('\t').collect();
        if fields.len() != 5 {
            return Err(malformed(
                line,
                "record",
                format!("expected 5 tab-separated fields, got {}", fields.len()),
            ));
        }
        let id = fields[0].to_string();
        let (off, len) = fields[1].split_once('+').ok_or_else(|| {
            malformed(
                line,
                "feature_ref",
                format!("expected offset+length, got `{}`", fields[1]),
            )
        })?;
        let off: usize = off
            .parse()
            .map_err(|e| malformed(line, "feature_ref", format!("offset: {e}")))?;
        let len: usize = len
            .parse()
            .map_err(|e| malformed(line, "feature_ref", format!("length: {e}")))?;
        if d_feat == 0 || len == 0 || !len.is_multiple_of(d_feat) {
            return Err(malformed(
                line,
                "feature_ref",
                format!("length {len} is not a positive multiple of d_feat {d_feat}"),
            ));
        }
        let (start, end) = (off * 8, (off + len) * 8);
        if end > blob.len() {
            return Err(CorpusError::TruncatedFeatures {
                id,
                path: sidecar.display().to_string(),
            });
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let features = Tensor::matrix(len / d_feat, d_feat, data).expect("checked length");
        let phonemes = split_tokens(fields[2]);
        let transcript = split_tokens(fields[3]);
        let translation = split_tokens(fields[4]);
        for (name, toks) in [
            ("phonemes", &phonemes),
            ("transcript", &transcript),
            ("translation", &translation),
        ] {
            if toks.is_empty() {
                return Err(malformed(line, name, "must not be empty".into()));
            }
        }
        out.push(Quadruple {
            id,
            features,
            phonemes,
            transcript,
            translation,
        });
    }
    Ok(out)
}

pub fn save_text_pairs(pairs: &[TextPair], path: &Path) -> Result<(), CorpusError> {
    let mut text = format!("{TEXT_MAGIC}\tversion={MANIFEST_VERSION}\n");
    for p in pairs {
        text.push_str(&format!("{}\t{}\n", p.source.join(" "), p.target.join(" ")));
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_text_pairs(path: &Path) -> Result<Vec<TextPair>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let malformed = |line: usize, field: &'static str, msg: String| CorpusError::Malformed {
        path: path.display().to_string(),
        line,
        field,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with(TEXT_MAGIC) {
        return Err(malformed(1, "header", format!("expected `{TEXT_MAGIC}`")));
    }
    let mut out = Vec::new();
    for (i, l) in lines.enumerate() {
        if l.is_empty() {
            continue;
        }
        let (s, t) = l
            .split_once('\t')
            .ok_or_else(|| malformed(i + 2, "record", "expected source<TAB>target".into()))?;
        let toks = |x: &str| -> Vec<String> { x.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect() };
        let (source, target) = (toks(s), toks(t));
        if source.is_empty() {
            return Err(malformed(i + 2, "source", "must not be empty".into()));
        }
        if target.is_empty() {
            return Err(malformed(i + 2, "target", "must not be empty".into()));
        }
        out.push(TextPair { source, target });
    }
    Ok(out)
}
