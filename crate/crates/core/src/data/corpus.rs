//! Line-delimited dialogue corpus files and their binary feature sidecars.
//!
//! Corpus file: UTF-8, one JSON object per line. Line 1 is the header
//!
//! ```text
//! {"format":"mtn-tct-corpus","version":1,"features":"train.feat"}
//! ```
//!
//! (`features` is optional and relative to the corpus file). Every further
//! line is one record:
//!
//! ```text
//! {"id":"train-0","history":["w5 w6",...],"question":"w7 w9","caption":"...",
//!  "summary":"...","answer":"...","references":["..."],
//!  "visual":[[0.1,...],...],"audio":[[...],...]}
//! ```
//!
//! `references`, `visual` and `audio` are optional. Inline features take
//! precedence over the sidecar.
//!
//! Sidecar layout, all integers little-endian:
//!
//! ```text
//! magic  b"TCTF"
//! u32    version (1)
//! u32    record count
//! repeated:
//!   u32  id length, id bytes (UTF-8)
//!   u8   modality (0 = visual, 1 = audio)
//!   u32  rows
//!   u32  cols
//!   f32  rows * cols values, row-major
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::DialogueExample;
use crate::tensor::Tensor;

pub const CORPUS_FORMAT: &str = "mtn-tct-corpus";
pub const CORPUS_VERSION: u32 = 1;
pub const FEATURE_MAGIC: &[u8; 4] = b"TCTF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub history: Vec<String>,
    pub question: String,
    pub caption: String,
    pub summary: String,
    pub answer: String,
    /// Extra gold answers for multi-reference evaluation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<Vec<Vec<f32>>>,
}

impl CorpusRecord {
    /// The answer followed by the extra references.
    pub fn all_references(&self) -> Vec<&str> {
        std::iter::once(self.answer.as_str())
            .chain(self.references.iter().map(String::as_str))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    fn code(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Visual),
            1 => Some(Modality::Audio),
            _ => None,
        }
    }
}

/// Dense features keyed by example id and modality.
pub type FeatureMap = BTreeMap<(String, Modality), Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub records: Vec<CorpusRecord>,
    pub features: FeatureMap,
}

impl Corpus {
    /// Features of one example: inline values first, then the sidecar.
    pub fn features_for(&self, record: &CorpusRecord, modality: Modality) -> Result<Option<Tensor>> {
        let inline = match modality {
            Modality::Visual => &record.visual,
            Modality::Audio => &record.audio,
        };
        if let Some(rows) = inline {
            let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            return Tensor::from_rows(&rows).map(Some);
        }
        Ok(self.features.get(&(record.id.clone(), modality)).cloned())
    }

    /// Tokenized examples, in file order.
    pub fn examples(&self, vocab: &Vocabulary) -> Result<Vec<DialogueExample>> {
        self.records
            .iter()
            .map(|r| {
                Ok(DialogueExample {
                    id: r.id.clone(),
                    history: r.history.iter().map(|h| vocab.tokenize(h)).collect(),
                    question: vocab.tokenize(&r.question),
                    visual: self.features_for(r, Modality::Visual)?,
                    audio: self.features_for(r, Modality::Audio)?,
                    caption: vocab.tokenize(&r.caption),
                    summary: vocab.tokenize(&r.summary),
                    answer: vocab.tokenize(&r.answer),
                })
            })
            .collect()
    }
}

fn check_rectangular(index: usize, id: &str, field: &str, rows: &[Vec<f32>]) -> Result<()> {
    let bad = |why: String| Error::Corpus(format!("record {index} (`{id}`), field `{field}`: {why}"));
    let Some(first) = rows.first() else {
        return Err(bad("feature array is empty".into()));
    };
    if first.is_empty() {
        return Err(bad("feature rows are empty".into()));
    }
    if let Some(r) = rows.iter().position(|r| r.len() != first.len()) {
        return Err(bad(format!("row {r} has {} values, row 0 has {}", rows[r].len(), first.len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(bad("non-finite feature value".into()));
    }
    Ok(())
}

/// Reads and validates a corpus file and its sidecar. Any malformed record
/// fails the whole load.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Corpus(format!("{}: empty corpus file", path.display())))?;
    let header: CorpusHeader = serde_json::from_str(first)
        .map_err(|e| Error::Corpus(format!("{}: line 1: bad header: {e}", path.display())))?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(Error::Corpus(format!(
            "{}: unsupported corpus format `{}` version {}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (index, (line_no, line)) in lines.enumerate() {
        let record: CorpusRecord = serde_json::from_str(line).map_err(|e| {
            Error::Corpus(format!("{}: line {}: record {index}: {e}", path.display(), line_no + 1))
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::Corpus(format!(
                "{}: line {}: record {index}: duplicate id `{}`",
                path.display(),
                line_no + 1,
                record.id
            )));
        }
        for (field, rows) in [("visual", &record.visual), ("audio", &record.audio)] {
            if let Some(rows) = rows {
                check_rectangular(index, &record.id, field, rows)?;
            }
        }
        records.push(record);
    }
    let features = match &header.features {
        Some(name) => {
            let sidecar = path.parent().unwrap_or(Path::new(".")).join(name);
            let features = read_features(&sidecar)?;
            for (id, _) in features.keys() {
                if !seen.contains(id) {
                    return Err(Error::Corpus(format!(
                        "{}: features for unknown example `{id}`",
                        sidecar.display()
                    )));
                }
            }
            features
        }
        None => FeatureMap::new(),
    };
    Ok(Corpus {
        header,
        records,
        features,
    })
}

/// Writes `records` and, when `features` is non-empty, a sidecar named
/// `<corpus file name>.feat` next to it.
pub fn write_corpus(path: &Path, records: &[CorpusRecord], features: &FeatureMap) -> Result<()> {
    let sidecar_name = (!features.is_empty()).then(|| {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".feat");
        name.to_string_lossy().into_owned()
    });
    let header = CorpusHeader {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        features: sidecar_name.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    if let Some(name) = sidecar_name {
        let sidecar: PathBuf = path.parent().unwrap_or(Path::new(".")).join(name);
        write_features(&sidecar, features)?;
    }
    Ok(())
}

pub fn features_to_bytes(features: &FeatureMap) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(features.len() as u32).to_le_bytes());
    for ((id, modality), t) in features {
        if t.rank() != 2 {
            return Err(Error::Contract(format!("features of `{id}` must be [rows, cols]")));
        }
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.push(modality.code());
        out.extend_from_slice(&(t.shape()[0] as u32).to_le_bytes());
        out.extend_from_slice(&(t.shape()[1] as u32).to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Corpus(format!("feature file truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != FEATURE_MAGIC {
        return Err(Error::Corpus("feature file has bad magic".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != FEATURE_VERSION {
        return Err(Error::Corpus(format!("unsupported feature file version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut map = FeatureMap::new();
    for index in 0..count {
        let len = u32_at(take(4)?) as usize;
        let id = std::str::from_utf8(take(len)?)
            .map_err(|_| Error::Corpus(format!("feature record {index}: id is not UTF-8")))?
            .to_string();
        let modality = Modality::from_code(take(1)?[0])
            .ok_or_else(|| Error::Corpus(format!("feature record {index} (`{id}`): unknown modality")))?;
        let rows = u32_at(take(4)?) as usize;
        let cols = u32_at(take(4)?) as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::Corpus(format!("feature record {index} (`{id}`): empty array")));
        }
        let data: Vec<f64> = take(rows * cols * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Corpus(format!("feature record {index} (`{id}`): non-finite value")));
        }
        if map.insert((id.clone(), modality), Tensor::new(&[rows, cols], data)?).is_some() {
            return Err(Error::Corpus(format!("feature record {index}: duplicate `{id}` {modality:?}")));
        }
    }
    if pos != bytes.len() {
        return Err(Error::Corpus("trailing bytes after last feature record".into()));
    }
    Ok(map)
}

pub fn write_features(path: &Path, features: &FeatureMap) -> Result<()> {
    fs::write(path, features_to_bytes(features)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    features_from_bytes(&bytes).map_err(|e| match e {
        Error::Corpus(msg) => Error::Corpus(format!("{}: {msg}", path.display())),
        other => other,
    })
}
