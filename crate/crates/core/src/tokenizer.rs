//! IUPAC residue tokenization, padding and masking, plus JSONL / FASTA
//! dataset ingestion.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HomaError, Result};

/// Label value excluded from token-level losses and metrics.
pub const IGNORE_INDEX: i64 = -100;

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const UNK_ID: usize = 4;
pub const VOCAB_SIZE: usize = 30;

const CONTROL: [&str; 5] = ["<pad>", "<mask>", "<cls>", "<sep>", "<unk>"];

/// 20 standard amino acids, U and O, the ambiguity codes B and Z, and X,
/// in alphabetical order.
pub const RESIDUES: &str = "ABCDEFGHIKLMNOPQRSTUVWXYZ";

/// Fixed 30-token vocabulary: five control symbols at ids 0..=4 followed by
/// the 25 residue characters.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub fn build_vocab() -> Vocab {
    let tokens: Vec<String> = CONTROL
        .iter()
        .map(|s| s.to_string())
        .chain(RESIDUES.chars().map(|c| c.to_string()))
        .collect();
    let index = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Vocab { tokens, index }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn residue_count(&self) -> usize {
        self.tokens.len() - CONTROL.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of a residue character; lowercase is accepted, anything else is
    /// `<unk>`.
    pub fn residue_id(&self, c: char) -> usize {
        residue_id(c)
    }
}

fn residue_id(c: char) -> usize {
    let up = c.to_ascii_uppercase();
    RESIDUES
        .find(up)
        .filter(|_| up.is_ascii_uppercase())
        .map(|p| p + CONTROL.len())
        .unwrap_or(UNK_ID)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeOptions {
    /// Wrap the sequence in `<cls>` ... `<sep>` (within `max_len`).
    pub add_special: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSeq {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    /// Number of real (non-pad) positions after truncation.
    pub original_length: usize,
}

impl EncodedSeq {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Builds an unpadded, fully visible sequence from raw ids.
    pub fn from_ids(ids: Vec<usize>) -> Self {
        let n = ids.len();
        EncodedSeq {
            ids,
            attention_mask: vec![true; n],
            original_length: n,
        }
    }

    /// Debug export with columns `pos,id,mask`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pos,id,mask\n");
        for (p, (id, m)) in self.ids.iter().zip(&self.attention_mask).enumerate() {
            out.push_str(&format!("{p},{id},{}\n", u8::from(*m)));
        }
        out
    }
}

pub fn encode(seq: &str, max_len: usize) -> Result<EncodedSeq> {
    encode_with(seq, max_len, EncodeOptions::default())
}

pub fn encode_with(seq: &str, max_len: usize, opts: EncodeOptions) -> Result<EncodedSeq> {
    if max_len == 0 {
        return Err(HomaError::invalid("max_len must be at least 1"));
    }
    if seq.is_empty() {
        return Err(HomaError::invalid("cannot encode an empty sequence"));
    }
    let mut ids: Vec<usize> = Vec::with_capacity(max_len);
    if opts.add_special {
        ids.push(CLS_ID);
    }
    ids.extend(seq.chars().map(residue_id));
    if opts.add_special {
        ids.push(SEP_ID);
    }
    if ids.len() > max_len {
        ids.truncate(max_len);
        if opts.add_special && max_len >= 2 {
            ids[max_len - 1] = SEP_ID;
        }
    }
    let original_length = ids.len();
    ids.resize(max_len, PAD_ID);
    let attention_mask = (0..max_len).map(|p| p < original_length).collect();
    Ok(EncodedSeq {
        ids,
        attention_mask,
        original_length,
    })
}

/// Inverse of [`encode`] on residue tokens. Pads are dropped; other control
/// symbols render as their bracketed names.
pub fn decode(ids: &[usize]) -> Result<String> {
    let mut out = String::with_capacity(ids.len());
    for &id in ids {
        match id {
            PAD_ID => {}
            id if id < CONTROL.len() => out.push_str(CONTROL[id]),
            id if id < CONTROL.len() + RESIDUES.len() => {
                out.push(RESIDUES.as_bytes()[id - CONTROL.len()] as char)
            }
            id => {
                return Err(HomaError::invalid(format!(
                    "token id {id} outside the 30-token vocabulary"
                )))
            }
        }
    }
    Ok(out)
}

/// One dataset record as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub seq: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Per-position class labels, `IGNORE_INDEX` on pads.
    Tokens(Vec<i64>),
    /// Sequence-level value (a regression target or a class index).
    Scalar(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub record: Record,
    pub encoded: EncodedSeq,
    pub target: Target,
}

impl LabeledExample {
    pub fn from_record(record: Record, max_len: usize) -> Result<Self> {
        let encoded = encode(&record.seq, max_len)?;
        let target = match (&record.labels, record.target) {
            (Some(labels), None) => {
                let n = record.seq.chars().count();
                if labels.len() != n {
                    return Err(HomaError::invalid(format!(
                        "label list has {} entries for a sequence of length {n}",
                        labels.len()
                    )));
                }
                if let Some(bad) = labels.iter().find(|&&l| l > 2) {
                    return Err(HomaError::invalid(format!("label {bad} not in {{0,1,2}}")));
                }
                let mut t: Vec<i64> = labels
                    .iter()
                    .take(encoded.original_length)
                    .map(|&l| i64::from(l))
                    .collect();
                t.resize(max_len, IGNORE_INDEX);
                Target::Tokens(t)
            }
            (None, Some(v)) if v.is_finite() => Target::Scalar(v),
            (None, Some(_)) => return Err(HomaError::invalid("target is not finite")),
            _ => {
                return Err(HomaError::invalid(
                    "record needs exactly one of `labels` or `target`",
                ))
            }
        };
        Ok(LabeledExample {
            record,
            encoded,
            target,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
    /// `>name target=<number>` or `>name labels=<digits>` headers followed
    /// by sequence lines.
    FastaWithTargets,
}

impl std::str::FromStr for DatasetFormat {
    type Err = HomaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "fasta" | "fasta-with-targets" => Ok(DatasetFormat::FastaWithTargets),
            other => Err(HomaError::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("fa" | "fasta" | "faa") => DatasetFormat::FastaWithTargets,
            _ => DatasetFormat::Jsonl,
        }
    }
}

pub fn load_dataset(
    path: impl AsRef<Path>,
    format: DatasetFormat,
    max_len: usize,
) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| HomaError::io(path, e))?;
    let records = match format {
        DatasetFormat::Jsonl => parse_jsonl(&text, path)?,
        DatasetFormat::FastaWithTargets => parse_fasta(&text, path)?,
    };
    records
        .into_iter()
        .map(|(line, r)| {
            LabeledExample::from_record(r, max_len).map_err(|e| HomaError::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<(usize, Record)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| HomaError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn parse_fasta(text: &str, path: &Path) -> Result<Vec<(usize, Record)>> {
    let err = |line: usize, msg: String| HomaError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out: Vec<(usize, Record)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let mut rec = Record {
                seq: String::new(),
                labels: None,
                target: None,
            };
            for field in header.split_whitespace().skip(1) {
                if let Some(v) = field.strip_prefix("target=") {
                    rec.target = Some(
                        v.parse()
                            .map_err(|_| err(i + 1, format!("bad target `{v}`")))?,
                    );
                } else if let Some(v) = field.strip_prefix("labels=") {
                    let labels = v
                        .chars()
                        .map(|c| c.to_digit(10).map(|d| d as u8))
                        .collect::<Option<Vec<u8>>>()
                        .ok_or_else(|| err(i + 1, format!("bad labels `{v}`")))?;
                    rec.labels = Some(labels);
                }
            }
            out.push((i + 1, rec));
        } else {
            let (_, rec) = out
                .last_mut()
                .ok_or_else(|| err(i + 1, "sequence line before first header".into()))?;
            rec.seq.push_str(line);
        }
    }
    Ok(out)
}

/// Serializes records in canonical JSONL form (one object per line).
pub fn to_jsonl<'a>(records: impl IntoIterator<Item = &'a Record>) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn vocab_layout() {
        let v = build_vocab();
        assert_eq!(v.len(), 30);
        assert_eq!(v.residue_count(), 25);
        assert_eq!(v.id("<pad>"), Some(0));
        assert_eq!(v.id("<unk>"), Some(4));
        assert_eq!(v.id("A"), Some(5));
        assert_eq!(v.id("Z"), Some(29));
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
        }
    }

    #[test]
    fn encode_pads_and_masks() {
        let v = build_vocab();
        let e = encode("ACD", 5).unwrap();
        let a = v.id("A").unwrap();
        let c = v.id("C").unwrap();
        let d = v.id("D").unwrap();
        assert_eq!(e.ids, vec![a, c, d, 0, 0]);
        assert_eq!(e.attention_mask, vec![true, true, true, false, false]);
        assert_eq!(e.original_length, 3);
    }

    #[test]
    fn encode_truncates() {
        let seq = "A".repeat(600);
        let e = encode(&seq, 512).unwrap();
        assert_eq!(e.original_length, 512);
        assert!(e.attention_mask.iter().all(|&m| m));
    }

    #[test]
    fn encode_errors_and_unknowns() {
        assert!(encode("", 4).is_err());
        assert!(encode("A", 0).is_err());
        let e = encode("A*c", 3).unwrap();
        assert_eq!(e.ids, vec![5, UNK_ID, 7]);
    }

    #[test]
    fn special_tokens_flag() {
        let e = encode_with("ACDE", 4, EncodeOptions { add_special: true }).unwrap();
        assert_eq!(e.ids, vec![CLS_ID, 5, 7, SEP_ID]);
    }

    #[test]
    fn decode_cases() {
        assert_eq!(decode(&[5, 7, 8]).unwrap(), "ACD");
        assert_eq!(decode(&[0, 0]).unwrap(), "");
        assert_eq!(decode(&encode("MKWX", 8).unwrap().ids).unwrap(), "MKWX");
        assert!(decode(&[30]).is_err());
    }

    #[test]
    fn csv_export() {
        let e = encode("AC", 3).unwrap();
        assert_eq!(e.to_csv(), "pos,id,mask\n0,5,1\n1,7,1\n2,0,0\n");
    }

    fn write_tmp(contents: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn jsonl_loading() {
        let f = write_tmp(
            "{\"seq\":\"ACD\",\"target\":1.5}\n{\"seq\":\"AC\",\"labels\":[0,2]}\n{\"seq\":\"M\",\"target\":-2}\n",
            ".jsonl",
        );
        let ex = load_dataset(f.path(), DatasetFormat::Jsonl, 4).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0].target, Target::Scalar(1.5));
        assert_eq!(ex[1].target, Target::Tokens(vec![0, 2, -100, -100]));
    }

    #[test]
    fn short_label_list_reports_line() {
        let f = write_tmp(
            "{\"seq\":\"ACD\",\"target\":1.0}\n{\"seq\":\"ACD\",\"labels\":[0,1]}\n",
            ".jsonl",
        );
        match load_dataset(f.path(), DatasetFormat::Jsonl, 8) {
            Err(HomaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_reserialization_is_byte_stable() {
        let text = "{\"seq\":\"ACD\",\"target\":1.5}\n{\"seq\":\"AC\",\"labels\":[0,2]}\n";
        let f = write_tmp(text, ".jsonl");
        let ex = load_dataset(f.path(), DatasetFormat::Jsonl, 2).unwrap();
        assert_eq!(to_jsonl(ex.iter().map(|e| &e.record)).unwrap(), text);
    }

    #[test]
    fn fasta_loading() {
        let f = write_tmp(
            ">a target=0.25\nACD\nEF\n>b labels=012\nMKW\n",
            ".fasta",
        );
        let ex = load_dataset(f.path(), DatasetFormat::FastaWithTargets, 6).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].record.seq, "ACDEF");
        assert_eq!(ex[0].target, Target::Scalar(0.25));
        assert_eq!(ex[1].target, Target::Tokens(vec![0, 1, 2, -100, -100, -100]));
    }
}
