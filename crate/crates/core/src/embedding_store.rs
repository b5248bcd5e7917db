// SPDX-License-Identifier: MIT OR Apache-2.0

//! Embedding corpora, label sets and the EMBC binary container.
//!
//! EMBC layout (all integers little-endian):
//!
//! | offset | size  | field                                   |
//! |--------|-------|-----------------------------------------|
//! | 0      | 4     | magic `EMBC`                            |
//! | 4      | 4     | version, u32 = 1                        |
//! | 8      | 8     | row count N, u64                        |
//! | 16     | 4     | dimension M, u32                        |
//! | 20     | 4     | CRC-32 of bytes 0..20                   |
//! | 24     | 4·N·M | f32 payload, row-major                  |
//!
//! An optional id block may follow the payload: one flag byte (bit 0 sample
//! ids, bit 1 speaker ids) and then, for each flagged list, N entries of a u32
//! byte length followed by UTF-8 bytes. A file that ends right after the
//! payload carries no ids.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBC_MAGIC: &[u8; 4] = b"EMBC";
pub const EMBC_VERSION: u32 = 1;
pub const EMBC_HEADER_LEN: usize = 24;

const FLAG_SAMPLE_IDS: u8 = 0b01;
const FLAG_SPEAKER_IDS: u8 = 0b10;

/// An immutable N×M matrix of embeddings with optional per-row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCorpus {
    dim: usize,
    count: usize,
    data: Vec<f32>,
    sample_ids: Option<Vec<String>>,
    speaker_ids: Option<Vec<String>>,
}

impl EmbeddingCorpus {
    /// Builds a corpus from row-major data, checking every invariant.
    pub fn new(
        dim: usize,
        data: Vec<f32>,
        sample_ids: Option<Vec<String>>,
        speaker_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "data length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        let count = data.len() / dim;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        if let Some(ids) = &sample_ids {
            if ids.len() != count {
                return Err(Error::Validation(format!("{} sample ids for {count} rows", ids.len())));
            }
            let mut seen = HashSet::with_capacity(ids.len());
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Validation(format!("duplicate sample id {id:?}")));
                }
            }
        }
        if let Some(ids) = &speaker_ids {
            if ids.len() != count {
                return Err(Error::Validation(format!("{} speaker ids for {count} rows", ids.len())));
            }
        }
        Ok(Self {
            dim,
            count,
            data,
            sample_ids,
            speaker_ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn sample_ids(&self) -> Option<&[String]> {
        self.sample_ids.as_deref()
    }

    pub fn speaker_ids(&self) -> Option<&[String]> {
        self.speaker_ids.as_deref()
    }

    /// Identifier of row `i`: the stored sample id, or the row number when the
    /// corpus carries no ids.
    pub fn sample_id(&self, i: usize) -> Cow<'_, str> {
        match &self.sample_ids {
            Some(ids) => Cow::Borrowed(ids[i].as_str()),
            None => Cow::Owned(i.to_string()),
        }
    }

    /// Map from sample id to row index.
    pub fn id_index(&self) -> HashMap<String, usize> {
        (0..self.count).map(|i| (self.sample_id(i).into_owned(), i)).collect()
    }

    /// New corpus made of the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.count {
                return Err(Error::Usage(format!("row {i} out of range for {} rows", self.count)));
            }
            data.extend_from_slice(self.row(i));
        }
        let pick = |ids: &Option<Vec<String>>| {
            ids.as_ref()
                .map(|ids| indices.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>())
        };
        Self::new(self.dim, data, pick(&self.sample_ids), pick(&self.speaker_ids))
    }
}

/// Serializes a corpus in the EMBC format.
pub fn write_corpus<W: Write>(corpus: &EmbeddingCorpus, mut sink: W) -> Result<()> {
    let dim =
        u32::try_from(corpus.dim).map_err(|_| Error::Validation(format!("dimension {} exceeds u32", corpus.dim)))?;
    let mut header = Vec::with_capacity(EMBC_HEADER_LEN);
    header.extend_from_slice(EMBC_MAGIC);
    header.extend_from_slice(&EMBC_VERSION.to_le_bytes());
    header.extend_from_slice(&(corpus.count as u64).to_le_bytes());
    header.extend_from_slice(&dim.to_le_bytes());
    let crc = crc32fast::hash(&header);
    header.extend_from_slice(&crc.to_le_bytes());
    sink.write_all(&header)?;

    let mut payload = Vec::with_capacity(corpus.data.len() * 4);
    for v in &corpus.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;

    let mut flags = 0u8;
    if corpus.sample_ids.is_some() {
        flags |= FLAG_SAMPLE_IDS;
    }
    if corpus.speaker_ids.is_some() {
        flags |= FLAG_SPEAKER_IDS;
    }
    if flags != 0 {
        let mut block = vec![flags];
        for ids in [&corpus.sample_ids, &corpus.speaker_ids].into_iter().flatten() {
            for id in ids {
                let len =
                    u32::try_from(id.len()).map_err(|_| Error::Validation("id longer than u32::MAX bytes".into()))?;
                block.extend_from_slice(&len.to_le_bytes());
                block.extend_from_slice(id.as_bytes());
            }
        }
        sink.write_all(&block)?;
    }
    sink.flush()?;
    Ok(())
}

/// Parses an EMBC stream.
pub fn read_corpus<R: Read>(mut source: R) -> Result<EmbeddingCorpus> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_corpus(&bytes)
}

fn decode_corpus(bytes: &[u8]) -> Result<EmbeddingCorpus> {
    if bytes.len() < EMBC_HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated header: {} of {EMBC_HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if &bytes[0..4] != EMBC_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let stored_crc = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
    if crc32fast::hash(&bytes[0..20]) != stored_crc {
        return Err(Error::Format("header checksum mismatch".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBC_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::Format("declared dimension is zero".into()));
    }
    let payload_len = usize::try_from(count)
        .ok()
        .and_then(|n| n.checked_mul(dim))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("declared shape {count}x{dim} overflows")))?;
    let count = count as usize;
    let body = &bytes[EMBC_HEADER_LEN..];
    if body.len() < payload_len {
        return Err(Error::Format(format!(
            "payload truncated: declared {count}x{dim} needs {payload_len} bytes, found {}",
            body.len()
        )));
    }
    let data: Vec<f32> = body[..payload_len]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut rest = &body[payload_len..];
    let mut sample_ids = None;
    let mut speaker_ids = None;
    if let Some((&flags, tail)) = rest.split_first() {
        if flags == 0 || flags & !(FLAG_SAMPLE_IDS | FLAG_SPEAKER_IDS) != 0 {
            return Err(Error::Format(format!("invalid id block flags {flags:#04x}")));
        }
        rest = tail;
        if flags & FLAG_SAMPLE_IDS != 0 {
            sample_ids = Some(read_id_list(&mut rest, count)?);
        }
        if flags & FLAG_SPEAKER_IDS != 0 {
            speaker_ids = Some(read_id_list(&mut rest, count)?);
        }
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after id block", rest.len())));
        }
    }
    EmbeddingCorpus::new(dim, data, sample_ids, speaker_ids)
}

fn read_id_list(rest: &mut &[u8], count: usize) -> Result<Vec<String>> {
    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        if rest.len() < 4 {
            return Err(Error::Format("id block truncated".into()));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        let tail = &rest[4..];
        if tail.len() < len {
            return Err(Error::Format("id block truncated".into()));
        }
        let id = std::str::from_utf8(&tail[..len]).map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))?;
        ids.push(id.to_owned());
        *rest = &tail[len..];
    }
    Ok(ids)
}

pub fn write_corpus_file(corpus: &EmbeddingCorpus, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf)?;
    crate::fsutil::write_atomic(path, &buf)
}

pub fn read_corpus_file(path: &Path) -> Result<EmbeddingCorpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes)
}

/// Binary labels for one attribute, keyed by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub positive_label: String,
    pub labels: BTreeMap<String, bool>,
    /// Auxiliary grouping (e.g. perceived gender). Never a model input.
    pub strata: BTreeMap<String, String>,
}

impl LabelSet {
    /// Checks the set against a corpus and returns `(row, label)` pairs in row order.
    pub fn resolve(&self, corpus: &EmbeddingCorpus) -> Result<Vec<(usize, bool)>> {
        let index = corpus.id_index();
        let mut out = Vec::with_capacity(self.labels.len());
        for (id, &label) in &self.labels {
            let row = index
                .get(id)
                .ok_or_else(|| Error::Validation(format!("unknown sample id {id}")))?;
            out.push((*row, label));
        }
        out.sort_unstable_by_key(|&(row, _)| row);
        Ok(out)
    }

    /// Per-row label, `None` for rows the set does not mention.
    pub fn row_labels(&self, corpus: &EmbeddingCorpus) -> Result<Vec<Option<bool>>> {
        let mut rows = vec![None; corpus.len()];
        for (row, label) in self.resolve(corpus)? {
            rows[row] = Some(label);
        }
        Ok(rows)
    }

    /// Per-row stratum, `None` where absent.
    pub fn row_strata(&self, corpus: &EmbeddingCorpus) -> Result<Vec<Option<String>>> {
        let index = corpus.id_index();
        let mut rows = vec![None; corpus.len()];
        for (id, stratum) in &self.strata {
            let row = index
                .get(id)
                .ok_or_else(|| Error::Validation(format!("unknown sample id {id}")))?;
            rows[*row] = Some(stratum.clone());
        }
        Ok(rows)
    }

    pub fn positives(&self) -> usize {
        self.labels.values().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    sample_id: String,
    label: String,
    #[serde(default)]
    stratum: Option<String>,
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

/// Reads a `sample_id,label[,stratum]` CSV and joins it against `corpus`.
pub fn read_labels<R: Read>(source: R, corpus: &EmbeddingCorpus, positive_label: &str) -> Result<LabelSet> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("label header: {e}")))?
        .clone();
    if headers.get(0) != Some("sample_id") || headers.get(1) != Some("label") {
        return Err(Error::Format(
            "label CSV header must be sample_id,label[,stratum]".into(),
        ));
    }
    let index = corpus.id_index();
    let mut labels = BTreeMap::new();
    let mut strata = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(format!("label CSV: {e}")))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: LabelRow = record
            .deserialize(Some(&headers))
            .map_err(|e| Error::Validation(format!("line {line}: {e}")))?;
        if !index.contains_key(&row.sample_id) {
            return Err(Error::Validation(format!(
                "line {line}: unknown sample id {}",
                row.sample_id
            )));
        }
        let label = parse_bool(&row.label)
            .ok_or_else(|| Error::Validation(format!("line {line}: unparsable label {:?}", row.label)))?;
        if labels.insert(row.sample_id.clone(), label).is_some() {
            return Err(Error::Validation(format!(
                "line {line}: duplicate sample id {}",
                row.sample_id
            )));
        }
        if let Some(s) = row.stratum.filter(|s| !s.is_empty()) {
            strata.insert(row.sample_id, s);
        }
    }
    let set = LabelSet {
        positive_label: positive_label.to_owned(),
        labels,
        strata,
    };
    if set.positives() == 0 || set.negatives() == 0 {
        return Err(Error::Validation(format!(
            "labels need both classes, found {} positive and {} negative",
            set.positives(),
            set.negatives()
        )));
    }
    Ok(set)
}

pub fn read_labels_file(path: &Path, corpus: &EmbeddingCorpus, positive_label: &str) -> Result<LabelSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_labels(std::io::BufReader::new(file), corpus, positive_label)
}

/// Writes a label set as CSV, rows in corpus order.
pub fn write_labels<W: Write>(labels: &LabelSet, corpus: &EmbeddingCorpus, sink: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    let with_strata = !labels.strata.is_empty();
    let csv_err = |e: csv::Error| Error::Format(format!("label CSV: {e}"));
    if with_strata {
        writer
            .write_record(["sample_id", "label", "stratum"])
            .map_err(csv_err)?;
    } else {
        writer.write_record(["sample_id", "label"]).map_err(csv_err)?;
    }
    for (row, label) in labels.resolve(corpus)? {
        let id = corpus.sample_id(row);
        let flag = if label { "1" } else { "0" };
        if with_strata {
            let stratum = labels.strata.get(id.as_ref()).map(String::as_str).unwrap_or("");
            writer.write_record([id.as_ref(), flag, stratum]).map_err(csv_err)?;
        } else {
            writer.write_record([id.as_ref(), flag]).map_err(csv_err)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Disjoint train/test row indices into one corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl CorpusSplit {
    pub fn new(train: Vec<usize>, test: Vec<usize>, n: usize) -> Result<Self> {
        let split = Self { train, test };
        split.validate(n)?;
        Ok(split)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n {
                return Err(Error::Validation(format!("split index {i} out of range for {n} rows")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Validation(format!("split index {i} appears twice")));
            }
        }
        Ok(())
    }

    /// Seeded shuffle of `0..n`; the first `round(n·test_fraction)` rows go to test.
    /// Both lists come back sorted.
    pub fn random(n: usize, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&test_fraction) {
            return Err(Error::Usage(format!("test fraction {test_fraction} outside [0, 1]")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((n as f64) * test_fraction).round() as usize;
        let mut test = order[..n_test].to_vec();
        let mut train = order[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Ok(Self { train, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_with_ids(ids: &[&str]) -> EmbeddingCorpus {
        let data = (0..ids.len() * 2).map(|v| v as f32).collect();
        EmbeddingCorpus::new(2, data, Some(ids.iter().map(|s| s.to_string()).collect()), None).unwrap()
    }

    fn encode(c: &EmbeddingCorpus) -> Vec<u8> {
        let mut buf = Vec::new();
        write_corpus(c, &mut buf).unwrap();
        buf
    }

    #[test]
    fn empty_corpus_is_header_only() {
        let c = EmbeddingCorpus::new(4, vec![], None, None).unwrap();
        let bytes = encode(&c);
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[0..4], b"EMBC");
        assert_eq!(read_corpus(&bytes[..]).unwrap(), c);
    }

    #[test]
    fn payload_is_little_endian_f32() {
        let c = EmbeddingCorpus::new(2, vec![1.0, 2.0], None, None).unwrap();
        let bytes = encode(&c);
        assert_eq!(bytes.len(), 24 + 8);
        assert_eq!(&bytes[24..], &[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40]);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
    }

    #[test]
    fn bad_magic_rejected() {
        let c = EmbeddingCorpus::new(2, vec![1.0, 2.0], None, None).unwrap();
        let mut bytes = encode(&c);
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_corpus(&bytes[..]), Err(Error::Format(_))));
    }

    #[test]
    fn missing_row_rejected() {
        let c = EmbeddingCorpus::new(2, vec![1.0, 2.0, 3.0, 4.0], None, None).unwrap();
        let bytes = encode(&c);
        assert!(matches!(read_corpus(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
    }

    #[test]
    fn nan_payload_is_a_validation_error() {
        let c = EmbeddingCorpus::new(2, vec![1.0, 2.0], None, None).unwrap();
        let mut bytes = encode(&c);
        bytes[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_corpus(&bytes[..]), Err(Error::Validation(_))));
        bytes[24..28].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(read_corpus(&bytes[..]), Err(Error::Validation(_))));
    }

    #[test]
    fn ids_roundtrip_and_trailing_garbage_rejected() {
        let c = EmbeddingCorpus::new(
            1,
            vec![0.5, -0.5],
            Some(vec!["a".into(), "ß".into()]),
            Some(vec!["spk".into(), "spk".into()]),
        )
        .unwrap();
        let mut bytes = encode(&c);
        assert_eq!(read_corpus(&bytes[..]).unwrap(), c);
        bytes.push(0);
        assert!(matches!(read_corpus(&bytes[..]), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_sample_ids_rejected() {
        let r = EmbeddingCorpus::new(1, vec![0.0, 1.0], Some(vec!["a".into(), "a".into()]), None);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn labels_parse_and_join() {
        let c = corpus_with_ids(&["s1", "s2"]);
        let set = read_labels("sample_id,label\ns1,1\ns2,false\n".as_bytes(), &c, "spanish").unwrap();
        assert!(set.labels["s1"]);
        assert!(!set.labels["s2"]);
        assert_eq!(set.resolve(&c).unwrap(), vec![(0, true), (1, false)]);
    }

    #[test]
    fn unknown_sample_id_named_in_error() {
        let c = corpus_with_ids(&["s1", "s2"]);
        let err = read_labels("sample_id,label\ns1,0\ns9,1\n".as_bytes(), &c, "x").unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("s9"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unparsable_label_reports_line() {
        let c = corpus_with_ids(&["s1", "s2"]);
        let err = read_labels("sample_id,label\ns1,0\ns2,maybe\n".as_bytes(), &c, "x").unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("line 3"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_class_labels_rejected() {
        let c = corpus_with_ids(&["s1", "s2"]);
        let r = read_labels("sample_id,label\ns1,1\ns2,true\n".as_bytes(), &c, "x");
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn strata_column_is_optional_metadata() {
        let c = corpus_with_ids(&["s1", "s2", "s3"]);
        let set = read_labels(
            "sample_id,label,stratum\ns1,1,male\ns2,1,female\ns3,0,\n".as_bytes(),
            &c,
            "spanish",
        )
        .unwrap();
        assert_eq!(set.strata.len(), 2);
        let mut out = Vec::new();
        write_labels(&set, &c, &mut out).unwrap();
        let again = read_labels(&out[..], &c, "spanish").unwrap();
        assert_eq!(again, set);
    }

    #[test]
    fn random_split_is_disjoint_and_complete() {
        let s = CorpusSplit::random(101, 0.2, 7).unwrap();
        assert_eq!(s.test.len(), 20);
        assert_eq!(s.train.len() + s.test.len(), 101);
        s.validate(101).unwrap();
        assert_eq!(s, CorpusSplit::random(101, 0.2, 7).unwrap());
        assert!(CorpusSplit::new(vec![0, 1], vec![1], 3).is_err());
        assert!(CorpusSplit::new(vec![0, 3], vec![1], 3).is_err());
    }
}
