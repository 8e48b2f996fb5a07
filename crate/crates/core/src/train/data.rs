//! Labelled token sequences: the synthetic motif task plus IDX and CSV
//! ingestion.
//!
//! Token layout of the synthetic task (`C` classes, motif length `L`):
//!
//! ```text
//! 0                    [CLS]
//! 1 ..= C·L            source-domain motif alphabet
//! C·L+1 ..= 2·C·L      target-domain motif alphabet
//! 2·C·L+1 .. vocab     filler
//! ```
//!
//! Class `c` owns the `L` consecutive tokens starting at
//! `alphabet_start + c·L`. An example places its class motif contiguously at
//! a random position, fills the rest with filler tokens, and replaces each
//! motif token with a random filler token with probability `noise_rate`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::linalg::Rng;
use crate::model::CLS_TOKEN;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    /// Full sequence, `[CLS]` first.
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Token sequences and labels of the examples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Vec<Vec<usize>>, Vec<usize>) {
        indices
            .iter()
            .map(|&i| (self.examples[i].tokens.clone(), self.examples[i].label))
            .unzip()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Pretraining task.
    Source,
    /// Shifted fine-tuning task with its own motif alphabet.
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0x0074_7261_696e,
            Split::Test => 0x7465_7374,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub vocab: usize,
    /// Including the `[CLS]` position.
    pub seq_len: usize,
    pub num_classes: usize,
    pub motif_len: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub domain: Domain,
    /// `label = permutation[class]` when present.
    pub label_permutation: Option<Vec<usize>>,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self::source()
    }
}

impl SyntheticTaskSpec {
    pub fn source() -> Self {
        Self {
            vocab: 32,
            seq_len: 17,
            num_classes: 4,
            motif_len: 3,
            noise_rate: 0.1,
            seed: 1,
            domain: Domain::Source,
            label_permutation: None,
        }
    }

    /// The shifted task: disjoint motif alphabet, rotated labels.
    pub fn target() -> Self {
        Self {
            seed: 2,
            domain: Domain::Target,
            label_permutation: Some(vec![1, 2, 3, 0]),
            ..Self::source()
        }
    }

    fn alphabet_len(&self) -> usize {
        self.num_classes * self.motif_len
    }

    /// First token of this domain's motif alphabet.
    pub fn alphabet_start(&self) -> usize {
        match self.domain {
            Domain::Source => 1,
            Domain::Target => 1 + self.alphabet_len(),
        }
    }

    pub fn filler_range(&self) -> std::ops::Range<usize> {
        1 + 2 * self.alphabet_len()..self.vocab
    }

    pub fn motif(&self, class: usize) -> std::ops::Range<usize> {
        let start = self.alphabet_start() + class * self.motif_len;
        start..start + self.motif_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.motif_len == 0 {
            return Err(contract("need at least 2 classes and motif_len >= 1"));
        }
        if self.seq_len < 2 || self.motif_len > self.seq_len - 1 {
            return Err(contract(format!(
                "motif_len {} does not fit in {} content positions",
                self.motif_len,
                self.seq_len.saturating_sub(1)
            )));
        }
        if self.filler_range().is_empty() {
            return Err(contract(format!(
                "vocab {} too small for 2 x {} classes x {} motif tokens plus filler and [CLS]",
                self.vocab, self.num_classes, self.motif_len
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(contract("noise_rate must lie in [0, 1]"));
        }
        if let Some(p) = &self.label_permutation {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            if sorted != (0..self.num_classes).collect::<Vec<_>>() {
                return Err(contract("label_permutation is not a permutation of the classes"));
            }
        }
        Ok(())
    }

    pub fn label_of(&self, class: usize) -> usize {
        self.label_permutation.as_ref().map_or(class, |p| p[class])
    }

    /// Example `index` of `split`; depends only on `(seed, split, index)`.
    pub fn example(&self, split: Split, index: usize) -> Example {
        let mut rng = Rng::derived(self.seed ^ split.stream(), index as u64);
        let filler = self.filler_range();
        let draw_filler = |rng: &mut Rng| filler.start + rng.below(filler.len());
        let class = rng.below(self.num_classes);
        let content = self.seq_len - 1;
        let mut tokens = Vec::with_capacity(self.seq_len);
        tokens.push(CLS_TOKEN);
        for _ in 0..content {
            let t = draw_filler(&mut rng);
            tokens.push(t);
        }
        let at = 1 + rng.below(content - self.motif_len + 1);
        for (offset, tok) in self.motif(class).enumerate() {
            tokens[at + offset] = if rng.next_f64() < self.noise_rate {
                draw_filler(&mut rng)
            } else {
                tok
            };
        }
        Example {
            tokens,
            label: self.label_of(class),
        }
    }

    pub fn generate(&self, split: Split, n: usize) -> Result<Dataset> {
        self.validate()?;
        Ok(Dataset {
            examples: (0..n).map(|i| self.example(split, i)).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Motif-counting classifier: the class whose motif tokens occur most
    /// often (lowest class on ties), mapped through the label permutation.
    pub fn oracle_predict(&self, tokens: &[usize]) -> usize {
        let mut best = (0usize, 0usize);
        for class in 0..self.num_classes {
            let motif = self.motif(class);
            let hits = tokens.iter().filter(|t| motif.contains(t)).count();
            if hits > best.1 {
                best = (class, hits);
            }
        }
        self.label_of(best.0)
    }
}

// ---------------------------------------------------------------------------
// IDX

/// An IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Parses a big-endian IDX file holding `u8` data in 1 or 3 dimensions.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Parse("truncated IDX header".into()))
    };
    let magic = word(0)?;
    if magic != IDX_MAGIC_IMAGES && magic != IDX_MAGIC_LABELS {
        return Err(Error::Parse(format!("unsupported IDX magic {magic:#010x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (1..=ndims).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let header = 4 * (1 + ndims);
    let expected: usize = dims.iter().product();
    let payload = &bytes[header.min(bytes.len())..];
    if payload.len() != expected {
        return Err(Error::Parse(format!(
            "IDX payload has {} bytes, dims {:?} need {expected}",
            payload.len(),
            dims
        )));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

/// Quantises each image into `seq_len − 1` tokens: the flattened pixels are
/// cut into equal contiguous chunks, and each chunk mean falls into one of
/// `vocab − 1` byte buckets (token ids `1..vocab`). `[CLS]` is prepended.
pub fn idx_to_dataset(images: &IdxArray, labels: &IdxArray, vocab: usize, seq_len: usize) -> Result<Dataset> {
    if images.dims.len() != 3 || labels.dims.len() != 1 {
        return Err(Error::Parse("expected a 3-d image array and a 1-d label array".into()));
    }
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(Error::Parse(format!("{n} images but {} labels", labels.dims[0])));
    }
    if vocab < 2 || seq_len < 2 {
        return Err(contract("vocab and seq_len must both be >= 2"));
    }
    let pixels = images.dims[1] * images.dims[2];
    let content = seq_len - 1;
    if pixels < content {
        return Err(contract(format!("{pixels} pixels cannot fill {content} tokens")));
    }
    let buckets = vocab - 1;
    let examples = (0..n)
        .map(|i| {
            let img = &images.data[i * pixels..(i + 1) * pixels];
            let mut tokens = Vec::with_capacity(seq_len);
            tokens.push(CLS_TOKEN);
            for c in 0..content {
                let (lo, hi) = (c * pixels / content, (c + 1) * pixels / content);
                let mean = img[lo..hi].iter().map(|&b| b as f64).sum::<f64>() / (hi - lo) as f64;
                let bucket = ((mean * buckets as f64 / 256.0) as usize).min(buckets - 1);
                tokens.push(1 + bucket);
            }
            Example {
                tokens,
                label: labels.data[i] as usize,
            }
        })
        .collect::<Vec<_>>();
    let num_classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
    Ok(Dataset { examples, num_classes })
}

pub fn load_idx(images: &Path, labels: &Path, vocab: usize, seq_len: usize) -> Result<Dataset> {
    let images = parse_idx(&std::fs::read(images)?)?;
    let labels = parse_idx(&std::fs::read(labels)?)?;
    idx_to_dataset(&images, &labels, vocab, seq_len)
}

// ---------------------------------------------------------------------------
// Labelled CSV: header `label,tok_0,...,tok_{L-1}` with `L = seq_len − 1`
// content tokens per row; `[CLS]` is prepended on load.

pub fn parse_labeled_csv(text: &str, vocab: usize, seq_len: usize) -> Result<Dataset> {
    let content = seq_len
        .checked_sub(1)
        .ok_or_else(|| contract("seq_len must be >= 1"))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
    let expected: Vec<String> = std::iter::once("label".to_string())
        .chain((0..content).map(|i| format!("tok_{i}")))
        .collect();
    let got: Vec<&str> = header.split(',').map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse(format!(
            "CSV header must be `{}`",
            expected.join(",")
        )));
    }
    let mut examples = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", ln + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if fields.len() != content + 1 {
            return Err(Error::Parse(format!(
                "row {} has {} fields, expected {}",
                ln + 1,
                fields.len(),
                content + 1
            )));
        }
        if let Some(t) = fields[1..].iter().find(|&&t| t >= vocab) {
            return Err(Error::Parse(format!("row {}: token {t} >= vocab {vocab}", ln + 1)));
        }
        let mut tokens = Vec::with_capacity(seq_len);
        tokens.push(CLS_TOKEN);
        tokens.extend_from_slice(&fields[1..]);
        examples.push(Example {
            tokens,
            label: fields[0],
        });
    }
    let num_classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
    Ok(Dataset { examples, num_classes })
}

pub fn load_labeled_csv(path: &Path, vocab: usize, seq_len: usize) -> Result<Dataset> {
    parse_labeled_csv(&std::fs::read_to_string(path)?, vocab, seq_len)
}

/// Inverse of [`parse_labeled_csv`] (drops the `[CLS]` position).
pub fn to_labeled_csv(data: &Dataset) -> String {
    let content = data.examples.first().map_or(0, |e| e.tokens.len() - 1);
    let mut out = String::from("label");
    for i in 0..content {
        out.push_str(&format!(",tok_{i}"));
    }
    out.push('\n');
    for e in &data.examples {
        out.push_str(&e.label.to_string());
        for t in &e.tokens[1..] {
            out.push_str(&format!(",{t}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn accuracy(spec: &SyntheticTaskSpec, data: &Dataset) -> f64 {
        let hits = data
            .examples
            .iter()
            .filter(|e| spec.oracle_predict(&e.tokens) == e.label)
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn noiseless_task_is_perfectly_separable() {
        let spec = SyntheticTaskSpec {
            noise_rate: 0.0,
            ..SyntheticTaskSpec::source()
        };
        let data = spec.generate(Split::Train, 500).unwrap();
        assert_eq!(accuracy(&spec, &data), 1.0);
    }

    #[test]
    fn noisy_task_oracle_accuracy() {
        for spec in [SyntheticTaskSpec::source(), SyntheticTaskSpec::target()] {
            let data = spec.generate(Split::Test, 2000).unwrap();
            let acc = accuracy(&spec, &data);
            assert!(acc >= 0.95, "{acc}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_split_dependent() {
        let spec = SyntheticTaskSpec::target();
        let a = spec.generate(Split::Train, 50).unwrap();
        assert_eq!(a, spec.generate(Split::Train, 50).unwrap());
        assert_ne!(a, spec.generate(Split::Test, 50).unwrap());
    }

    #[test]
    fn domains_use_disjoint_motif_alphabets() {
        let src = SyntheticTaskSpec::source();
        let tgt = SyntheticTaskSpec::target();
        let src_tokens: Vec<usize> = (0..src.num_classes).flat_map(|c| src.motif(c)).collect();
        let tgt_tokens: Vec<usize> = (0..tgt.num_classes).flat_map(|c| tgt.motif(c)).collect();
        assert!(src_tokens.iter().all(|t| !tgt_tokens.contains(t)));
        let data = src.generate(Split::Train, 200).unwrap();
        assert!(data
            .examples
            .iter()
            .all(|e| e.tokens[0] == CLS_TOKEN && e.tokens[1..].iter().all(|t| !tgt_tokens.contains(t))));
    }

    #[test]
    fn label_permutation_is_applied() {
        let spec = SyntheticTaskSpec::target();
        let e = spec.example(Split::Train, 3);
        let class = (0..4).find(|&c| spec.label_of(c) == e.label).unwrap();
        assert_eq!(spec.label_permutation.as_ref().unwrap()[class], e.label);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SyntheticTaskSpec::source();
        spec.vocab = 25;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticTaskSpec::source();
        spec.motif_len = 17;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticTaskSpec::source();
        spec.label_permutation = Some(vec![0, 0, 1, 2]);
        assert!(spec.validate().is_err());
    }

    fn idx_bytes(magic: u32, dims: &[u32], data: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn idx_round_trip_and_quantisation() {
        // Two 2x4 images: all-zero and all-255.
        let mut pixels = vec![0u8; 8];
        pixels.extend(vec![255u8; 8]);
        let images = parse_idx(&idx_bytes(IDX_MAGIC_IMAGES, &[2, 2, 4], &pixels)).unwrap();
        let labels = parse_idx(&idx_bytes(IDX_MAGIC_LABELS, &[2], &[3, 1])).unwrap();
        let data = idx_to_dataset(&images, &labels, 32, 5).unwrap();
        assert_eq!(data.examples[0].tokens, vec![0, 1, 1, 1, 1]);
        assert_eq!(data.examples[1].tokens, vec![0, 31, 31, 31, 31]);
        assert_eq!(data.examples[0].label, 3);
        assert_eq!(data.num_classes, 4);
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        assert!(parse_idx(&idx_bytes(0x0000_0D03, &[1, 1, 1], &[0])).is_err());
        assert!(parse_idx(&idx_bytes(IDX_MAGIC_LABELS, &[3], &[0, 1])).is_err());
        assert!(parse_idx(&[0, 0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let spec = SyntheticTaskSpec::source();
        let data = spec.generate(Split::Train, 20).unwrap();
        let text = to_labeled_csv(&data);
        assert!(text.starts_with("label,tok_0,tok_1"));
        let back = parse_labeled_csv(&text, spec.vocab, spec.seq_len).unwrap();
        assert_eq!(back.examples, data.examples);
    }

    #[test]
    fn csv_rejects_bad_header_and_tokens() {
        assert!(parse_labeled_csv("lbl,tok_0\n1,2\n", 32, 2).is_err());
        assert!(parse_labeled_csv("label,tok_0\n1,40\n", 32, 2).is_err());
        assert!(parse_labeled_csv("label,tok_0\n1,2,3\n", 32, 2).is_err());
        let ok = parse_labeled_csv("label,tok_0\n1,2\n", 32, 2).unwrap();
        assert_eq!(ok.examples[0].tokens, vec![0, 2]);
    }
}
