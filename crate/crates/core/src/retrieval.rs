//! Packed binary codes, exact Hamming top-K search and mAP@K evaluation.

use std::collections::{HashMap, HashSet};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{config, Error, Result};
use crate::hashing::{HashModel, Variant};
use crate::nn::DenseNet;

/// A binary code packed little-endian into 64-bit words: bit `b` lives in
/// word `b / 64` at position `b % 64`. Unused high bits of the last word are zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PackedCode {
    pub id: u64,
    len: usize,
    words: Vec<u64>,
}

impl PackedCode {
    /// Bit `b` is set iff `code[b] >= 0` (so +1 maps to 1 and -1 to 0).
    pub fn from_real(id: u64, code: &[f64]) -> Self {
        Self::from_bits(id, code.iter().map(|&v| v >= 0.0))
    }

    pub fn from_bits(id: u64, bits: impl IntoIterator<Item = bool>) -> Self {
        let mut words = Vec::new();
        let mut len = 0;
        for bit in bits {
            if len % 64 == 0 {
                words.push(0);
            }
            if bit {
                words[len / 64] |= 1 << (len % 64);
            }
            len += 1;
        }
        Self { id, len, words }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, b: usize) -> bool {
        assert!(
            b < self.len,
            "bit {b} out of range for code of length {}",
            self.len
        );
        self.words[b / 64] >> (b % 64) & 1 == 1
    }

    pub fn complement(&self) -> Self {
        Self::from_bits(self.id, (0..self.len).map(|b| !self.bit(b)))
    }

    /// Popcount of XOR.
    pub fn hamming(&self, other: &PackedCode) -> Result<u32> {
        if self.len != other.len {
            return Err(config(format!(
                "code lengths differ: {} vs {}",
                self.len, other.len
            )));
        }
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum())
    }
}

/// Immutable archive of equal-length codes with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeIndex {
    code_length: usize,
    codes: Vec<PackedCode>,
}

impl CodeIndex {
    pub fn build(codes: Vec<PackedCode>) -> Result<Self> {
        let Some(first) = codes.first() else {
            return Err(config("cannot index an empty archive"));
        };
        let code_length = first.len();
        if code_length == 0 {
            return Err(config("codes must have at least one bit"));
        }
        let mut ids = HashSet::with_capacity(codes.len());
        for c in &codes {
            if c.len() != code_length {
                return Err(config(format!(
                    "archive mixes code lengths {code_length} and {}",
                    c.len()
                )));
            }
            if !ids.insert(c.id) {
                return Err(config(format!("duplicate code id {}", c.id)));
            }
        }
        Ok(Self { code_length, codes })
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[PackedCode] {
        &self.codes
    }
}

/// The `k` nearest archive codes as `(id, distance)`, ordered by distance then
/// ascending id. Returns the whole archive when it holds fewer than `k` codes.
pub fn hamming_topk(index: &CodeIndex, query: &PackedCode, k: usize) -> Result<Vec<(u64, u32)>> {
    if k == 0 {
        return Err(config("K must be at least 1"));
    }
    if query.len() != index.code_length {
        return Err(config(format!(
            "query has {} bits, archive codes have {}",
            query.len(),
            index.code_length
        )));
    }
    let mut scored: Vec<(u32, u64)> = index
        .codes
        .iter()
        .map(|c| {
            let d = c
                .words
                .iter()
                .zip(&query.words)
                .map(|(a, b)| (a ^ b).count_ones())
                .sum();
            (d, c.id)
        })
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable(k - 1);
        scored.truncate(k);
    }
    scored.sort_unstable();
    Ok(scored.into_iter().map(|(d, id)| (id, d)).collect())
}

/// `sum_{i<=K} P(i) rel(i) / min(|relevant|, K)`; 0 when nothing is relevant.
pub fn average_precision_at_k(ranked: &[u64], relevant: &HashSet<u64>, k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / relevant.len().min(k) as f64
}

/// Forward pass in eval mode, then sign-threshold and pack each row.
pub fn encode_binary(
    net: &DenseNet,
    features: ArrayView2<f64>,
    ids: &[u64],
) -> Result<Vec<PackedCode>> {
    if ids.len() != features.nrows() {
        return Err(config(format!(
            "{} ids for {} feature rows",
            ids.len(),
            features.nrows()
        )));
    }
    let out = net.forward_eval(features)?;
    Ok(out
        .rows()
        .into_iter()
        .zip(ids)
        .map(|(row, &id)| PackedCode::from_real(id, row.as_slice().expect("standard layout")))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "I->T")]
    ImageToText,
    #[serde(rename = "T->I")]
    TextToImage,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::ImageToText => "I->T",
            Task::TextToImage => "T->I",
        }
    }
}

/// Run settings echoed into every report row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunEcho {
    pub variant: Variant,
    pub noise_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub echo: RunEcho,
    pub code_length: usize,
    pub k: usize,
    pub map_at_k: f64,
    pub precision_at_k: f64,
    pub per_query_ap: Vec<f64>,
}

pub const REPORT_HEADER: [&str; 8] = [
    "task",
    "variant",
    "noise_rate",
    "code_length",
    "seed",
    "K",
    "map_at_k",
    "precision_at_k",
];

impl EvalReport {
    pub fn csv_record(&self) -> [String; 8] {
        [
            self.task.as_str().to_string(),
            self.echo.variant.as_str().to_string(),
            self.echo.noise_rate.to_string(),
            self.code_length.to_string(),
            self.echo.seed.to_string(),
            self.k.to_string(),
            self.map_at_k.to_string(),
            self.precision_at_k.to_string(),
        ]
    }
}

fn split_features(ds: &Dataset, split: Split) -> (Array2<f64>, Array2<f64>, Vec<u64>, Vec<u32>) {
    let idx = ds.indices(split);
    let x = Array2::from_shape_fn((idx.len(), ds.d_i), |(r, c)| {
        ds.records[idx[r]].image[c] as f64
    });
    let y = Array2::from_shape_fn((idx.len(), ds.d_t), |(r, c)| {
        ds.records[idx[r]].text[c] as f64
    });
    let ids = idx.iter().map(|&i| ds.records[i].id).collect();
    let labels = idx.iter().map(|&i| ds.records[i].label).collect();
    (x, y, ids, labels)
}

/// Scores one retrieval direction: each query ranks the whole archive.
pub fn evaluate_codes(
    queries: &[PackedCode],
    query_labels: &[u32],
    archive: &CodeIndex,
    archive_labels: &HashMap<u64, u32>,
    k: usize,
) -> Result<(f64, f64, Vec<f64>)> {
    if queries.is_empty() {
        return Err(config("no queries to evaluate"));
    }
    let mut by_label: HashMap<u32, HashSet<u64>> = HashMap::new();
    for (&id, &label) in archive_labels {
        by_label.entry(label).or_default().insert(id);
    }
    let empty = HashSet::new();
    let mut aps = Vec::with_capacity(queries.len());
    let mut precision = 0.0;
    for (q, label) in queries.iter().zip(query_labels) {
        let ranked: Vec<u64> = hamming_topk(archive, q, k)?
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        let relevant = by_label.get(label).unwrap_or(&empty);
        aps.push(average_precision_at_k(&ranked, relevant, k));
        precision += ranked.iter().filter(|id| relevant.contains(id)).count() as f64 / k as f64;
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok((map, precision / queries.len() as f64, aps))
}

/// mAP@K and precision@K for image→text and text→image retrieval. Queries come
/// from the query split, the archive from the retrieval split, and an item is
/// relevant when it shares the query's class label.
pub fn evaluate(
    model: &HashModel,
    ds: &Dataset,
    k: usize,
    echo: RunEcho,
) -> Result<(EvalReport, EvalReport)> {
    if !ds.has_labels {
        return Err(Error::Data("evaluation needs class labels".into()));
    }
    if k == 0 {
        return Err(config("K must be at least 1"));
    }
    let (qx, qy, q_ids, q_labels) = split_features(ds, Split::Query);
    let (rx, ry, r_ids, r_labels) = split_features(ds, Split::Retrieval);
    if q_ids.is_empty() || r_ids.is_empty() {
        return Err(Error::Data(
            "evaluation needs non-empty query and retrieval splits".into(),
        ));
    }
    let archive_labels: HashMap<u64, u32> = r_ids.iter().copied().zip(r_labels).collect();
    let code_length = model.f.out_dim();

    let run = |task,
               q_net: &DenseNet,
               q_feat: &Array2<f64>,
               a_net: &DenseNet,
               a_feat: &Array2<f64>|
     -> Result<EvalReport> {
        let queries = encode_binary(q_net, q_feat.view(), &q_ids)?;
        let archive = CodeIndex::build(encode_binary(a_net, a_feat.view(), &r_ids)?)?;
        let (map_at_k, precision_at_k, per_query_ap) =
            evaluate_codes(&queries, &q_labels, &archive, &archive_labels, k)?;
        Ok(EvalReport {
            task,
            echo,
            code_length,
            k,
            map_at_k,
            precision_at_k,
            per_query_ap,
        })
    };
    let i2t = run(Task::ImageToText, &model.f, &qx, &model.g, &ry)?;
    let t2i = run(Task::TextToImage, &model.g, &qy, &model.f, &rx)?;
    Ok((i2t, t2i))
}
