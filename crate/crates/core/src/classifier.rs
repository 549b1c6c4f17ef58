//! Per-instance format selection.
//!
//! Each instance gets a label vector marking which formats answered it
//! correctly. One logistic scorer per format is trained on hashed text
//! features with the summed binary cross-entropy; prediction picks the
//! highest-scoring format.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{exact_match, MetricError};
use crate::execution::ReasoningOutcome;
use crate::formats::{column_types, SqlType, TabularFormat};
use crate::hash::Fnv1a;
use crate::table::Instance;

pub const DEFAULT_HASH_DIM: u32 = 1 << 15;
pub const LOG_EPS: f64 = 1e-12;
const DENSE_STATS: u32 = 4;
const MODEL_MAGIC: &[u8; 8] = b"FLXTCLS\x01";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("no outcome for instance {instance_id:?} in format {format}")]
    MissingOutcome { instance_id: String, format: TabularFormat },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no training records")]
    Empty,
    #[error("every training record has an empty label set; filter before training")]
    NoPositives,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Model(String),
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// features

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SparseVector(pub Vec<(u32, f64)>);

impl SparseVector {
    fn from_map(map: BTreeMap<u32, f64>) -> Self {
        SparseVector(map.into_iter().filter(|(_, v)| *v != 0.0).collect())
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.0.iter().map(|&(i, v)| dense[i as usize] * v).sum()
    }

    pub fn max_index(&self) -> Option<u32> {
        self.0.last().map(|(i, _)| *i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub hash_dim: u32,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            hash_dim: DEFAULT_HASH_DIM,
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl FeaturizerConfig {
    /// Total feature width: hashed block followed by the dense statistics.
    pub fn width(&self) -> usize {
        (self.hash_dim + DENSE_STATS) as usize
    }

    fn slot(&self, namespace: &str, gram: &str) -> u32 {
        let h = Fnv1a::default()
            .write(namespace.as_bytes())
            .write(b"\x1f")
            .write(gram.as_bytes())
            .finish();
        (h % u64::from(self.hash_dim)) as u32
    }

    fn add_grams(&self, namespace: &str, tokens: &[String], out: &mut BTreeMap<u32, f64>) {
        for t in tokens {
            out.insert(self.slot(namespace, t), 1.0);
        }
        for pair in tokens.windows(2) {
            out.insert(self.slot(namespace, &format!("{} {}", pair[0], pair[1])), 1.0);
        }
    }

    /// Binary hashed unigrams and bigrams of the question and of each column
    /// header, plus log row count, log column count, int-column fraction and
    /// log question length.
    pub fn featurize(&self, instance: &Instance) -> SparseVector {
        let mut map = BTreeMap::new();
        let question = words(&instance.question);
        self.add_grams("q", &question, &mut map);
        for header in instance.table.header() {
            self.add_grams("h", &words(header), &mut map);
        }
        let base = self.hash_dim;
        let table = &instance.table;
        map.insert(base, (table.num_rows() as f64).ln_1p());
        map.insert(base + 1, (table.num_columns() as f64).ln_1p());
        map.insert(base + 2, int_column_fraction(instance));
        map.insert(base + 3, (question.len() as f64).ln_1p());
        SparseVector::from_map(map)
    }
}

pub fn int_column_fraction(instance: &Instance) -> f64 {
    let types = column_types(&instance.table);
    if types.is_empty() {
        return 0.0;
    }
    types.iter().filter(|t| **t == SqlType::Int).count() as f64 / types.len() as f64
}

// ---------------------------------------------------------------------------
// labels

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub instance_id: String,
    /// One bit per candidate format, in candidate order.
    pub labels: Vec<u8>,
    pub features: SparseVector,
}

impl LabelRecord {
    pub fn count(&self) -> usize {
        self.labels.iter().filter(|b| **b == 1).count()
    }
}

/// Marks each candidate format whose sample-0 outcome matches gold.
pub fn collect_labels(
    instances: &[Instance],
    outcomes: &[ReasoningOutcome],
    formats: &[TabularFormat],
    featurizer: &FeaturizerConfig,
) -> Result<Vec<LabelRecord>, ClassifierError> {
    let index: HashMap<(&str, TabularFormat), &ReasoningOutcome> = outcomes
        .iter()
        .filter(|o| o.sample_index == 0)
        .map(|o| ((o.instance_id.as_str(), o.format), o))
        .collect();
    instances
        .iter()
        .map(|inst| {
            let labels = formats
                .iter()
                .map(|&f| {
                    let o = index
                        .get(&(inst.id.as_str(), f))
                        .ok_or_else(|| ClassifierError::MissingOutcome {
                            instance_id: inst.id.clone(),
                            format: f,
                        })?;
                    Ok(u8::from(
                        o.answer.as_ref().is_some_and(|a| exact_match(a, &inst.gold_answers)),
                    ))
                })
                .collect::<Result<Vec<u8>, ClassifierError>>()?;
            Ok(LabelRecord {
                instance_id: inst.id.clone(),
                labels,
                features: featurizer.featurize(inst),
            })
        })
        .collect()
}

/// Which records are kept for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelFilter {
    /// Drop records with no correct format or with more than half correct;
    /// `k` caps the count further.
    Half,
    /// Keep label counts in `1..=k`.
    Threshold,
}

impl std::str::FromStr for LabelFilter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "half" => Ok(LabelFilter::Half),
            "threshold" => Ok(LabelFilter::Threshold),
            other => Err(format!("unknown label filter {other:?} (expected half or threshold)")),
        }
    }
}

impl LabelFilter {
    pub fn max_labels(self, k: usize, n_formats: usize) -> usize {
        match self {
            LabelFilter::Half => k.min(n_formats / 2),
            LabelFilter::Threshold => k,
        }
    }
}

pub fn filter_training(records: &[LabelRecord], k: usize, rule: LabelFilter) -> Vec<LabelRecord> {
    records
        .iter()
        .filter(|r| {
            let cap = rule.max_labels(k, r.labels.len());
            (1..=cap).contains(&r.count())
        })
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// loss

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy summed over labels and averaged over instances.
/// Predictions are clamped to `[LOG_EPS, 1 - LOG_EPS]`.
pub fn bce_loss(predictions: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<f64, ClassifierError> {
    if predictions.len() != labels.len() {
        return Err(ClassifierError::Shape(format!(
            "{} prediction rows vs {} label rows",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(ClassifierError::Empty);
    }
    let mut total = 0.0;
    for (i, (p, y)) in predictions.iter().zip(labels).enumerate() {
        if p.len() != y.len() {
            return Err(ClassifierError::Shape(format!(
                "row {i}: {} predictions vs {} labels",
                p.len(),
                y.len()
            )));
        }
        for (&p, &y) in p.iter().zip(y) {
            let p = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
            total += if y == 1 { p.ln() } else { (1.0 - p).ln() };
        }
    }
    Ok(-total / predictions.len() as f64)
}

/// Per-format weight vectors and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Params {
    pub fn zeros(labels: usize, width: usize) -> Self {
        Params {
            weights: vec![vec![0.0; width]; labels],
            bias: vec![0.0; labels],
        }
    }

    pub fn logits(&self, x: &SparseVector) -> Vec<f64> {
        self.weights.iter().zip(&self.bias).map(|(w, b)| x.dot(w) + b).collect()
    }

    fn check(&self, records: &[LabelRecord]) -> Result<(), ClassifierError> {
        let width = self.weights.first().map_or(0, Vec::len);
        for r in records {
            if r.labels.len() != self.bias.len() {
                return Err(ClassifierError::Shape(format!(
                    "record {} has {} labels, model has {}",
                    r.instance_id,
                    r.labels.len(),
                    self.bias.len()
                )));
            }
            if r.features.max_index().is_some_and(|i| i as usize >= width) {
                return Err(ClassifierError::Shape(format!(
                    "record {} has features beyond width {width}",
                    r.instance_id
                )));
            }
        }
        Ok(())
    }

    /// Mean summed BCE over `records` plus `l2 / 2 * |W|^2` (biases are not
    /// penalized).
    pub fn objective(&self, records: &[LabelRecord], l2: f64) -> Result<f64, ClassifierError> {
        self.check(records)?;
        let preds: Vec<Vec<f64>> = records
            .iter()
            .map(|r| self.logits(&r.features).into_iter().map(sigmoid).collect())
            .collect();
        let labels: Vec<Vec<u8>> = records.iter().map(|r| r.labels.clone()).collect();
        let penalty: f64 = self.weights.iter().flatten().map(|w| w * w).sum::<f64>() * l2 / 2.0;
        Ok(bce_loss(&preds, &labels)? + penalty)
    }

    /// Gradient of the data term of [`Params::objective`]; the l2 part is
    /// `l2 * w` and is left to the caller.
    pub fn data_gradient(&self, records: &[LabelRecord]) -> Result<SparseGradient, ClassifierError> {
        self.check(records)?;
        if records.is_empty() {
            return Err(ClassifierError::Empty);
        }
        let n = records.len() as f64;
        let mut g = SparseGradient {
            weights: vec![BTreeMap::new(); self.bias.len()],
            bias: vec![0.0; self.bias.len()],
        };
        for r in records {
            for (label, z) in self.logits(&r.features).into_iter().enumerate() {
                let residual = (sigmoid(z) - f64::from(r.labels[label])) / n;
                g.bias[label] += residual;
                let row = &mut g.weights[label];
                for &(i, v) in &r.features.0 {
                    *row.entry(i).or_insert(0.0) += residual * v;
                }
            }
        }
        Ok(g)
    }

    /// Full dense gradient of [`Params::objective`].
    pub fn gradient(&self, records: &[LabelRecord], l2: f64) -> Result<Params, ClassifierError> {
        let g = self.data_gradient(records)?;
        let mut out = Params {
            weights: self
                .weights
                .iter()
                .map(|w| w.iter().map(|x| l2 * x).collect())
                .collect(),
            bias: g.bias,
        };
        for (dense, sparse) in out.weights.iter_mut().zip(&g.weights) {
            for (&i, &v) in sparse {
                dense[i as usize] += v;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct SparseGradient {
    pub weights: Vec<BTreeMap<u32, f64>>,
    pub bias: Vec<f64>,
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_labels: usize,
    pub filter: LabelFilter,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 200,
            batch_size: 16,
            seed: 0,
            max_labels: 2,
            filter: LabelFilter::Half,
            l2: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_formats: usize) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be non-negative");
        }
        if self.max_labels == 0 || self.max_labels > n_formats {
            return bad(&format!("max label threshold must lie in 1..={n_formats}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormatClassifier {
    pub formats: Vec<TabularFormat>,
    pub featurizer: FeaturizerConfig,
    pub seed: u64,
    pub params: Params,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: usize,
    pub final_objective: f64,
    /// Formats that no training record marks as correct.
    pub unseen: Vec<TabularFormat>,
}

/// Mini-batch gradient descent on the summed BCE plus l2. The shuffle order
/// is drawn from a ChaCha stream seeded by `config.seed`, so equal inputs
/// give bit-identical weights.
pub fn train(
    records: &[LabelRecord],
    formats: &[TabularFormat],
    featurizer: FeaturizerConfig,
    config: &TrainConfig,
) -> Result<(FormatClassifier, TrainSummary), ClassifierError> {
    config.validate(formats.len())?;
    if records.is_empty() {
        return Err(ClassifierError::Empty);
    }
    if records.iter().all(|r| r.count() == 0) {
        return Err(ClassifierError::NoPositives);
    }
    let mut params = Params::zeros(formats.len(), featurizer.width());
    params.check(records)?;
    let unseen = formats
        .iter()
        .enumerate()
        .filter(|(i, _)| records.iter().all(|r| r.labels[*i] == 0))
        .map(|(_, f)| *f)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let lr = config.learning_rate;
    let decay = 1.0 - lr * config.l2;
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| records[i].clone()));
            let g = params.data_gradient(&batch)?;
            for (label, (w, gw)) in params.weights.iter_mut().zip(&g.weights).enumerate() {
                if config.l2 > 0.0 {
                    w.iter_mut().for_each(|x| *x *= decay);
                }
                for (&i, &v) in gw {
                    w[i as usize] -= lr * v;
                }
                params.bias[label] -= lr * g.bias[label];
            }
        }
    }
    let final_objective = params.objective(records, config.l2)?;
    let model = FormatClassifier {
        formats: formats.to_vec(),
        featurizer,
        seed: config.seed,
        params,
    };
    Ok((
        model,
        TrainSummary {
            records: records.len(),
            final_objective,
            unseen,
        },
    ))
}

/// Index of the largest score; ties go to the earliest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Divides by the sum so the scores read as a distribution.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / scores.len() as f64; scores.len()]
    }
}

impl FormatClassifier {
    /// Sigmoid scores per candidate format, normalized to sum to one.
    pub fn scores_for_features(&self, features: &SparseVector) -> Vec<f64> {
        let raw: Vec<f64> = self.params.logits(features).into_iter().map(sigmoid).collect();
        normalize_scores(&raw)
    }

    pub fn scores(&self, instance: &Instance) -> Vec<f64> {
        self.scores_for_features(&self.featurizer.featurize(instance))
    }

    pub fn predict_features(&self, features: &SparseVector) -> TabularFormat {
        self.formats[argmax_first(&self.scores_for_features(features))]
    }

    pub fn predict_format(&self, instance: &Instance) -> TabularFormat {
        self.predict_features(&self.featurizer.featurize(instance))
    }

    /// Fraction of records whose predicted format is marked correct.
    pub fn classification_accuracy(&self, records: &[LabelRecord]) -> Result<f64, MetricError> {
        if records.is_empty() {
            return Err(MetricError::Empty);
        }
        let hits = records
            .iter()
            .filter(|r| {
                let scores = self.scores_for_features(&r.features);
                r.labels.get(argmax_first(&scores)) == Some(&1)
            })
            .count();
        Ok(hits as f64 / records.len() as f64)
    }

    // Layout: magic, u32 header length, JSON header, then per format an f64
    // bias, a u32 count and (u32 index, f64 weight) pairs for the non-zero
    // weights. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ModelHeader {
            version: MODEL_VERSION,
            formats: self.formats.clone(),
            hash_dim: self.featurizer.hash_dim,
            width: self.featurizer.width(),
            seed: self.seed,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (w, b) in self.params.weights.iter().zip(&self.params.bias) {
            out.extend_from_slice(&b.to_le_bytes());
            let nz: Vec<(usize, f64)> = w.iter().copied().enumerate().filter(|(_, x)| *x != 0.0).collect();
            out.extend_from_slice(&(nz.len() as u32).to_le_bytes());
            for (i, x) in nz {
                out.extend_from_slice(&(i as u32).to_le_bytes());
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ClassifierError> {
        let mut r = bytes;
        let bad = |m: &str| ClassifierError::Model(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MODEL_MAGIC {
            return Err(bad("not a classifier model file"));
        }
        let len = read_u32(&mut r)? as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: ModelHeader =
            serde_json::from_slice(&r[..len]).map_err(|e| ClassifierError::Model(format!("header: {e}")))?;
        r = &r[len..];
        if header.version != MODEL_VERSION {
            return Err(ClassifierError::Model(format!(
                "unsupported model version {}",
                header.version
            )));
        }
        let featurizer = FeaturizerConfig {
            hash_dim: header.hash_dim,
        };
        if featurizer.width() != header.width {
            return Err(bad("width does not match hash dimension"));
        }
        let mut params = Params::zeros(header.formats.len(), header.width);
        for label in 0..header.formats.len() {
            params.bias[label] = read_f64(&mut r)?;
            let nz = read_u32(&mut r)?;
            for _ in 0..nz {
                let i = read_u32(&mut r)? as usize;
                let x = read_f64(&mut r)?;
                *params.weights[label]
                    .get_mut(i)
                    .ok_or_else(|| bad("weight index out of range"))? = x;
            }
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(FormatClassifier {
            formats: header.formats,
            featurizer,
            seed: header.seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    formats: Vec<TabularFormat>,
    hash_dim: u32,
    width: usize,
    seed: u64,
}

fn read_u32(r: &mut &[u8]) -> Result<u32, ClassifierError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| ClassifierError::Model("truncated weights".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64, ClassifierError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| ClassifierError::Model("truncated weights".into()))?;
    Ok(f64::from_le_bytes(b))
}
