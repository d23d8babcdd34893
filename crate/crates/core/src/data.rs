//! Dataset containers, predictors and the seeding contract.
//!
//! Containers are immutable once built. Features are stored row-major in a
//! single buffer so that large unlabeled pools stay cache friendly.

use std::fmt;
use std::io::Read;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling::csv_parse_error;

/// Seed for every stochastic operation in the crate.
///
/// Child seeds for replicates, stages and data streams are derived with
/// [`RngSeed::derive`], so parallel and serial runs see identical streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent child seed for stream `stream`.
    pub fn derive(self, stream: u64) -> RngSeed {
        RngSeed(mix64(self.0 ^ mix64(stream.wrapping_add(0x6a09_e667_f3bc_c909))))
    }
}

impl Default for RngSeed {
    fn default() -> Self {
        RngSeed(20_240_601)
    }
}

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One labeled observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl LabeledSample {
    pub fn new(x: Vec<f64>, y: f64) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidParameter(
                "feature vector must have at least one coordinate".into(),
            ));
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: 0 });
        }
        Ok(Self { x, y })
    }
}

fn check_rows(dim: usize, features: &[f64], rows: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidParameter("feature dimension must be at least 1".into()));
    }
    if features.len() != dim * rows {
        return Err(Error::DimensionMismatch {
            row: features.len() / dim,
            expected: dim * rows,
            found: features.len(),
        });
    }
    if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: pos / dim });
    }
    Ok(())
}

/// The small labeled dataset: `(x, y)` pairs with a shared feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    features: Vec<f64>,
    outcomes: Vec<f64>,
}

impl LabeledDataset {
    /// Builds a dataset from row-major features and outcomes.
    pub fn new(dim: usize, features: Vec<f64>, outcomes: Vec<f64>) -> Result<Self> {
        check_rows(dim, &features, outcomes.len())?;
        if let Some(row) = outcomes.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row });
        }
        Ok(Self {
            dim,
            features,
            outcomes,
        })
    }

    pub fn from_samples(samples: Vec<LabeledSample>) -> Result<Self> {
        let dim = samples
            .first()
            .map(|s| s.x.len())
            .ok_or_else(|| Error::InsufficientData("cannot infer feature dimension of an empty dataset".into()))?;
        let mut features = Vec::with_capacity(dim * samples.len());
        let mut outcomes = Vec::with_capacity(samples.len());
        for (row, s) in samples.into_iter().enumerate() {
            if s.x.len() != dim {
                return Err(Error::DimensionMismatch {
                    row,
                    expected: dim,
                    found: s.x.len(),
                });
            }
            features.extend_from_slice(&s.x);
            outcomes.push(s.y);
        }
        Self::new(dim, features, outcomes)
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.outcomes[i]
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&[f64], f64)> + '_ {
        self.features.chunks_exact(self.dim).zip(self.outcomes.iter().copied())
    }

    /// Copy of the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut outcomes = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.x(i));
            outcomes.push(self.outcomes[i]);
        }
        LabeledDataset {
            dim: self.dim,
            features,
            outcomes,
        }
    }

    /// Drops the labels, e.g. to treat held-out rows as an unlabeled pool.
    pub fn to_unlabeled(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            dim: self.dim,
            features: self.features.clone(),
        }
    }
}

/// The large unlabeled pool.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    dim: usize,
    features: Vec<f64>,
}

impl UnlabeledDataset {
    pub fn new(dim: usize, features: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("feature dimension must be at least 1".into()));
        }
        if !features.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                row: features.len() / dim,
                expected: dim,
                found: features.len() % dim,
            });
        }
        check_rows(dim, &features, features.len() / dim)?;
        Ok(Self { dim, features })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InsufficientData("cannot infer feature dimension of an empty pool".into()))?;
        let mut features = Vec::with_capacity(dim * rows.len());
        for (row, x) in rows.into_iter().enumerate() {
            if x.len() != dim {
                return Err(Error::DimensionMismatch {
                    row,
                    expected: dim,
                    found: x.len(),
                });
            }
            features.extend(x);
        }
        Self::new(dim, features)
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self, j: usize) -> &[f64] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.dim)
    }
}

type PredictFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A fitted surrogate `x -> f(x)`.
///
/// Evaluation must be deterministic. `trained_on` records how many
/// fine-tuning samples produced the predictor, when known.
#[derive(Clone)]
pub struct Predictor {
    eval: Arc<PredictFn>,
    trained_on: Option<usize>,
}

impl Predictor {
    pub fn new<F>(f: F, trained_on: Option<usize>) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(f),
            trained_on,
        }
    }

    /// The predictor that always returns `c`.
    pub fn constant(c: f64) -> Self {
        Self::new(move |_| c, None)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn trained_on(&self) -> Option<usize> {
        self.trained_on
    }

    pub fn predict_labeled(&self, data: &LabeledDataset) -> Vec<f64> {
        data.iter().map(|(x, _)| self.predict(x)).collect()
    }

    pub fn predict_unlabeled(&self, data: &UnlabeledDataset) -> Vec<f64> {
        data.iter().map(|x| self.predict(x)).collect()
    }
}

impl fmt::Debug for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Predictor")
            .field("trained_on", &self.trained_on)
            .finish_non_exhaustive()
    }
}

/// Anything that turns a fine-tuning subset into a predictor.
///
/// Implementations receive only the fine-tuning rows, which keeps the
/// predictor independent of the rectification and validation samples.
pub trait Trainer {
    fn train(&self, ft_data: &LabeledDataset) -> Result<Predictor>;
}

/// Uniformly random permutation of `0..n`.
pub fn random_permutation(n: usize, seed: RngSeed) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed.rng());
    idx
}

/// Index sets of a uniform random partition into sizes `s` and `n - s`.
pub fn split_indices(n: usize, s: usize, seed: RngSeed) -> Result<(Vec<usize>, Vec<usize>)> {
    if s == 0 || s >= n {
        return Err(Error::InvalidSplit { s, n });
    }
    let mut perm = random_permutation(n, seed);
    let rest = perm.split_off(s);
    Ok((perm, rest))
}

/// Splits `data` into a fine-tuning part of size `s` and a rectification
/// part of size `n - s`. Samples are distinguished by index.
pub fn split_dataset(data: &LabeledDataset, s: usize, seed: RngSeed) -> Result<(LabeledDataset, LabeledDataset)> {
    let (ft, ppi) = split_indices(data.len(), s, seed)?;
    Ok((data.subset(&ft), data.subset(&ppi)))
}

fn parse_cell(field: &str, row: usize, column: usize) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        row,
        column,
        message: format!("invalid number `{field}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column,
            message: format!("non-finite value `{field}`"),
        });
    }
    Ok(v)
}

/// Reads all rows as numbers; `check_header` validates the column names.
fn read_numeric_csv<R: Read>(
    reader: R,
    check_header: impl FnOnce(&[&str]) -> std::result::Result<(), String>,
) -> Result<(usize, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_parse_error(e, 0))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    check_header(&names).map_err(|message| Error::Parse {
        row: 0,
        column: 0,
        message,
    })?;
    let width = names.len();
    let mut values = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_parse_error(e, row))?;
        for (c, field) in record.iter().enumerate() {
            values.push(parse_cell(field, row, c + 1)?);
        }
    }
    Ok((width, values))
}

fn feature_names_ok(names: &[&str]) -> bool {
    !names.is_empty() && names.iter().all(|n| n.starts_with('x'))
}

/// Reads a labeled file with header `y,x1,...,xd` (or `choice,...` for
/// discrete-choice data).
pub fn read_labeled_csv<R: Read>(reader: R) -> Result<LabeledDataset> {
    let (width, values) = read_numeric_csv(reader, |names| match names.split_first() {
        Some((&first, rest)) if (first == "y" || first == "choice") && feature_names_ok(rest) => Ok(()),
        _ => Err(format!("expected header `y,x1,...,xd`, found `{}`", names.join(","))),
    })?;
    let mut features = Vec::with_capacity(values.len());
    let mut outcomes = Vec::with_capacity(values.len() / width);
    for row in values.chunks_exact(width) {
        outcomes.push(row[0]);
        features.extend_from_slice(&row[1..]);
    }
    LabeledDataset::new(width - 1, features, outcomes)
}

/// Reads an unlabeled file with header `x1,...,xd`.
pub fn read_unlabeled_csv<R: Read>(reader: R) -> Result<UnlabeledDataset> {
    let (width, values) = read_numeric_csv(reader, |names| {
        if feature_names_ok(names) {
            Ok(())
        } else {
            Err(format!("expected header `x1,...,xd`, found `{}`", names.join(",")))
        }
    })?;
    UnlabeledDataset::new(width, values)
}

/// Reads precomputed predictions with header `f`.
pub fn read_predictions_csv<R: Read>(reader: R) -> Result<Vec<f64>> {
    let (_, values) = read_numeric_csv(reader, |names| {
        if names == ["f"] {
            Ok(())
        } else {
            Err(format!("expected header `f`, found `{}`", names.join(",")))
        }
    })?;
    Ok(values)
}
