//! Confusion matrices, per-class and macro F1, balanced subsets.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde_json::{json, Map, Value};

use crate::data::{EmbeddingDataset, LabelSpace, Sample};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c < 2 || counts.iter().any(|r| r.len() != c) {
            return Err(Error::Shape(
                "confusion matrix must be square with C >= 2".into(),
            ));
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn confusion(
    truth: &[usize],
    predicted: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label pair ({t}, {p}) outside {num_classes} classes"
            )));
        }
        counts[t][p] += 1;
    }
    ConfusionMatrix::from_counts(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
}

impl F1Report {
    /// `{"per_class": {name: f1, ..}, "macro": f1}` in label order.
    pub fn to_json(&self, labels: &LabelSpace) -> Value {
        let per_class: Map<String, Value> = labels
            .classes()
            .iter()
            .zip(&self.per_class)
            .map(|(name, v)| (name.clone(), json!(v)))
            .collect();
        json!({"per_class": per_class, "macro": self.macro_f1})
    }

    /// Fixed-width table with six decimals.
    pub fn table(&self, labels: &LabelSpace) -> String {
        let width = labels
            .classes()
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max("macro".len());
        let mut out = format!("{:<width$}  f1\n", "class");
        for (name, v) in labels.classes().iter().zip(&self.per_class) {
            out.push_str(&format!("{name:<width$}  {v:.6}\n"));
        }
        out.push_str(&format!("{:<width$}  {:.6}\n", "macro", self.macro_f1));
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class F1 with every `0/0` read as 0, averaged over all `C` classes.
pub fn macro_f1(cm: &ConfusionMatrix) -> F1Report {
    let c = cm.num_classes();
    let per_class: Vec<f64> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let predicted: u64 = (0..c).map(|t| cm.get(t, k)).sum();
            let actual: u64 = cm.counts[k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    let macro_f1 = per_class.iter().sum::<f64>() / c as f64;
    F1Report {
        per_class,
        macro_f1,
    }
}

pub fn f1_report(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<F1Report> {
    Ok(macro_f1(&confusion(truth, predicted, num_classes)?))
}

/// Exactly `per_class` samples of each class, drawn without replacement
/// from stream `(seed, Balance, class)`. Output keeps input order.
pub fn balanced_subset(
    dataset: &EmbeddingDataset,
    labels: &LabelSpace,
    per_class: usize,
    seed: u64,
) -> Result<EmbeddingDataset> {
    let picked = balanced_indices(dataset.samples(), |s| s.label, labels, per_class, seed)?;
    let samples: Vec<Sample> = picked
        .into_iter()
        .map(|i| dataset.samples()[i].clone())
        .collect();
    EmbeddingDataset::new(samples)
}

/// Index-level form of [`balanced_subset`] for any labelled collection.
pub fn balanced_indices<T>(
    items: &[T],
    label_of: impl Fn(&T) -> usize,
    labels: &LabelSpace,
    per_class: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be >= 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); labels.len()];
    for (i, item) in items.iter().enumerate() {
        let label = label_of(item);
        by_class
            .get_mut(label)
            .ok_or_else(|| Error::InvalidArgument(format!("label {label} outside label space")))?
            .push(i);
    }
    let mut keep = HashSet::with_capacity(per_class * labels.len());
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(Error::InsufficientClass {
                class: labels.name(c).unwrap_or("?").to_string(),
                available: members.len(),
                requested: per_class,
            });
        }
        let mut rng = stream_rng(seed, Stream::Balance, c as u64);
        let (chosen, _) = members.partial_shuffle(&mut rng, per_class);
        keep.extend(chosen.iter().copied());
    }
    Ok((0..items.len()).filter(|i| keep.contains(i)).collect())
}
