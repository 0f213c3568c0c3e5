//! Majority-vote fusion with a designated tiebreaker.
//!
//! Per sample the votes of the active models are tallied and resolved as:
//!
//! 1. a unique plurality wins;
//! 2. a tie whose maxima include the tiebreaker's vote goes to the tiebreaker;
//! 3. otherwise, if the tiebreaker supplied probabilities, the tied class it
//!    rates highest wins, and failing that the tied class with the lowest
//!    index.
//!
//! Rules 2 and 3 are reported through [`Resolution`] so callers can say when
//! the fallback was used.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use crate::data::PredictionRecord;
use crate::error::{Error, Result};
use crate::metrics::{f1_report, F1Report};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Resolution {
    Plurality,
    TiebreakerVote,
    TiebreakerProbability,
    LowestIndex,
}

impl Resolution {
    pub fn is_tie(self) -> bool {
        self != Resolution::Plurality
    }
}

/// Applies the vote rule to one sample's tally.
pub fn resolve(
    tally: &[u32],
    tiebreaker_vote: usize,
    tiebreaker_probs: Option<&[f64]>,
) -> (usize, Resolution) {
    let best = tally.iter().copied().max().unwrap_or(0);
    let tied: Vec<usize> = (0..tally.len()).filter(|&c| tally[c] == best).collect();
    if tied.len() == 1 {
        return (tied[0], Resolution::Plurality);
    }
    if tied.contains(&tiebreaker_vote) {
        return (tiebreaker_vote, Resolution::TiebreakerVote);
    }
    if let Some(p) = tiebreaker_probs {
        let mut pick = tied[0];
        for &c in &tied[1..] {
            if p[c] > p[pick] {
                pick = c;
            }
        }
        return (pick, Resolution::TiebreakerProbability);
    }
    (tied[0], Resolution::LowestIndex)
}

#[derive(Debug, Clone, PartialEq)]
struct Vote {
    label: usize,
    probabilities: Option<Vec<f64>>,
}

/// Predictions indexed by sample and model.
///
/// Samples keep first-seen order; models are listed in sorted id order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteTable {
    samples: Vec<String>,
    models: Vec<String>,
    cells: Vec<Vec<Option<Vote>>>,
    num_classes: usize,
}

impl VoteTable {
    /// `num_classes` defaults to the widest probability vector or the
    /// largest label seen plus one.
    pub fn new(records: Vec<PredictionRecord>, num_classes: Option<usize>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::NoSamples);
        }
        let mut samples = Vec::new();
        let mut sample_index = HashMap::new();
        let mut model_set = HashSet::new();
        for r in &records {
            r.validate()?;
            if !sample_index.contains_key(&r.sample_id) {
                sample_index.insert(r.sample_id.clone(), samples.len());
                samples.push(r.sample_id.clone());
            }
            model_set.insert(r.model_id.clone());
        }
        let mut models: Vec<String> = model_set.into_iter().collect();
        models.sort();
        let model_index: HashMap<&str, usize> = models
            .iter()
            .enumerate()
            .map(|(i, m)| (m.as_str(), i))
            .collect();

        let inferred = records
            .iter()
            .map(|r| {
                r.probabilities
                    .as_ref()
                    .map_or(r.label + 1, |p| p.len().max(r.label + 1))
            })
            .max()
            .unwrap_or(0);
        let num_classes = num_classes.unwrap_or(inferred).max(2);
        let mut cells = vec![vec![None; models.len()]; samples.len()];
        for r in records {
            if r.label >= num_classes
                || r.probabilities
                    .as_ref()
                    .is_some_and(|p| p.len() != num_classes)
            {
                return Err(Error::InvalidArgument(format!(
                    "prediction for `{}`/`{}` does not fit {num_classes} classes",
                    r.sample_id, r.model_id
                )));
            }
            let s = sample_index[&r.sample_id];
            let m = model_index[r.model_id.as_str()];
            if cells[s][m].is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate prediction for `{}` from `{}`",
                    r.sample_id, r.model_id
                )));
            }
            cells[s][m] = Some(Vote {
                label: r.label,
                probabilities: r.probabilities,
            });
        }
        Ok(Self {
            samples,
            models,
            cells,
            num_classes,
        })
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(sample, model)` pairs with no prediction.
    pub fn missing(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (s, row) in self.cells.iter().enumerate() {
            for (m, cell) in row.iter().enumerate() {
                if cell.is_none() {
                    out.push((self.samples[s].clone(), self.models[m].clone()));
                }
            }
        }
        out
    }

    fn model_position(&self, id: &str) -> Result<usize> {
        self.models
            .iter()
            .position(|m| m == id)
            .ok_or_else(|| Error::UnknownModel(id.to_string()))
    }

    fn vote(&self, sample: usize, model: usize) -> Result<&Vote> {
        self.cells[sample][model]
            .as_ref()
            .ok_or_else(|| Error::MissingPrediction {
                sample: self.samples[sample].clone(),
                model: self.models[model].clone(),
            })
    }

    /// One model's labels in sample order.
    pub fn model_labels(&self, model: &str) -> Result<Vec<usize>> {
        let m = self.model_position(model)?;
        (0..self.samples.len())
            .map(|s| Ok(self.vote(s, m)?.label))
            .collect()
    }

    /// Orders `truth` by the table's samples; every sample needs a label.
    pub fn align_truth(&self, truth: &HashMap<String, usize>) -> Result<Vec<usize>> {
        let missing: Vec<&str> = self
            .samples
            .iter()
            .filter(|s| !truth.contains_key(*s))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no true label for {} sample(s): {}",
                missing.len(),
                missing.join(", ")
            )));
        }
        Ok(self.samples.iter().map(|s| truth[s]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub labels: Vec<usize>,
    pub resolutions: Vec<Resolution>,
    /// Votes per class, per sample.
    pub tallies: Vec<Vec<u32>>,
}

impl FusionResult {
    pub fn ties(&self) -> impl Iterator<Item = bool> + '_ {
        self.resolutions.iter().map(|r| r.is_tie())
    }

    pub fn count(&self, kind: Resolution) -> usize {
        self.resolutions.iter().filter(|&&r| r == kind).count()
    }
}

pub fn majority_vote(table: &VoteTable, subset: &[&str], tiebreaker: &str) -> Result<FusionResult> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let members = subset
        .iter()
        .map(|m| table.model_position(m))
        .collect::<Result<Vec<_>>>()?;
    if !subset.contains(&tiebreaker) {
        return Err(Error::InvalidArgument(format!(
            "tiebreaker `{tiebreaker}` is not in the subset"
        )));
    }
    let tb = table.model_position(tiebreaker)?;
    let mut result = FusionResult {
        labels: Vec::with_capacity(table.samples.len()),
        resolutions: Vec::with_capacity(table.samples.len()),
        tallies: Vec::with_capacity(table.samples.len()),
    };
    for s in 0..table.samples.len() {
        let mut tally = vec![0u32; table.num_classes];
        for &m in &members {
            tally[table.vote(s, m)?.label] += 1;
        }
        let tb_vote = table.vote(s, tb)?;
        let (label, how) = resolve(&tally, tb_vote.label, tb_vote.probabilities.as_deref());
        result.labels.push(label);
        result.resolutions.push(how);
        result.tallies.push(tally);
    }
    Ok(result)
}

pub fn evaluate_combination(
    table: &VoteTable,
    subset: &[&str],
    tiebreaker: &str,
    truth: &[usize],
) -> Result<F1Report> {
    let fused = majority_vote(table, subset, tiebreaker)?;
    f1_report(truth, &fused.labels, table.num_classes)
}

/// Standalone report of one model.
pub fn model_report(table: &VoteTable, model: &str, truth: &[usize]) -> Result<F1Report> {
    f1_report(truth, &table.model_labels(model)?, table.num_classes)
}

/// The subset member with the best standalone macro-F1; earliest model id
/// wins ties.
pub fn auto_tiebreaker<'a>(
    table: &VoteTable,
    subset: &[&'a str],
    truth: &[usize],
) -> Result<&'a str> {
    let mut ordered = subset.to_vec();
    ordered.sort();
    let mut best: Option<(&str, f64)> = None;
    for m in ordered {
        let f1 = model_report(table, m, truth)?.macro_f1;
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((m, f1));
        }
    }
    best.map(|(m, _)| m).ok_or(Error::EmptySubset)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TiebreakPolicy {
    /// Use this model when it is in the subset, else pick automatically.
    Fixed(String),
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinationResult {
    pub models: Vec<String>,
    pub tiebreaker: String,
    pub report: F1Report,
}

/// Scores every subset of at least `min_size` models, best first. Equal
/// scores keep lexicographic subset order.
pub fn enumerate_combinations(
    table: &VoteTable,
    min_size: usize,
    truth: &[usize],
    policy: &TiebreakPolicy,
) -> Result<Vec<CombinationResult>> {
    if min_size == 0 {
        return Err(Error::InvalidArgument("min_size must be >= 1".into()));
    }
    let n = table.models.len();
    if n >= 32 {
        return Err(Error::InvalidArgument(format!(
            "{n} models is too many to enumerate"
        )));
    }
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << n))
        .filter(|mask| mask.count_ones() as usize >= min_size)
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort();
    let mut out = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let ids: Vec<&str> = subset.iter().map(|&i| table.models[i].as_str()).collect();
        let tiebreaker = match policy {
            TiebreakPolicy::Fixed(m) if ids.contains(&m.as_str()) => m.clone(),
            _ => auto_tiebreaker(table, &ids, truth)?.to_string(),
        };
        let report = evaluate_combination(table, &ids, &tiebreaker, truth)?;
        out.push(CombinationResult {
            models: ids.iter().map(|s| s.to_string()).collect(),
            tiebreaker,
            report,
        });
    }
    // stable: equal scores stay in subset order
    out.sort_by(|a, b| b.report.macro_f1.total_cmp(&a.report.macro_f1));
    Ok(out)
}

// ---- CSV formats ----

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} `{field}`"),
    })
}

/// Parses `sample_id,model_id,label[,p_0,...,p_{C-1}]`.
pub fn parse_predictions_csv(text: &str) -> Result<Vec<PredictionRecord>> {
    let mut rdr = reader(text);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let fixed = ["sample_id", "model_id", "label"];
    if header.len() < 3 || header.iter().take(3).ne(fixed) {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with sample_id,model_id,label".into(),
        });
    }
    let num_probs = header.len() - 3;
    for (k, name) in header.iter().skip(3).enumerate() {
        if name != format!("p_{k}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected column p_{k}, found `{name}`"),
            });
        }
    }
    if num_probs == 1 {
        return Err(Error::Parse {
            line: 1,
            message: "probability columns need at least two classes".into(),
        });
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), row.len()),
            });
        }
        let probabilities = if num_probs > 0 {
            Some(
                row.iter()
                    .skip(3)
                    .map(|f| parse_field::<f64>(f, line, "probability"))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let record = PredictionRecord {
            sample_id: row[0].to_string(),
            model_id: row[1].to_string(),
            label: parse_field(&row[2], line, "label")?,
            probabilities,
        };
        if record.sample_id.is_empty() || record.model_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty sample or model id".into(),
            });
        }
        record.validate().map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::NoSamples);
    }
    Ok(out)
}

pub fn write_predictions_csv<W: Write>(records: &[PredictionRecord], out: W) -> Result<()> {
    let width = records
        .first()
        .and_then(|r| r.probabilities.as_ref())
        .map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample_id".to_string(), "model_id".into(), "label".into()];
    header.extend((0..width).map(|k| format!("p_{k}")));
    w.write_record(&header).map_err(csv_error)?;
    for r in records {
        let probs = r.probabilities.as_deref().unwrap_or(&[]);
        if probs.len() != width {
            return Err(Error::Shape(
                "mixed probability widths in predictions".into(),
            ));
        }
        let mut row = vec![r.sample_id.clone(), r.model_id.clone(), r.label.to_string()];
        row.extend(probs.iter().map(|p| p.to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))
}

/// Parses `sample_id,label` with integer labels.
pub fn parse_truth_csv(text: &str) -> Result<HashMap<String, usize>> {
    let mut rdr = reader(text);
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.iter().ne(["sample_id", "label"]) {
        return Err(Error::Parse {
            line: 1,
            message: "header must be sample_id,label".into(),
        });
    }
    let mut out = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let label = parse_field(&row[1], line, "label")?;
        if out.insert(row[0].to_string(), label).is_some() {
            return Err(Error::DuplicateId {
                line,
                id: row[0].to_string(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::NoSamples);
    }
    Ok(out)
}

pub fn write_truth_csv<'a, W: Write>(
    rows: impl IntoIterator<Item = (&'a str, usize)>,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "label"]).map_err(csv_error)?;
    for (id, label) in rows {
        w.write_record([id, &label.to_string()])
            .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<truth>", e))
}

/// Writes `sample_id,label,tie`.
pub fn write_fused_csv<W: Write>(table: &VoteTable, fused: &FusionResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "label", "tie"])
        .map_err(csv_error)?;
    for ((id, label), tie) in table.samples.iter().zip(&fused.labels).zip(fused.ties()) {
        w.write_record([
            id.as_str(),
            &label.to_string(),
            if tie { "true" } else { "false" },
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<fused>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(sample: &str, model: &str, label: usize) -> PredictionRecord {
        PredictionRecord {
            sample_id: sample.into(),
            model_id: model.into(),
            label,
            probabilities: None,
        }
    }

    fn table_from(votes: &[usize], probs: Option<Vec<f64>>, tiebreaker: usize) -> VoteTable {
        let mut records: Vec<PredictionRecord> = votes
            .iter()
            .enumerate()
            .map(|(m, &l)| rec("x", &format!("m{m}"), l))
            .collect();
        records[tiebreaker].probabilities = probs;
        VoteTable::new(records, Some(3)).unwrap()
    }

    const MODELS: [&str; 5] = ["m0", "m1", "m2", "m3", "m4"];

    #[test]
    fn strict_plurality() {
        let t = table_from(&[0, 0, 0, 1, 2], None, 3);
        let r = majority_vote(&t, &MODELS, "m3").unwrap();
        assert_eq!(r.labels, vec![0]);
        assert_eq!(r.resolutions, vec![Resolution::Plurality]);
        assert_eq!(r.tallies, vec![vec![3, 1, 1]]);
    }

    #[test]
    fn tie_goes_to_tiebreaker() {
        let t = table_from(&[0, 0, 1, 1, 2], None, 2);
        let r = majority_vote(&t, &MODELS, "m2").unwrap();
        assert_eq!(r.labels, vec![1]);
        assert!(r.ties().all(|t| t));
    }

    #[test]
    fn tie_without_tiebreaker_uses_its_probabilities() {
        let t = table_from(&[0, 0, 1, 1, 2], Some(vec![0.4, 0.3, 0.3]), 4);
        let r = majority_vote(&t, &MODELS, "m4").unwrap();
        assert_eq!(r.labels, vec![0]);
        assert_eq!(r.resolutions, vec![Resolution::TiebreakerProbability]);

        let t = table_from(&[0, 0, 1, 1, 2], Some(vec![0.1, 0.3, 0.6]), 4);
        assert_eq!(majority_vote(&t, &MODELS, "m4").unwrap().labels, vec![1]);

        let t = table_from(&[1, 1, 0, 0, 2], None, 4);
        let r = majority_vote(&t, &MODELS, "m4").unwrap();
        assert_eq!(r.labels, vec![0]);
        assert_eq!(r.resolutions, vec![Resolution::LowestIndex]);
    }

    #[test]
    fn vote_errors() {
        let t = table_from(&[0, 0, 1, 1, 2], None, 0);
        assert!(matches!(
            majority_vote(&t, &[], "m0"),
            Err(Error::EmptySubset)
        ));
        assert!(majority_vote(&t, &["m0", "m1"], "m2").is_err());
        assert!(matches!(
            majority_vote(&t, &["zz"], "zz"),
            Err(Error::UnknownModel(_))
        ));

        let t = VoteTable::new(
            vec![rec("a", "m0", 0), rec("b", "m0", 1), rec("a", "m1", 1)],
            None,
        )
        .unwrap();
        assert_eq!(t.missing(), vec![("b".to_string(), "m1".to_string())]);
        assert!(matches!(
            majority_vote(&t, &["m0", "m1"], "m0"),
            Err(Error::MissingPrediction { .. })
        ));
    }

    #[test]
    fn single_model_subset_matches_standalone() {
        let records = vec![
            rec("a", "m0", 0),
            rec("b", "m0", 1),
            rec("c", "m0", 1),
            rec("a", "m1", 1),
            rec("b", "m1", 1),
            rec("c", "m1", 0),
        ];
        let t = VoteTable::new(records, None).unwrap();
        let truth = vec![0, 1, 0];
        for m in ["m0", "m1"] {
            assert_eq!(
                evaluate_combination(&t, &[m], m, &truth).unwrap(),
                model_report(&t, m, &truth).unwrap()
            );
        }
    }

    #[test]
    fn combination_counts_and_order() {
        let mut records = Vec::new();
        for (m, labels) in [
            [0, 1, 1, 0],
            [0, 1, 0, 0],
            [1, 1, 0, 0],
            [0, 0, 1, 1],
            [0, 1, 1, 1],
        ]
        .iter()
        .enumerate()
        {
            for (s, &l) in labels.iter().enumerate() {
                records.push(rec(&format!("s{s}"), &format!("m{m}"), l));
            }
        }
        let t = VoteTable::new(records, Some(2)).unwrap();
        let truth = vec![0, 1, 1, 0];
        let all =
            enumerate_combinations(&t, 3, &truth, &TiebreakPolicy::Fixed("m1".into())).unwrap();
        assert_eq!(all.len(), 16);
        assert!(all
            .windows(2)
            .all(|w| w[0].report.macro_f1 >= w[1].report.macro_f1));
        for w in all.windows(2) {
            if w[0].report.macro_f1 == w[1].report.macro_f1 {
                assert!(w[0].models < w[1].models);
            }
        }
        let one = enumerate_combinations(&t, 5, &truth, &TiebreakPolicy::Auto).unwrap();
        assert_eq!(one.len(), 1);
        assert!(enumerate_combinations(&t, 0, &truth, &TiebreakPolicy::Auto).is_err());
    }

    #[test]
    fn predictions_csv_parses_and_rejects() {
        let text = "sample_id,model_id,label,p_0,p_1\nu1,S2,1,0.25,0.75\nu2,S2,0,1,0\n";
        let recs = parse_predictions_csv(text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].probabilities.as_deref(), Some(&[0.25, 0.75][..]));
        let mut buf = Vec::new();
        write_predictions_csv(&recs, &mut buf).unwrap();
        assert_eq!(
            parse_predictions_csv(std::str::from_utf8(&buf).unwrap()).unwrap(),
            recs
        );

        assert!(parse_predictions_csv("sample,model,label\n").is_err());
        assert!(
            parse_predictions_csv("sample_id,model_id,label,p_0,p_1\nu1,S2,1,0.5,0.6\n").is_err()
        );
        assert!(parse_predictions_csv("sample_id,model_id,label\nu1,S2,x\n").is_err());
        assert!(parse_predictions_csv("sample_id,model_id,label\n").is_err());
    }

    #[test]
    fn truth_csv() {
        let t = parse_truth_csv("sample_id,label\na,0\nb,2\n").unwrap();
        assert_eq!(t["b"], 2);
        assert!(parse_truth_csv("sample_id,label\na,0\na,1\n").is_err());
    }
}
