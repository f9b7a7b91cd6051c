use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

/// Whether the attribute was meant for the garment being asked about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Intended,
    Unintended,
}

/// One answer to "Consider the garment <class>: is it <attribute>?".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub image_id: String,
    pub garment: String,
    pub attribute: String,
    pub answer: Answer,
    pub rater: String,
    pub role: Role,
}

/// Reads `image_id,garment,attribute,answer,rater,role` rows with a header.
pub fn read_responses(path: &Path) -> Result<Vec<EvalResponse>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Harmonic mean of precision and recall; `0` when both are `0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// TP: yes on the intended garment. FN: no on the intended garment.
/// FP: yes on an unintended garment. Empty ratios are reported as `0`.
pub fn attribute_scores(responses: &[EvalResponse]) -> AttributeScores {
    let count = |role, answer| responses.iter().filter(|r| r.role == role && r.answer == answer).count();
    let tp = count(Role::Intended, Answer::Yes);
    let fn_ = count(Role::Intended, Answer::No);
    let fp = count(Role::Unintended, Answer::Yes);
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    AttributeScores {
        precision,
        recall,
        f1: f1_score(precision, recall),
        tp,
        fp,
        fn_,
    }
}

/// Krippendorff's alpha for nominal data. Each rating is `(unit, rater,
/// value)`; units with fewer than two ratings are not pairable and ignored.
pub fn krippendorff_alpha<U: Ord, V: Ord + Clone>(ratings: &[(U, &str, V)]) -> Result<f64> {
    let mut units: BTreeMap<&U, BTreeMap<&str, &V>> = BTreeMap::new();
    for (u, r, v) in ratings {
        if units.entry(u).or_default().insert(r, v).is_some() {
            return Err(Error::invalid("ratings", format!("rater `{r}` rated one unit twice")));
        }
    }
    let values: BTreeSet<&V> = ratings.iter().map(|(_, _, v)| v).collect();
    let index: BTreeMap<&V, usize> = values.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let k = values.len();
    let mut o = vec![vec![0.0f64; k]; k];
    for by_rater in units.values() {
        let m = by_rater.len();
        if m < 2 {
            continue;
        }
        let vals: Vec<usize> = by_rater.values().map(|v| index[v]).collect();
        for (i, &a) in vals.iter().enumerate() {
            for (j, &b) in vals.iter().enumerate() {
                if i != j {
                    o[a][b] += 1.0 / (m as f64 - 1.0);
                }
            }
        }
    }
    let nc: Vec<f64> = o.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = nc.iter().sum();
    if n < 2.0 {
        return Err(Error::Undefined("no unit was rated by two raters".into()));
    }
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..k {
        for d in 0..k {
            if c != d {
                observed += o[c][d];
                expected += nc[c] * nc[d];
            }
        }
    }
    if expected == 0.0 {
        return Err(Error::Undefined("only one value was ever used".into()));
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// Alpha over the yes/no answers, with one unit per (image, garment, attribute).
pub fn response_alpha(responses: &[EvalResponse]) -> Result<f64> {
    let ratings: Vec<((String, String, String), &str, Answer)> = responses
        .iter()
        .map(|r| ((r.image_id.clone(), r.garment.clone(), r.attribute.clone()), r.rater.as_str(), r.answer))
        .collect();
    krippendorff_alpha(&ratings)
}
