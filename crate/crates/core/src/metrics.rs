//! Ranking metrics: per-class average precision, mAP with head/medium/tail
//! breakdown, and AP variance.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Group;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Average precision of one class: mean of precision@n over the ranks of the
/// positives, ranking by descending score with ties broken by ascending index.
///
/// Returns `None` when there are no positives (AP undefined).
pub fn average_precision<T: Scalar>(scores: &[T], relevance: &[bool]) -> Result<Option<f64>> {
    if scores.len() != relevance.len() {
        return Err(Error::contract(format!(
            "{} scores but {} relevance labels",
            scores.len(),
            relevance.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score in average precision".into()));
    }
    let positives = relevance.iter().filter(|&&r| r).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevance[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / positives as f64))
}

/// Evaluation summary. Group means are absent when the group has no class
/// with a defined AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Vec<Option<f64>>,
    pub map_total: f64,
    pub map_head: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_tail: Option<f64>,
    /// Population variance of per-class AP in percentage points squared.
    pub ap_variance: f64,
    pub groups: Vec<Group>,
    /// Training counts the groups were derived from.
    pub counts: Vec<usize>,
    pub images: usize,
    pub warnings: Vec<String>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Scores `[Nimg, c]` against labels (row-major `Nimg × c`).
pub fn evaluate<T: Scalar>(scores: &Tensor<T>, labels: &[bool], counts: &[usize]) -> Result<EvalReport> {
    let s = scores.shape();
    if s.len() != 2 {
        return Err(Error::contract(format!("scores must be [Nimg, c], got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    if labels.len() != n * c {
        return Err(Error::contract(format!(
            "labels hold {} entries, scores are {n}x{c}",
            labels.len()
        )));
    }
    if counts.len() != c {
        return Err(Error::contract(format!(
            "class statistics cover {} classes, scores have {c}",
            counts.len()
        )));
    }
    let groups: Vec<Group> = counts.iter().map(|&k| Group::from_count(k)).collect();
    let mut ap = Vec::with_capacity(c);
    let mut warnings = Vec::new();
    let data = scores.data();
    for j in 0..c {
        let col: Vec<T> = (0..n).map(|i| data[i * c + j]).collect();
        let rel: Vec<bool> = (0..n).map(|i| labels[i * c + j]).collect();
        let a = average_precision(&col, &rel)?;
        if a.is_none() {
            let msg = format!("class {j} has no positive test images; excluded from means");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        ap.push(a);
    }
    let defined: Vec<f64> = ap.iter().flatten().copied().collect();
    let map_total = mean(&defined).ok_or_else(|| Error::contract("no class has a defined AP"))?;
    let group_mean = |g: Group| {
        let v: Vec<f64> = ap
            .iter()
            .zip(&groups)
            .filter(|(_, &gg)| gg == g)
            .filter_map(|(a, _)| *a)
            .collect();
        mean(&v)
    };
    let pct: Vec<f64> = defined.iter().map(|a| a * 100.0).collect();
    let mu = mean(&pct).unwrap_or(0.0);
    let ap_variance = pct.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / pct.len() as f64;
    Ok(EvalReport {
        map_head: group_mean(Group::Head),
        map_medium: group_mean(Group::Medium),
        map_tail: group_mean(Group::Tail),
        ap,
        map_total,
        ap_variance,
        groups,
        counts: counts.to_vec(),
        images: n,
        warnings,
    })
}

impl EvalReport {
    /// Line-delimited `key value` text; percentages with four decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |x: Option<f64>| x.map(|v| format!("{:.4}", v * 100.0)).unwrap_or_else(|| "absent".into());
        writeln!(s, "total {:.4}", self.map_total * 100.0).unwrap();
        writeln!(s, "head {}", opt(self.map_head)).unwrap();
        writeln!(s, "medium {}", opt(self.map_medium)).unwrap();
        writeln!(s, "tail {}", opt(self.map_tail)).unwrap();
        writeln!(s, "var {:.4}", self.ap_variance).unwrap();
        writeln!(s, "images {}", self.images).unwrap();
        for (j, (a, g)) in self.ap.iter().zip(&self.groups).enumerate() {
            writeln!(s, "ap.{j} {} {}", opt(*a), g.name()).unwrap();
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn group_map(&self, g: Group) -> Option<f64> {
        match g {
            Group::Head => self.map_head,
            Group::Medium => self.map_medium,
            Group::Tail => self.map_tail,
        }
    }
}
