//! Threshold calibration, OOD decisions and ranking metrics.
//!
//! Scores follow one convention throughout: a larger score means "more
//! out-of-distribution", and OOD is the positive class.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Truth {
    Id,
    Ood(String),
}

impl Truth {
    /// `"id"` or `"ood:<family>"`.
    pub fn tag(&self) -> String {
        match self {
            Truth::Id => "id".into(),
            Truth::Ood(f) => format!("ood:{f}"),
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        if tag == "id" {
            Ok(Truth::Id)
        } else if let Some(f) = tag.strip_prefix("ood:").filter(|f| !f.is_empty()) {
            Ok(Truth::Ood(f.to_string()))
        } else {
            Err(Error::format(format!("unknown family tag `{tag}`")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: u64,
    pub truth: Truth,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Id,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    pub calibration_count: usize,
    /// Sample achieving the maximum (lowest id on ties).
    pub calibration_max_id: u64,
}

fn check_scores(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::contract(format!("{what} is empty")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::contract(format!("{what} contains non-finite score {bad}")));
    }
    Ok(())
}

/// `tau` is the largest calibration error; ids are list positions.
pub fn calibrate_threshold(errors: &[f64]) -> Result<Threshold> {
    let pairs: Vec<(u64, f64)> = errors.iter().enumerate().map(|(i, &e)| (i as u64, e)).collect();
    calibrate_threshold_with_ids(&pairs)
}

pub fn calibrate_threshold_with_ids(errors: &[(u64, f64)]) -> Result<Threshold> {
    let values: Vec<f64> = errors.iter().map(|p| p.1).collect();
    check_scores(&values, "calibration set")?;
    if let Some(neg) = values.iter().find(|&&e| e < 0.0) {
        return Err(Error::contract(format!("negative reconstruction error {neg}")));
    }
    let mut best = errors[0];
    for &(id, e) in &errors[1..] {
        if e > best.1 || (e == best.1 && id < best.0) {
            best = (id, e);
        }
    }
    Ok(Threshold {
        tau: best.1,
        calibration_count: errors.len(),
        calibration_max_id: best.0,
    })
}

/// OOD iff `error > tau`; an error equal to `tau` is in-distribution.
pub fn classify(error: f64, threshold: &Threshold) -> Decision {
    if error > threshold.tau {
        Decision::Ood
    } else {
        Decision::Id
    }
}

/// Pair-count cutoff: up to this many (id, ood) pairs are compared directly.
const EXACT_PAIR_LIMIT: usize = 1_000_000;

/// Probability that an OOD score exceeds an ID score, ties counted as ½.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores(id_scores, "ID scores")?;
    check_scores(ood_scores, "OOD scores")?;
    if id_scores.len() * ood_scores.len() <= EXACT_PAIR_LIMIT {
        Ok(auroc_pairwise(id_scores, ood_scores))
    } else {
        Ok(auroc_ranked(id_scores, ood_scores))
    }
}

fn auroc_pairwise(id: &[f64], ood: &[f64]) -> f64 {
    // Twice the Mann–Whitney U, kept integral until the final division.
    let mut doubled: u64 = 0;
    for &o in ood {
        for &i in id {
            doubled += match o.partial_cmp(&i) {
                Some(Ordering::Greater) => 2,
                Some(Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    doubled as f64 / (2 * id.len() * ood.len()) as f64
}

/// Mann–Whitney U from mid-ranks of the pooled sample.
pub(crate) fn auroc_ranked(id: &[f64], ood: &[f64]) -> f64 {
    let mut pooled: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, false))
        .chain(ood.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Doubled ranks stay integral under mid-rank tie handling.
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < pooled.len() {
        let mut end = start;
        while end + 1 < pooled.len() && pooled[end + 1].0 == pooled[start].0 {
            end += 1;
        }
        let doubled_mid = (start + 1 + end + 1) as u128;
        let positives = pooled[start..=end].iter().filter(|p| p.1).count() as u128;
        doubled_rank_sum += doubled_mid * positives;
        start = end + 1;
    }
    let m = ood.len() as u128;
    let doubled_u = doubled_rank_sum - m * (m + 1);
    doubled_u as f64 / (2 * id.len() * ood.len()) as f64
}

/// False-positive rate at the largest observed threshold `t` for which at
/// least `tpr_target` of OOD scores satisfy `score > t`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    check_scores(id_scores, "ID scores")?;
    check_scores(ood_scores, "OOD scores")?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::domain(format!("TPR target {tpr_target} outside (0, 1]")));
    }
    let mut id = id_scores.to_vec();
    let mut ood = ood_scores.to_vec();
    id.sort_by(f64::total_cmp);
    ood.sort_by(f64::total_cmp);
    let count_above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&s| s <= t);
    // Smallest count that satisfies the target, robust to 0.95·m rounding.
    let required = ((tpr_target * ood.len() as f64) - 1e-9).ceil().max(0.0) as usize;

    let mut candidates: Vec<f64> = id.iter().chain(&ood).copied().collect();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    let t = candidates
        .into_iter()
        .find(|&t| count_above(&ood, t) >= required)
        .unwrap_or(f64::NEG_INFINITY);
    Ok(count_above(&id, t) as f64 / id.len() as f64)
}

/// One `(recall, precision)` point per distinct score, thresholds descending,
/// predicting OOD when `score ≥ threshold`.
pub fn pr_curve(id_scores: &[f64], ood_scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_scores(id_scores, "ID scores")?;
    check_scores(ood_scores, "OOD scores")?;
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = ood_scores.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = Vec::new();
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == t {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp as f64 / positives, tp as f64 / (tp + fp) as f64));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl Confusion {
    /// Counts decisions at `threshold` with OOD as the positive class.
    pub fn at(id_scores: &[f64], ood_scores: &[f64], threshold: &Threshold) -> Self {
        let mut c = Confusion::default();
        for &s in id_scores {
            match classify(s, threshold) {
                Decision::Ood => c.false_positive += 1,
                Decision::Id => c.true_negative += 1,
            }
        }
        for &s in ood_scores {
            match classify(s, threshold) {
                Decision::Ood => c.true_positive += 1,
                Decision::Id => c.false_negative += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub family: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub pr_curve: Vec<(f64, f64)>,
    /// Decisions under the calibrated threshold.
    pub confusion: Confusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub fpr95: f64,
    pub auroc: f64,
}

/// Threshold-free metrics of a comparison method, per family plus average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub families: Vec<(String, AverageRow)>,
    pub average: AverageRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: String,
    pub families: Vec<MetricsRow>,
    pub average: AverageRow,
    pub threshold: Threshold,
    pub id_test_count: usize,
    #[serde(default)]
    pub baselines: Vec<MethodSummary>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub manifest_digest: String,
}

pub const TPR_TARGET: f64 = 0.95;

/// Splits scored samples into the shared ID list and per-family OOD lists,
/// each ordered by sample id.
fn group_scores(scored: &[ScoredSample]) -> Result<(Vec<f64>, BTreeMap<String, Vec<f64>>)> {
    let mut sorted: Vec<&ScoredSample> = scored.iter().collect();
    sorted.sort_by(|a, b| a.truth.cmp(&b.truth).then(a.sample_id.cmp(&b.sample_id)));
    let mut id = Vec::new();
    let mut ood: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in sorted {
        if !(s.error.is_finite() && s.error >= 0.0) {
            return Err(Error::contract(format!(
                "sample {} has invalid error {}",
                s.sample_id, s.error
            )));
        }
        match &s.truth {
            Truth::Id => id.push(s.error),
            Truth::Ood(f) => ood.entry(f.clone()).or_default().push(s.error),
        }
    }
    if id.is_empty() {
        return Err(Error::contract("report needs in-distribution test samples"));
    }
    if ood.is_empty() {
        return Err(Error::contract("report needs at least one OOD family"));
    }
    Ok((id, ood))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Per-family metrics against the shared ID test set, with an unweighted
/// average row. The result does not depend on input order.
pub fn build_report(scored: &[ScoredSample], threshold: &Threshold) -> Result<DetectionReport> {
    let (id, ood) = group_scores(scored)?;
    let mut families = Vec::with_capacity(ood.len());
    for (family, scores) in &ood {
        families.push(MetricsRow {
            family: family.clone(),
            fpr95: fpr_at_tpr(&id, scores, TPR_TARGET)?,
            auroc: auroc(&id, scores)?,
            pr_curve: pr_curve(&id, scores)?,
            confusion: Confusion::at(&id, scores, threshold),
        });
    }
    let average = AverageRow {
        fpr95: mean(families.iter().map(|r| r.fpr95)),
        auroc: mean(families.iter().map(|r| r.auroc)),
    };
    Ok(DetectionReport {
        method: "reconstruction".into(),
        families,
        average,
        threshold: threshold.clone(),
        id_test_count: id.len(),
        baselines: Vec::new(),
        config: serde_json::Value::Null,
        manifest_digest: String::new(),
    })
}

/// Threshold-free metrics for a comparison score.
pub fn summarize_method(method: &str, scored: &[ScoredSample]) -> Result<MethodSummary> {
    let (id, ood) = group_scores(scored)?;
    let mut families = Vec::with_capacity(ood.len());
    for (family, scores) in &ood {
        families.push((
            family.clone(),
            AverageRow {
                fpr95: fpr_at_tpr(&id, scores, TPR_TARGET)?,
                auroc: auroc(&id, scores)?,
            },
        ));
    }
    let average = AverageRow {
        fpr95: mean(families.iter().map(|f| f.1.fpr95)),
        auroc: mean(families.iter().map(|f| f.1.auroc)),
    };
    Ok(MethodSummary {
        method: method.into(),
        families,
        average,
    })
}

impl DetectionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Families as column groups of FPR95/AUROC (in percent), Average last,
    /// one line per method.
    pub fn render_table(&self) -> String {
        let mut groups: Vec<String> = self.families.iter().map(|r| r.family.clone()).collect();
        groups.push("Average".into());
        let label_w = std::iter::once(self.method.len())
            .chain(self.baselines.iter().map(|b| b.method.len()))
            .chain(std::iter::once("Method".len()))
            .max()
            .unwrap_or(6);
        let group_w = groups.iter().map(|g| g.len()).max().unwrap_or(0).max(15);

        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", "Dataset");
        for g in &groups {
            let _ = write!(out, " | {g:^group_w$}");
        }
        out.push('\n');
        let _ = write!(out, "{:<label_w$}", "Metrics");
        for _ in &groups {
            let _ = write!(out, " | {:^group_w$}", format!("{:>7} {:>7}", "FPR95", "AUROC"));
        }
        out.push('\n');
        let rule_len = label_w + groups.len() * (group_w + 3);
        out.push_str(&"-".repeat(rule_len));
        out.push('\n');

        let mut line = |name: &str, cells: Vec<AverageRow>| {
            let _ = write!(out, "{name:<label_w$}");
            for c in cells {
                let cell = format!("{:>7.2} {:>7.2}", 100.0 * c.fpr95, 100.0 * c.auroc);
                let _ = write!(out, " | {cell:^group_w$}");
            }
            out.push('\n');
        };
        let mut ours: Vec<AverageRow> = self
            .families
            .iter()
            .map(|r| AverageRow {
                fpr95: r.fpr95,
                auroc: r.auroc,
            })
            .collect();
        ours.push(self.average);
        line(&self.method, ours);
        for b in &self.baselines {
            let mut cells: Vec<AverageRow> = self
                .families
                .iter()
                .map(|r| {
                    b.families
                        .iter()
                        .find(|f| f.0 == r.family)
                        .map(|f| f.1)
                        .unwrap_or(AverageRow {
                            fpr95: f64::NAN,
                            auroc: f64::NAN,
                        })
                })
                .collect();
            cells.push(b.average);
            line(&b.method, cells);
        }

        let _ = writeln!(
            out,
            "\nthreshold tau = {:.9e} (max over {} calibration samples, sample {})",
            self.threshold.tau, self.threshold.calibration_count, self.threshold.calibration_max_id
        );
        for r in &self.families {
            let c = r.confusion;
            let _ = writeln!(
                out,
                "  {}: TP {} FN {} | FP {} TN {}",
                r.family, c.true_positive, c.false_negative, c.false_positive, c.true_negative
            );
        }
        out
    }
}
