//! Correlation and classification metrics.
//!
//! Scores follow the model's polarity (higher = blurrier) and the positive
//! class of every binary metric is "blurry". Degenerate inputs (a single class,
//! constant vectors) produce [`MetricError::Undefined`] rather than a number.

use std::io::Write as _;
use std::path::Path;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("undefined: {0}")]
    Undefined(&'static str),
}

pub type MetricResult = std::result::Result<f64, MetricError>;

/// Highest absolute z-level still counted as sharp.
pub const DEFAULT_SHARP_MAX_ZLEVEL: i64 = 2;

fn check_pair<A, B>(a: &[A], b: &[B], min_len: usize) -> std::result::Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < min_len {
        return Err(MetricError::TooFew {
            needed: min_len,
            got: a.len(),
        });
    }
    Ok(())
}

/// Pearson linear correlation coefficient.
pub fn plcc(predictions: &[f64], labels: &[f64]) -> MetricResult {
    check_pair(predictions, labels, 2)?;
    let n = predictions.len() as f64;
    let mp = predictions.iter().sum::<f64>() / n;
    let ml = labels.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &l) in predictions.iter().zip(labels) {
        let (dp, dl) = (p - mp, l - ml);
        sxy += dp * dl;
        sxx += dp * dp;
        syy += dl * dl;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Undefined("constant input has no correlation"));
    }
    if !(sxx.is_finite() && syy.is_finite() && sxy.is_finite()) {
        return Err(MetricError::Undefined("non-finite input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(predictions: &[f64], labels: &[f64]) -> MetricResult {
    check_pair(predictions, labels, 2)?;
    plcc(&average_ranks(predictions), &average_ranks(labels))
}

fn class_counts(labels: &[bool]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    (pos, labels.len() as u64 - pos)
}

/// Groups sample indices by equal score, ordered by score.
fn tie_groups(scores: &[f64], descending: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        if descending {
            ord.reverse()
        } else {
            ord
        }
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve as the Mann–Whitney statistic
/// `P(s_pos > s_neg) + ½·P(s_pos = s_neg)`; exact, no binning.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> MetricResult {
    check_pair(scores, labels, 1)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined("ROC-AUC needs both classes"));
    }
    // Twice the U statistic, kept integral so the result is exact.
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    for group in tie_groups(scores, false) {
        let gp = group.iter().filter(|&&i| labels[i]).count() as u64;
        let gn = group.len() as u64 - gp;
        twice_u += 2 * gp * neg_below + gp * gn;
        neg_below += gn;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Average precision over the descending-score ranking, with every group of
/// tied scores treated as a single threshold step.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> MetricResult {
    check_pair(scores, labels, 1)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(MetricError::Undefined("PR-AUC needs at least one positive"));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for group in tie_groups(scores, true) {
        let gp = group.iter().filter(|&&i| labels[i]).count() as u64;
        tp += gp;
        fp += group.len() as u64 - gp;
        if gp > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (gp as f64 / pos as f64);
        }
    }
    Ok(ap)
}

/// Blurry (`true`) for `z > sharp_max`, sharp otherwise.
pub fn binarize_zlevels(z: &[i64], sharp_max: i64) -> Result<Vec<bool>> {
    z.iter()
        .map(|&level| {
            if level < 0 {
                Err(crate::Error::Argument(format!(
                    "z-level must be non-negative, got {level}"
                )))
            } else {
                Ok(level > sharp_max)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    /// Scores strictly above this are classified blurry.
    pub value: f64,
    /// Sensitivity + specificity − 1 at `value`.
    pub youden_j: f64,
}

/// Threshold maximizing Youden's J over midpoints of adjacent distinct scores.
/// Ties go to the lower threshold. If all scores are equal the common score is
/// returned with `J = 0`.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> std::result::Result<Threshold, MetricError> {
    check_pair(scores, labels, 1)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined("threshold selection needs both classes"));
    }
    let groups = tie_groups(scores, false);
    if groups.len() == 1 {
        return Ok(Threshold {
            value: scores[0],
            youden_j: 0.0,
        });
    }
    // Sweep upward: everything at or below the current group is predicted sharp.
    let (mut pos_below, mut neg_below) = (0u64, 0u64);
    let mut best: Option<Threshold> = None;
    for pair in groups.windows(2) {
        let gp = pair[0].iter().filter(|&&i| labels[i]).count() as u64;
        pos_below += gp;
        neg_below += pair[0].len() as u64 - gp;
        let tpr = (pos - pos_below) as f64 / pos as f64;
        let fpr = (neg - neg_below) as f64 / neg as f64;
        let j = tpr - fpr;
        let value = (scores[pair[0][0]] + scores[pair[1][0]]) / 2.0;
        if best.is_none_or(|b| j > b.youden_j) {
            best = Some(Threshold { value, youden_j: j });
        }
    }
    Ok(best.expect("at least two groups"))
}

/// One scored sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePrediction {
    pub id: String,
    pub prediction: f64,
    /// Ground truth as stored in the manifest.
    pub label: f64,
    /// Metric class: `true` = blurry.
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SamplePrediction>,
    pub srcc: MetricResult,
    pub plcc: MetricResult,
    pub roc_auc: MetricResult,
    pub pr_auc: MetricResult,
    pub n_positive: usize,
    pub n_negative: usize,
    pub threshold: Option<Threshold>,
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SamplePrediction>) -> Self {
        let preds: Vec<f64> = samples.iter().map(|s| s.prediction).collect();
        let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
        let positives: Vec<bool> = samples.iter().map(|s| s.positive).collect();
        let n_positive = positives.iter().filter(|&&p| p).count();
        Self {
            srcc: srcc(&preds, &labels),
            plcc: plcc(&preds, &labels),
            roc_auc: roc_auc(&preds, &positives),
            pr_auc: pr_auc(&preds, &positives),
            threshold: select_threshold(&preds, &positives).ok(),
            n_positive,
            n_negative: samples.len() - n_positive,
            samples,
        }
    }

    /// `key=value` pairs for the summary block, in a fixed order.
    pub fn summary(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("samples".to_string(), self.samples.len().to_string()),
            ("n_positive".to_string(), self.n_positive.to_string()),
            ("n_negative".to_string(), self.n_negative.to_string()),
            ("positive_class".to_string(), "blurry".to_string()),
        ];
        for (name, value) in [
            ("srcc", &self.srcc),
            ("plcc", &self.plcc),
            ("roc_auc", &self.roc_auc),
            ("pr_auc", &self.pr_auc),
        ] {
            out.push((name.to_string(), format_metric(value)));
        }
        out.push((
            "threshold".to_string(),
            self.threshold
                .map_or_else(|| "nan".to_string(), |t| format!("{:.6}", t.value)),
        ));
        out
    }

    /// Per-sample rows: `id,prediction,label,positive`.
    pub fn write_csv(&self, path: impl AsRef<Path>, comment: &str) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "# {comment}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["id", "prediction", "label", "positive"])?;
        for s in &self.samples {
            w.write_record([
                s.id.clone(),
                format!("{:.9}", s.prediction),
                s.label.to_string(),
                u8::from(s.positive).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn format_metric(value: &MetricResult) -> String {
    match value {
        Ok(v) => format!("{v:.6}"),
        Err(e) => format!("nan ({e})"),
    }
}

/// Mean of the defined values and how many were defined.
pub fn mean_defined<'a>(values: impl IntoIterator<Item = &'a MetricResult>) -> MetricResult {
    let defined: Vec<f64> = values.into_iter().filter_map(|v| v.as_ref().ok().copied()).collect();
    if defined.is_empty() {
        return Err(MetricError::Undefined("no defined values to average"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}
