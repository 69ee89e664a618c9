//! Classification metrics, fold aggregation and table rendering.
//!
//! Conventions: argmax ties go to the lowest class index; AUC counts score
//! ties as one half; precision/recall/F1 with a zero denominator are 0 and
//! set a degenerate flag; binary tasks report the positive class 1,
//! multi-class tasks report macro averages and one-vs-rest macro AUC; fold
//! spreads are population standard deviations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// `(N, C)` class scores.
    pub scores: Tensor,
    pub labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(scores: Tensor, labels: Vec<usize>) -> Result<Self> {
        if scores.ndim() != 2 {
            return Err(Error::Shape(format!("scores must be (N, C), got {:?}", scores.shape())));
        }
        let (n, c) = (scores.shape()[0], scores.shape()[1]);
        if n == 0 || c == 0 {
            return Err(Error::Empty("prediction set".into()));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} score rows", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {l} out of range for {c} classes")));
        }
        if scores.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prediction scores".into()));
        }
        Ok(PredictionSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.num_classes();
        &self.scores.data()[i * c..(i + 1) * c]
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.row(i))).collect()
    }

    /// Row-wise softmax of the scores.
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                let r = self.row(i);
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy(p: &PredictionSet) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Empty("prediction set".into()));
    }
    let hits = p.predictions().iter().zip(&p.labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / p.len() as f64)
}

/// Mann–Whitney AUC: `P(score⁺ > score⁻) + ½·P(tie)`.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative samples".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks (1-based) over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Binary AUC on the class-1 probability, or one-vs-rest macro AUC.
pub fn auc(p: &PredictionSet) -> Result<f64> {
    let probs = p.probabilities();
    let c = p.num_classes();
    if c < 2 {
        return Err(Error::UndefinedMetric("AUC needs at least two classes".into()));
    }
    let ovr = |k: usize| {
        let s: Vec<f64> = probs.iter().map(|r| r[k]).collect();
        let pos: Vec<bool> = p.labels.iter().map(|&l| l == k).collect();
        auc_binary(&s, &pos)
    };
    if c == 2 {
        return ovr(1);
    }
    let mut total = 0.0;
    for k in 0..c {
        total += ovr(k)?;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

pub fn precision_recall_f1(preds: &[usize], labels: &[usize], positive: usize) -> Prf {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Prf {
        precision,
        recall,
        f1,
        degenerate,
    }
}

/// Unweighted mean of per-class precision, recall and F1.
pub fn macro_prf(preds: &[usize], labels: &[usize], classes: usize) -> Prf {
    let per: Vec<Prf> = (0..classes).map(|k| precision_recall_f1(preds, labels, k)).collect();
    let mean = |f: fn(&Prf) -> f64| per.iter().map(f).sum::<f64>() / classes as f64;
    Prf {
        precision: mean(|p| p.precision),
        recall: mean(|p| p.recall),
        f1: mean(|p| p.f1),
        degenerate: per.iter().any(|p| p.degenerate),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

impl MetricValue {
    pub fn single(v: f64) -> Self {
        MetricValue { mean: v, std: None }
    }

    /// Population mean and standard deviation.
    pub fn aggregate(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MetricValue {
            mean,
            std: Some(var.sqrt()),
        }
    }

    /// Percent with two decimals, e.g. `76.47±3.53`.
    pub fn percent(&self) -> String {
        match self.std {
            Some(s) => format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * s),
            None => format!("{:.2}", 100.0 * self.mean),
        }
    }

    /// Fraction with four decimals, e.g. `0.9553±0.0120`.
    pub fn fraction(&self) -> String {
        match self.std {
            Some(s) => format!("{:.4}±{:.4}", self.mean, s),
            None => format!("{:.4}", self.mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: MetricValue,
    pub auc: MetricValue,
    pub f1: MetricValue,
    pub precision: MetricValue,
    pub recall: MetricValue,
    pub per_class: Vec<ClassMetrics>,
    pub n_folds: usize,
    /// Set when any precision/recall/F1 hit a zero denominator.
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<MetricsReport>,
}

/// Metrics of one prediction set. `class_names` may be empty.
pub fn evaluate(p: &PredictionSet, class_names: &[String]) -> Result<MetricsReport> {
    let c = p.num_classes();
    let preds = p.predictions();
    let acc = accuracy(p)?;
    let auc = auc(p)?;
    let headline = if c == 2 {
        precision_recall_f1(&preds, &p.labels, 1)
    } else {
        macro_prf(&preds, &p.labels, c)
    };
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let m = precision_recall_f1(&preds, &p.labels, k);
            ClassMetrics {
                class: k,
                name: class_names.get(k).cloned().unwrap_or_else(|| k.to_string()),
                support: p.labels.iter().filter(|&&l| l == k).count(),
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                degenerate: m.degenerate,
            }
        })
        .collect();
    Ok(MetricsReport {
        accuracy: MetricValue::single(acc),
        auc: MetricValue::single(auc),
        f1: MetricValue::single(headline.f1),
        precision: MetricValue::single(headline.precision),
        recall: MetricValue::single(headline.recall),
        per_class,
        n_folds: 1,
        degenerate: headline.degenerate,
        folds: Vec::new(),
    })
}

/// Run every fold and aggregate; see [`aggregate`].
pub fn cross_validate<F>(k: usize, mut run: F) -> Result<MetricsReport>
where
    F: FnMut(usize) -> Result<MetricsReport>,
{
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs k >= 2, got {k}")));
    }
    let reports = (0..k).map(&mut run).collect::<Result<Vec<_>>>()?;
    aggregate(reports)
}

/// Mean and population std of each headline metric across fold reports;
/// per-class entries are averaged and supports summed.
pub fn aggregate(folds: Vec<MetricsReport>) -> Result<MetricsReport> {
    if folds.len() < 2 {
        return Err(Error::Config(format!("aggregation needs >= 2 fold reports, got {}", folds.len())));
    }
    let classes = folds[0].per_class.len();
    if folds.iter().any(|f| f.per_class.len() != classes) {
        return Err(Error::Data("fold reports disagree on the number of classes".into()));
    }
    let agg = |f: fn(&MetricsReport) -> f64| MetricValue::aggregate(&folds.iter().map(f).collect::<Vec<_>>());
    let n = folds.len() as f64;
    let per_class = (0..classes)
        .map(|k| {
            let first = &folds[0].per_class[k];
            let mean = |f: fn(&ClassMetrics) -> f64| folds.iter().map(|r| f(&r.per_class[k])).sum::<f64>() / n;
            ClassMetrics {
                class: k,
                name: first.name.clone(),
                support: folds.iter().map(|r| r.per_class[k].support).sum(),
                precision: mean(|c| c.precision),
                recall: mean(|c| c.recall),
                f1: mean(|c| c.f1),
                degenerate: folds.iter().any(|r| r.per_class[k].degenerate),
            }
        })
        .collect();
    Ok(MetricsReport {
        accuracy: agg(|r| r.accuracy.mean),
        auc: agg(|r| r.auc.mean),
        f1: agg(|r| r.f1.mean),
        precision: agg(|r| r.precision.mean),
        recall: agg(|r| r.recall.mean),
        per_class,
        n_folds: folds.len(),
        degenerate: folds.iter().any(|f| f.degenerate),
        folds,
    })
}

/// Plain-text table with left-aligned, space-padded columns.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&width)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join(" | ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

impl MetricsReport {
    /// ACC, precision and recall in percent; AUC and F1 as fractions.
    pub fn table_row(&self) -> Vec<String> {
        vec![
            self.accuracy.percent(),
            self.auc.fraction(),
            self.f1.fraction(),
            self.precision.percent(),
            self.recall.percent(),
        ]
    }

    pub const TABLE_HEADER: [&'static str; 5] = ["ACC", "AUC", "F1", "Precision", "Recall"];

    /// Headline metrics, then per-fold rows when present.
    pub fn render(&self) -> String {
        let mut header = vec!["Run"];
        header.extend(Self::TABLE_HEADER);
        let mut rows = Vec::new();
        for (i, f) in self.folds.iter().enumerate() {
            let mut r = vec![format!("fold {i}")];
            r.extend(f.table_row());
            rows.push(r);
        }
        let mut r = vec![if self.folds.is_empty() { "test".to_string() } else { "mean±std".to_string() }];
        r.extend(self.table_row());
        rows.push(r);
        let mut out = render_table(&header, &rows);
        if self.degenerate {
            out.push_str("note: a precision/recall denominator was zero; affected values are reported as 0\n");
        }
        out
    }
}
