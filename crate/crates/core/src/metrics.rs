//! Evaluation math: entropy, calibration, weighted P/R/F1 and one-vs-rest
//! AUROC. All functions are pure; argmax ties resolve to the lowest index.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("invalid probability vector: {0}")]
    Probability(String),
    #[error("class index {index} out of range for {n_classes} classes")]
    Class { index: usize, n_classes: usize },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("every class is degenerate (needs at least one positive and one negative)")]
    Degenerate,
    #[error("class counts differ: {0} vs {1}")]
    ClassCount(usize, usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// K stochastic passes plus the expected-mask point prediction for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub id: String,
    pub label: usize,
    /// `K × C`
    pub probs: Vec<Vec<f64>>,
    pub point_probs: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn n_classes(&self) -> usize {
        self.point_probs.len()
    }

    /// Column mean over the K passes.
    pub fn mean_probs(&self) -> Vec<f64> {
        let k = self.probs.len() as f64;
        let mut m = vec![0.0; self.n_classes()];
        for row in &self.probs {
            for (a, p) in m.iter_mut().zip(row) {
                *a += p;
            }
        }
        m.iter_mut().for_each(|a| *a /= k);
        m
    }

    pub fn prediction(&self) -> usize {
        argmax(&self.point_probs)
    }

    pub fn confidence(&self) -> f64 {
        self.point_probs[self.prediction()]
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.probs.is_empty() {
            return Err(MetricsError::Empty);
        }
        let c = self.n_classes();
        if self.label >= c {
            return Err(MetricsError::Class { index: self.label, n_classes: c });
        }
        for row in self.probs.iter().chain(std::iter::once(&self.point_probs)) {
            if row.len() != c {
                return Err(MetricsError::Length(format!("row of {} in sample `{}` with {c} classes", row.len(), self.id)));
            }
            check_probs(row)?;
        }
        Ok(())
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn check_probs(p: &[f64]) -> Result<(), MetricsError> {
    if p.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(MetricsError::Probability(format!("entry {x}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(MetricsError::Probability(format!("sums to {s}")));
    }
    Ok(())
}

/// Natural-log entropy with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64, MetricsError> {
    check_probs(p)?;
    Ok(-p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyKind {
    /// Entropy of the mean distribution over passes.
    #[default]
    Predictive,
    /// Mean of the per-pass entropies.
    MeanOfPasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub kind: EntropyKind,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population std across samples.
    pub std: f64,
    /// Mean over samples of the std of per-pass entropies.
    pub std_across_passes: f64,
    pub argmin_id: String,
    pub argmax_id: String,
    pub n: usize,
}

/// Per-sample uncertainty score in sample order.
pub fn sample_entropies(preds: &[PredictiveDistribution], kind: EntropyKind) -> Result<Vec<f64>, MetricsError> {
    preds
        .iter()
        .map(|p| {
            p.validate()?;
            match kind {
                EntropyKind::Predictive => entropy(&p.mean_probs()),
                EntropyKind::MeanOfPasses => {
                    let hs = p.probs.iter().map(|r| entropy(r)).collect::<Result<Vec<_>, _>>()?;
                    Ok(hs.iter().sum::<f64>() / hs.len() as f64)
                }
            }
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn entropy_summary(preds: &[PredictiveDistribution], kind: EntropyKind) -> Result<EntropySummary, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let h = sample_entropies(preds, kind)?;
    let mut lo = 0;
    let mut hi = 0;
    for (i, x) in h.iter().enumerate() {
        if *x < h[lo] {
            lo = i;
        }
        if *x > h[hi] {
            hi = i;
        }
    }
    let (mean, std) = mean_std(&h);
    let mut pass_std = 0.0;
    for p in preds {
        let hs = p.probs.iter().map(|r| entropy(r)).collect::<Result<Vec<_>, _>>()?;
        pass_std += mean_std(&hs).1;
    }
    Ok(EntropySummary {
        kind,
        min: h[lo],
        max: h[hi],
        mean,
        std,
        std_across_passes: pass_std / preds.len() as f64,
        argmin_id: preds[lo].id.clone(),
        argmax_id: preds[hi].id.clone(),
        n: preds.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
    pub conf_sum: f64,
    pub correct: usize,
}

impl CalibrationBin {
    pub fn avg_conf(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.conf_sum / self.count as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }

    pub fn gap(&self) -> f64 {
        (self.accuracy() - self.avg_conf()).abs()
    }
}

/// Reliability bins over `((m−1)/M, m/M]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub bins: Vec<CalibrationBin>,
    pub n: usize,
}

impl CalibrationBins {
    pub fn new(m: usize) -> Self {
        let bins = (0..m)
            .map(|i| CalibrationBin {
                bin_low: i as f64 / m as f64,
                bin_high: (i + 1) as f64 / m as f64,
                ..Default::default()
            })
            .collect();
        Self { bins, n: 0 }
    }

    /// Zero-based bin of a confidence; `0` goes to the first bin.
    pub fn bin_index(&self, conf: f64) -> usize {
        let m = self.bins.len();
        let i = (conf * m as f64).ceil() as usize;
        i.clamp(1, m) - 1
    }

    pub fn add(&mut self, conf: f64, correct: bool) {
        let i = self.bin_index(conf);
        let b = &mut self.bins[i];
        b.count += 1;
        b.conf_sum += conf;
        b.correct += usize::from(correct);
        self.n += 1;
    }

    pub fn score(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / self.n as f64 * b.gap())
            .sum()
    }

    /// Columns: bin_low, bin_high, count, avg_conf, accuracy, gap.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_low", "bin_high", "count", "avg_conf", "accuracy", "gap"])?;
        for b in &self.bins {
            out.write_record([
                b.bin_low.to_string(),
                b.bin_high.to_string(),
                b.count.to_string(),
                b.avg_conf().to_string(),
                b.accuracy().to_string(),
                b.gap().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// ECE over `(confidence, correct)` pairs.
pub fn ece_from_pairs(pairs: &[(f64, bool)], m: usize) -> Result<(f64, CalibrationBins), MetricsError> {
    if m == 0 {
        return Err(MetricsError::Length("at least one bin is required".into()));
    }
    let mut bins = CalibrationBins::new(m);
    for &(c, ok) in pairs {
        if !(0.0..=1.0).contains(&c) {
            return Err(MetricsError::Probability(format!("confidence {c}")));
        }
        bins.add(c, ok);
    }
    Ok((bins.score(), bins))
}

/// ECE with confidence = max of the expected-mask probabilities.
pub fn ece(preds: &[PredictiveDistribution], m: usize) -> Result<(f64, CalibrationBins), MetricsError> {
    let pairs: Vec<(f64, bool)> = preds
        .iter()
        .map(|p| (p.confidence(), p.prediction() == p.label))
        .collect();
    ece_from_pairs(&pairs, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Support-weighted precision, recall and F1 (0/0 counts as 0).
pub fn weighted_prf(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<Prf, MetricsError> {
    if labels.len() != preds.len() {
        return Err(MetricsError::Length(format!("{} labels, {} predictions", labels.len(), preds.len())));
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&y, &p) in labels.iter().zip(preds) {
        for index in [y, p] {
            if index >= n_classes {
                return Err(MetricsError::Class { index, n_classes });
            }
        }
        support[y] += 1;
        predicted[p] += 1;
        if y == p {
            tp[y] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let n = labels.len() as f64;
    let mut out = Prf {
        accuracy: ratio(tp.iter().sum(), labels.len()),
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    for c in 0..n_classes {
        let p = ratio(tp[c], predicted[c]);
        let r = ratio(tp[c], support[c]);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let w = support[c] as f64 / n;
        out.precision += w * p;
        out.recall += w * r;
        out.f1 += w * f;
    }
    Ok(out)
}

/// Binary AUC by pair enumeration: P(score⁺ > score⁻) + ½·P(tie).
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, p)| **p).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, p)| !**p).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for a in &pos {
        for b in &neg {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Support-weighted one-vs-rest AUROC; classes without both positives and
/// negatives are skipped and excluded from the weights.
pub fn auroc_weighted_ovr(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length(format!("{} score rows, {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let c = scores[0].len();
    if let Some(&index) = labels.iter().find(|&&y| y >= c) {
        return Err(MetricsError::Class { index, n_classes: c });
    }
    let mut total = 0.0;
    let mut weight = 0usize;
    for k in 0..c {
        let col: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        if let Some(a) = auc_binary(&col, &pos) {
            let support = pos.iter().filter(|p| **p).count();
            total += a * support as f64;
            weight += support;
        }
    }
    if weight == 0 {
        return Err(MetricsError::Degenerate);
    }
    Ok(total / weight as f64)
}

/// Serialized evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when every class is degenerate.
    pub auroc: Option<f64>,
    pub entropy: EntropySummary,
    pub ece: f64,
    pub calibration: CalibrationBins,
    pub n_samples: usize,
    pub n_classes: usize,
    pub passes: usize,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn compute(
        preds: &[PredictiveDistribution],
        n_bins: usize,
        kind: EntropyKind,
        config: serde_json::Value,
    ) -> Result<Self, MetricsError> {
        let first = preds.first().ok_or(MetricsError::Empty)?;
        let n_classes = first.n_classes();
        let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
        let predictions: Vec<usize> = preds.iter().map(|p| p.prediction()).collect();
        let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.point_probs.clone()).collect();
        let prf = weighted_prf(&labels, &predictions, n_classes)?;
        let auroc = match auroc_weighted_ovr(&scores, &labels) {
            Ok(a) => Some(a),
            Err(MetricsError::Degenerate) => None,
            Err(e) => return Err(e),
        };
        let entropy = entropy_summary(preds, kind)?;
        let (ece, calibration) = ece(preds, n_bins)?;
        Ok(Self {
            accuracy: 100.0 * prf.accuracy,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            auroc,
            entropy,
            ece,
            calibration,
            n_samples: preds.len(),
            n_classes,
            passes: first.probs.len(),
            config,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodComparison {
    pub mean_entropy_id: f64,
    pub mean_entropy_ood: f64,
    pub delta_mean_entropy: f64,
    pub ece_id: f64,
    pub ece_ood: f64,
    pub delta_ece: f64,
    pub ood_entropy_higher: bool,
    pub ood_ece_not_lower: bool,
}

pub fn compare_ood(id: &MetricsReport, ood: &MetricsReport) -> Result<OodComparison, MetricsError> {
    if id.n_classes != ood.n_classes {
        return Err(MetricsError::ClassCount(id.n_classes, ood.n_classes));
    }
    Ok(OodComparison {
        mean_entropy_id: id.entropy.mean,
        mean_entropy_ood: ood.entropy.mean,
        delta_mean_entropy: ood.entropy.mean - id.entropy.mean,
        ece_id: id.ece,
        ece_ood: ood.ece,
        delta_ece: ood.ece - id.ece,
        ood_entropy_higher: ood.entropy.mean > id.entropy.mean,
        ood_ece_not_lower: ood.ece >= id.ece,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pd(id: &str, label: usize, rows: Vec<Vec<f64>>) -> PredictiveDistribution {
        PredictiveDistribution {
            id: id.into(),
            label,
            point_probs: rows[0].clone(),
            probs: rows,
        }
    }

    #[test]
    fn entropy_closed_forms() {
        assert!((entropy(&[0.125; 8]).unwrap() - 8f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.125; 8]).unwrap() - 2.079_441_5).abs() < 1e-7);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-7);
        assert!(entropy(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn summary_of_two_samples() {
        let preds = vec![
            pd("a", 0, vec![vec![1.0, 0.0]; 3]),
            pd("b", 0, vec![vec![0.5, 0.5]; 3]),
        ];
        let s = entropy_summary(&preds, EntropyKind::Predictive).unwrap();
        assert!((s.mean - 0.346_573_6).abs() < 1e-7);
        assert_eq!(s.min, 0.0);
        assert_eq!(s.argmin_id, "a");
        assert_eq!(s.argmax_id, "b");
        assert!(entropy_summary(&[], EntropyKind::Predictive).is_err());
    }

    #[test]
    fn predictive_versus_mean_of_passes() {
        let p = vec![pd("x", 0, vec![vec![1.0, 0.0], vec![0.0, 1.0]])];
        let pred = entropy_summary(&p, EntropyKind::Predictive).unwrap();
        let mop = entropy_summary(&p, EntropyKind::MeanOfPasses).unwrap();
        assert!((pred.mean - 2f64.ln()).abs() < 1e-12);
        assert_eq!(mop.mean, 0.0);
    }

    #[test]
    fn ece_hand_case() {
        let (s, bins) = ece_from_pairs(&[(0.8, true), (0.6, false)], 10).unwrap();
        assert!((s - 0.4).abs() < 1e-12);
        assert_eq!(bins.bins[7].count, 1);
        assert_eq!(bins.bins[5].count, 1);
        let (s, _) = ece_from_pairs(&[(1.0, true); 5], 10).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn bin_edges() {
        let b = CalibrationBins::new(10);
        assert_eq!(b.bin_index(0.0), 0);
        assert_eq!(b.bin_index(0.1), 0);
        assert_eq!(b.bin_index(0.1000001), 1);
        assert_eq!(b.bin_index(1.0), 9);
    }

    #[test]
    fn calibration_csv_columns() {
        let (_, bins) = ece_from_pairs(&[(0.8, true)], 2).unwrap();
        let mut buf = Vec::new();
        bins.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "bin_low,bin_high,count,avg_conf,accuracy,gap");
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn prf_hand_case() {
        let r = weighted_prf(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((r.f1 - (0.5 * 2.0 / 3.0 + 0.5 * 0.8)).abs() < 1e-12);
        assert!((r.f1 - 0.7333).abs() < 1e-4);
        assert!((r.precision - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(r.recall, 0.75);
        let single = weighted_prf(&[0, 0, 1, 1], &[1, 1, 1, 1], 2).unwrap();
        assert_eq!(single.recall, 0.5);
        let perfect = weighted_prf(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1, perfect.accuracy), (1.0, 1.0, 1.0, 1.0));
        assert!(weighted_prf(&[0, 3], &[0, 0], 2).is_err());
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(auc_binary(&[0.1, 0.2, 0.9], &[false, false, true]), Some(1.0));
        assert_eq!(auc_binary(&[0.9, 0.2, 0.1], &[false, false, true]), Some(0.0));
        assert_eq!(auc_binary(&[0.5, 0.5], &[false, true]), Some(0.5));
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert_eq!(auroc_weighted_ovr(&scores, &[0, 1]).unwrap(), 1.0);
        assert!(matches!(auroc_weighted_ovr(&scores, &[0, 0]), Err(MetricsError::Degenerate)));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.3, 0.3, 0.3]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn ood_deltas() {
        let preds = vec![pd("a", 0, vec![vec![0.7, 0.3]; 2]), pd("b", 1, vec![vec![0.2, 0.8]; 2])];
        let r = MetricsReport::compute(&preds, 10, EntropyKind::Predictive, serde_json::Value::Null).unwrap();
        let c = compare_ood(&r, &r).unwrap();
        assert_eq!(c.delta_mean_entropy, 0.0);
        assert_eq!(c.delta_ece, 0.0);
        assert!(!c.ood_entropy_higher);
        let mut ood = r.clone();
        ood.entropy.mean = r.entropy.mean + 0.3;
        assert!(compare_ood(&r, &ood).unwrap().ood_entropy_higher);
    }
}
