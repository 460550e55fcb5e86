//! Pixel-level precision–recall evaluation.
//!
//! Pixels are pooled across every image of a test set (micro-averaging)
//! before any metric is computed. A pixel is predicted positive iff its
//! probability is `>=` the threshold.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob_map::ProbabilityMap;
use crate::raster::Mask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// `None` when nothing is predicted positive.
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `None` when there are no positive pixels.
    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// Harmonic mean of precision and recall; 0 when both vanish.
    pub fn f1(&self) -> f64 {
        f1_score(self.precision().unwrap_or(0.0), self.recall().unwrap_or(0.0))
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn confusion_at(pred: &ProbabilityMap, mask: &Mask, threshold: f64) -> Result<Confusion> {
    if pred.height != mask.height() || pred.width != mask.width() {
        return Err(Error::Input(format!(
            "prediction `{}` is {}x{}, mask is {}x{}",
            pred.source_id,
            pred.height,
            pred.width,
            mask.height(),
            mask.width()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &t) in pred.values.iter().zip(mask.data()) {
        match (p >= threshold, t == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Confusion,
}

/// Precision–recall points ordered by decreasing threshold (so recall is
/// non-decreasing along the vector). Thresholds at which nothing is
/// predicted positive are omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<CurvePoint>,
    pub positives: u64,
    pub total: u64,
}

impl PrCurve {
    /// Builds the curve from pooled `(score, is_positive)` pairs, sweeping every
    /// distinct score plus the thresholds 0 and 1.
    pub fn from_scores(mut scores: Vec<(f64, bool)>) -> Result<Self> {
        let total = scores.len() as u64;
        let positives = scores.iter().filter(|s| s.1).count() as u64;
        if positives == 0 {
            return Err(Error::UndefinedMetric("no positive pixels in the evaluated set".into()));
        }
        scores.sort_by(|a, b| b.0.total_cmp(&a.0));

        let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).chain([0.0, 1.0]).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();

        let mut points = Vec::with_capacity(thresholds.len());
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut i = 0;
        for t in thresholds {
            while i < scores.len() && scores[i].0 >= t {
                if scores[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            if tp + fp == 0 {
                continue;
            }
            let counts = Confusion {
                tp,
                fp,
                fn_: positives - tp,
                tn: total - positives - fp,
            };
            points.push(CurvePoint {
                threshold: t,
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / positives as f64,
                counts,
            });
        }
        Ok(Self {
            points,
            positives,
            total,
        })
    }

    pub fn from_maps(pairs: &[(&ProbabilityMap, &Mask)]) -> Result<Self> {
        let mut scores = Vec::new();
        for (pred, mask) in pairs {
            if pred.height != mask.height() || pred.width != mask.width() {
                return Err(Error::Input(format!(
                    "prediction `{}` and its mask differ in size",
                    pred.source_id
                )));
            }
            scores.extend(pred.values.iter().zip(mask.data()).map(|(&p, &t)| (p, t == 1)));
        }
        Self::from_scores(scores)
    }

    /// Trapezoidal area under precision over recall, with the first defined
    /// precision extended back to recall 0.
    pub fn auc(&self) -> f64 {
        let Some(first) = self.points.first() else { return 0.0 };
        let (mut prev_r, mut prev_p) = (0.0, first.precision);
        let mut area = 0.0;
        for p in &self.points {
            area += (p.recall - prev_r) * (p.precision + prev_p) / 2.0;
            prev_r = p.recall;
            prev_p = p.precision;
        }
        area
    }

    pub fn best_f1(&self) -> Option<&CurvePoint> {
        self.points
            .iter()
            .max_by(|a, b| f1_score(a.precision, a.recall).total_cmp(&f1_score(b.precision, b.recall)))
    }

    /// At most `max_points` points, evenly spaced by index, endpoints kept.
    pub fn thinned(&self, max_points: usize) -> Vec<CurvePoint> {
        let n = self.points.len();
        if n <= max_points || max_points < 2 {
            return self.points.clone();
        }
        (0..max_points)
            .map(|k| self.points[k * (n - 1) / (max_points - 1)])
            .collect()
    }
}

/// Area under the pooled precision–recall curve.
pub fn pr_auc(pairs: &[(&ProbabilityMap, &Mask)]) -> Result<f64> {
    Ok(PrCurve::from_maps(pairs)?.auc())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
}

impl OperatingPoint {
    fn from_counts(threshold: f64, counts: Confusion) -> Self {
        let precision = counts.precision().unwrap_or(0.0);
        let recall = counts.recall().unwrap_or(0.0);
        Self {
            threshold,
            precision,
            recall,
            f1: f1_score(precision, recall),
            counts,
        }
    }
}

/// Metric bundle for one prediction source over a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc_pr: f64,
    /// Operating point at the fixed threshold (0.5 by default).
    pub fixed: OperatingPoint,
    /// Operating point maximizing F1 over the curve.
    pub best: OperatingPoint,
    #[serde(skip)]
    pub pr_curve: Vec<CurvePoint>,
}

impl MetricsReport {
    pub fn compute(pairs: &[(&ProbabilityMap, &Mask)], fixed_threshold: f64) -> Result<Self> {
        let curve = PrCurve::from_maps(pairs)?;
        let mut fixed = Confusion::default();
        for (p, m) in pairs {
            fixed.merge(&confusion_at(p, m, fixed_threshold)?);
        }
        Ok(Self::from_curve(curve, fixed_threshold, fixed))
    }

    /// Same as [`MetricsReport::compute`] from pooled `(score, is_positive)` pairs.
    pub fn from_scores(scores: Vec<(f64, bool)>, fixed_threshold: f64) -> Result<Self> {
        let mut fixed = Confusion::default();
        for &(s, t) in &scores {
            match (s >= fixed_threshold, t) {
                (true, true) => fixed.tp += 1,
                (true, false) => fixed.fp += 1,
                (false, true) => fixed.fn_ += 1,
                (false, false) => fixed.tn += 1,
            }
        }
        Ok(Self::from_curve(PrCurve::from_scores(scores)?, fixed_threshold, fixed))
    }

    fn from_curve(curve: PrCurve, fixed_threshold: f64, fixed: Confusion) -> Self {
        let best = curve
            .best_f1()
            .map(|p| OperatingPoint::from_counts(p.threshold, p.counts))
            .unwrap_or_else(|| OperatingPoint::from_counts(1.0, Confusion::default()));
        Self {
            auc_pr: curve.auc(),
            fixed: OperatingPoint::from_counts(fixed_threshold, fixed),
            best,
            pr_curve: curve.points,
        }
    }
}

/// Writes `threshold,precision,recall` rows (with header).
pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut emit = || -> std::io::Result<()> {
        writeln!(f, "threshold,precision,recall")?;
        for p in points {
            writeln!(f, "{},{},{}", p.threshold, p.precision, p.recall)?;
        }
        f.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Scale;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn map(values: Vec<f64>) -> ProbabilityMap {
        let n = values.len();
        ProbabilityMap::new(1, n, values, Scale::Full, "t").unwrap()
    }

    fn mask(bits: Vec<u8>) -> Mask {
        let n = bits.len();
        Mask::from_vec(1, n, bits).unwrap()
    }

    /// Brute force: for every candidate threshold count by direct scan, order
    /// by decreasing threshold, extend the first precision to recall 0 and
    /// integrate with trapezoids.
    pub(crate) fn exhaustive_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut ts: Vec<f64> = scores.to_vec();
        ts.push(0.0);
        ts.push(1.0);
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for t in ts {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (s, l) in scores.iter().zip(labels) {
                if *s >= t {
                    if *l {
                        tp += 1.0
                    } else {
                        fp += 1.0
                    }
                }
            }
            if tp + fp > 0.0 {
                pts.push((tp / pos, tp / (tp + fp)));
            }
        }
        let mut area = 0.0;
        let (mut r0, mut p0) = (0.0, pts[0].1);
        for (r, p) in pts {
            area += (r - r0) * (p + p0) / 2.0;
            r0 = r;
            p0 = p;
        }
        area
    }

    #[test]
    fn confusion_examples() {
        let c = confusion_at(&map(vec![1.0, 0.0, 1.0]), &mask(vec![1, 0, 1]), 0.7).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let c = confusion_at(&map(vec![1.0; 4]), &mask(vec![0; 4]), 0.5).unwrap();
        assert_eq!((c.tp, c.fp), (0, 4));
        let c = Confusion {
            tp: 2,
            fp: 1,
            fn_: 2,
            tn: 0,
        };
        assert!((c.precision().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.recall().unwrap() - 0.5).abs() < 1e-15);
        assert!((c.f1() - 4.0 / 7.0).abs() < 1e-15);
        assert!(confusion_at(&map(vec![0.0; 3]), &mask(vec![0; 4]), 0.5).is_err());
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let m = mask(vec![1, 0, 0, 1, 0, 0, 0, 0]);
        let perfect = map(m.data().iter().map(|&v| v as f64).collect());
        assert!((pr_auc(&[(&perfect, &m)]).unwrap() - 1.0).abs() < 1e-15);
        let constant = map(vec![0.3; 8]);
        assert!((pr_auc(&[(&constant, &m)]).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn no_positives_is_undefined() {
        let r = pr_auc(&[(&map(vec![0.2, 0.4]), &mask(vec![0, 0]))]);
        assert!(matches!(r, Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn eight_pixel_toy_matches_oracle() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2];
        let labels = [1u8, 1, 0, 1, 0, 0, 0, 0];
        let oracle = exhaustive_auc(&scores, &labels.map(|l| l == 1));
        let got = pr_auc(&[(&map(scores.to_vec()), &mask(labels.to_vec()))]).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        // hand value: points (1/3,1),(2/3,1),(2/3,2/3),(1,3/4),..,(1,3/8)
        let hand = 2.0 / 3.0 + (1.0 / 3.0) * (2.0 / 3.0 + 0.75) / 2.0;
        assert!((got - hand).abs() < 1e-12);
    }

    #[test]
    fn random_scores_converge_to_prevalence() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let n = 1_000_000;
        let prevalence = 0.1;
        let scores: Vec<(f64, bool)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>() < prevalence)).collect();
        let emp = scores.iter().filter(|s| s.1).count() as f64 / n as f64;
        let auc = PrCurve::from_scores(scores).unwrap().auc();
        assert!((auc - emp).abs() < 0.02, "{auc} vs {emp}");
    }

    #[test]
    fn report_picks_best_f1_and_fixed_threshold() {
        let m = mask(vec![1, 1, 0, 1, 0, 0, 0, 0]);
        let p = map(vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2]);
        let r = MetricsReport::compute(&[(&p, &m)], 0.5).unwrap();
        assert_eq!(r.fixed.counts, Confusion { tp: 3, fp: 2, fn_: 0, tn: 3 });
        assert!((r.best.f1 - f1_score(r.best.precision, r.best.recall)).abs() < 1e-12);
        assert!((r.best.threshold - 0.6).abs() < 1e-12);
        for w in r.pr_curve.windows(2) {
            assert!(w[1].recall >= w[0].recall && w[1].threshold < w[0].threshold);
        }
    }

    proptest! {
        #[test]
        fn matches_oracle_on_small_instances(
            data in proptest::collection::vec((0u32..20, any::<bool>()), 1..64)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 19.0).collect();
            let mut labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            labels[0] = true;
            let got = PrCurve::from_scores(scores.iter().copied().zip(labels.iter().copied()).collect()).unwrap().auc();
            prop_assert!((got - exhaustive_auc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_monotone_transforms(
            data in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..200)
        ) {
            let mut pairs = data.clone();
            pairs[0].1 = true;
            let base = PrCurve::from_scores(pairs.clone()).unwrap().auc();
            for f in [|x: f64| x * x, |x: f64| x.sqrt(), |x: f64| (x.exp() - 1.0) / (1f64.exp() - 1.0)] {
                let t: Vec<(f64, bool)> = pairs.iter().map(|&(s, l)| (f(s), l)).collect();
                let auc = PrCurve::from_scores(t).unwrap().auc();
                prop_assert!((auc - base).abs() < 1e-12);
            }
        }
    }
}
