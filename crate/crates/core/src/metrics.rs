//! Classification, regression, and survival metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    /// `2PR/(P+R)`, with every `0/0` taken as 0.
    pub fn f1(&self) -> f64 {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn check_pairs(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("metric needs at least one prediction".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// One-vs-rest counts for each of `n_classes` classes.
pub fn confusion_counts(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<ConfusionCounts>> {
    check_pairs(preds, labels)?;
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::InvalidInput(format!("class {bad} outside 0..{n_classes}")));
    }
    let mut out = vec![ConfusionCounts::default(); n_classes];
    for (c, counts) in out.iter_mut().enumerate() {
        for (&p, &l) in preds.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    Ok(out)
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let counts = confusion_counts(preds, labels, n_classes)?;
    Ok(counts.iter().map(ConfusionCounts::f1).sum::<f64>() / n_classes as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("rmse over {} and {} values", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("rmse of empty arrays".into()));
    }
    let ss: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

fn check_cohort(n: usize, times: &[f64], events: &[bool]) -> Result<()> {
    if times.len() != n || events.len() != n {
        return Err(Error::InvalidInput("risks, times and events differ in length".into()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("survival times must be finite".into()));
    }
    Ok(())
}

/// Harrell's C: over pairs where the earlier subject had an event and a
/// strictly smaller time, the fraction ranked riskier; risk ties count 0.5.
pub fn concordance_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    check_cohort(risks.len(), times, events)?;
    let (mut num, mut den) = (0.0, 0u64);
    for j in 0..risks.len() {
        if !events[j] {
            continue;
        }
        for i in 0..risks.len() {
            if times[j] < times[i] {
                den += 1;
                if risks[j] > risks[i] {
                    num += 1.0;
                } else if risks[j] == risks[i] {
                    num += 0.5;
                }
            }
        }
    }
    if den == 0 {
        return Err(Error::Undefined("concordance index has no comparable pairs".into()));
    }
    Ok(num / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmStep {
    pub time: f64,
    pub at_risk: usize,
    pub events: usize,
    pub survival: f64,
}

/// Product-limit curve with one step per distinct event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub steps: Vec<KmStep>,
}

impl KmCurve {
    pub fn survival_at(&self, t: f64) -> f64 {
        self.steps.iter().take_while(|s| s.time <= t).last().map_or(1.0, |s| s.survival)
    }
}

pub fn km_estimator(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    check_cohort(times.len(), times, events)?;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut steps = Vec::new();
    let mut s = 1.0;
    let mut at_risk = times.len();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let end = k + order[k..].iter().take_while(|&&i| times[i] == t).count();
        let d = order[k..end].iter().filter(|&&i| events[i]).count();
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            steps.push(KmStep {
                time: t,
                at_risk,
                events: d,
                survival: s,
            });
        }
        at_risk -= end - k;
        k = end;
    }
    Ok(KmCurve { steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-group log-rank test with the hypergeometric variance.
pub fn logrank_test(times_a: &[f64], events_a: &[bool], times_b: &[f64], events_b: &[bool]) -> Result<LogRank> {
    check_cohort(times_a.len(), times_a, events_a)?;
    check_cohort(times_b.len(), times_b, events_b)?;
    if times_a.is_empty() || times_b.is_empty() {
        return Err(Error::InvalidInput("log-rank test needs two non-empty groups".into()));
    }
    let mut event_times: Vec<f64> = times_a
        .iter()
        .zip(events_a)
        .chain(times_b.iter().zip(events_b))
        .filter(|(_, &e)| e)
        .map(|(&t, _)| t)
        .collect();
    if event_times.is_empty() {
        return Err(Error::Undefined("log-rank test with zero events".into()));
    }
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let count = |times: &[f64], events: &[bool], t: f64| {
        let n = times.iter().filter(|&&x| x >= t).count() as f64;
        let d = times.iter().zip(events).filter(|(&x, &e)| e && x == t).count() as f64;
        (n, d)
    };
    let (mut o_minus_e, mut var) = (0.0, 0.0);
    for &t in &event_times {
        let (na, da) = count(times_a, events_a, t);
        let (nb, db) = count(times_b, events_b, t);
        let (n, d) = (na + nb, da + db);
        o_minus_e += da - d * na / n;
        if n > 1.0 {
            var += d * (na / n) * (nb / n) * (n - d) / (n - 1.0);
        }
    }
    let statistic = if o_minus_e == 0.0 {
        0.0
    } else if var > 0.0 {
        o_minus_e * o_minus_e / var
    } else {
        return Err(Error::Undefined("log-rank variance is zero".into()));
    };
    let chi = ChiSquared::new(1.0).expect("one degree of freedom is valid");
    Ok(LogRank {
        statistic,
        p_value: chi.sf(statistic),
    })
}

/// Indices of `(high, low)` risk groups split at the median; ties go low.
pub fn median_risk_split(risks: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if risks.len() < 2 {
        return Err(Error::InvalidInput("median split needs at least two subjects".into()));
    }
    let mut sorted = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok((0..n).partition(|&i| risks[i] > median))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_examples() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 0, 1]).unwrap(), 2.0 / 3.0);
        assert!((macro_f1(&[0, 1, 1], &[0, 0, 1], 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 2).unwrap(), 1.0);
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 3).unwrap(), 2.0 / 3.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rmse_examples() {
        assert!((rmse(&[0.0, 0.0], &[0.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn concordance_examples() {
        let ci = concordance_index(&[4.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0], &[true, true, false, true]).unwrap();
        assert!((ci - 0.6).abs() < 1e-15);
        let perfect = concordance_index(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        assert_eq!(perfect, 1.0);
        assert!(matches!(
            concordance_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn km_examples() {
        let km = km_estimator(&[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        let s: Vec<f64> = km.steps.iter().map(|s| s.survival).collect();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15 && s[2] == 0.0);
        let censored = km_estimator(&[1.0, 5.0], &[false, false]).unwrap();
        assert!(censored.steps.is_empty());
        assert_eq!(censored.survival_at(10.0), 1.0);
    }

    #[test]
    fn logrank_examples() {
        let t = [1.0, 3.0, 4.0, 6.0];
        let e = [true, false, true, true];
        let same = logrank_test(&t, &e, &t, &e).unwrap();
        assert_eq!((same.statistic, same.p_value), (0.0, 1.0));
        let a: Vec<f64> = (1..=20).map(f64::from).collect();
        let b: Vec<f64> = (21..=40).map(f64::from).collect();
        let ev = [true; 20];
        let sep = logrank_test(&a, &ev, &b, &ev).unwrap();
        assert!(sep.p_value < 0.01);
        let swapped = logrank_test(&b, &ev, &a, &ev).unwrap();
        assert!((sep.statistic - swapped.statistic).abs() < 1e-12);
        assert!(logrank_test(&t, &[false; 4], &t, &[false; 4]).is_err());
    }

    #[test]
    fn median_split_examples() {
        let (hi, lo) = median_risk_split(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((hi, lo), (vec![2, 3], vec![0, 1]));
        let (hi, lo) = median_risk_split(&[2.0; 4]).unwrap();
        assert!(hi.is_empty() && lo.len() == 4);
        let (hi, lo) = median_risk_split(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!((hi.len(), lo.len()), (2, 3));
    }
}
