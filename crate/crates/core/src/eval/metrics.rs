//! Threshold sweeps and the anticipation metrics computed from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-frame outputs of the network on one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskTrace {
    pub label: bool,
    pub t_accident: Option<usize>,
    pub fps: f64,
    /// Accident probability per frame.
    pub p: Vec<f64>,
    /// Adaptive threshold per frame.
    pub tau: Vec<f64>,
    /// Normalised entropy of the driver attention map per frame.
    pub entropy: Vec<f64>,
    /// `[x, y]` cell of the risk-map peak per frame.
    pub risk_peak: Vec<[usize; 2]>,
}

impl RiskTrace {
    /// A trace with only scores; thresholds default to the static 0.5.
    pub fn from_scores(label: bool, t_accident: Option<usize>, fps: f64, p: Vec<f64>) -> Self {
        let n = p.len();
        Self {
            label,
            t_accident,
            fps,
            p,
            tau: vec![0.5; n],
            entropy: vec![0.0; n],
            risk_peak: vec![[0, 0]; n],
        }
    }

    /// Frames that count for evaluation: up to and including the accident
    /// frame for positives, everything for negatives.
    pub fn evaluated(&self) -> &[f64] {
        match (self.label, self.t_accident) {
            (true, Some(t)) => &self.p[..(t + 1).min(self.p.len())],
            _ => &self.p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.p.len();
        if n == 0 {
            return Err(Error::Input("empty trace".into()));
        }
        if self.tau.len() != n || self.entropy.len() != n || self.risk_peak.len() != n {
            return Err(Error::Dimension("trace columns differ in length".into()));
        }
        if self.label && self.t_accident.is_none() {
            return Err(Error::Input("positive trace without an accident frame".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Input("fps must be positive".into()));
        }
        if self.p.iter().chain(&self.tau).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trace scores".into()));
        }
        Ok(())
    }

    /// First evaluated frame with `p ≥ θ`.
    pub fn first_crossing(&self, theta: f64) -> Option<usize> {
        self.evaluated().iter().position(|&v| v >= theta)
    }

    /// Lead time in seconds when crossing at frame `t`.
    pub fn lead_time(&self, t: usize) -> f64 {
        match self.t_accident {
            Some(ta) => ta.saturating_sub(t) as f64 / self.fps,
            None => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub theta: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// 1 by convention when nothing is predicted positive.
    pub precision: f64,
    pub recall: f64,
    pub mean_tta_s: f64,
}

fn check(traces: &[RiskTrace]) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::Input("no traces to evaluate".into()));
    }
    traces.iter().try_for_each(RiskTrace::validate)
}

/// Candidate thresholds: every distinct evaluated score plus 0 and 1, ascending.
pub fn thresholds(traces: &[RiskTrace]) -> Vec<f64> {
    let mut th: Vec<f64> = traces.iter().flat_map(|t| t.evaluated().iter().copied()).collect();
    th.push(0.0);
    th.push(1.0);
    th.sort_by(f64::total_cmp);
    th.dedup();
    th
}

pub fn sweep_point(traces: &[RiskTrace], theta: f64) -> SweepPoint {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    let mut tta = 0.0;
    for t in traces {
        let hit = t.first_crossing(theta);
        match (t.label, hit) {
            (true, Some(f)) => {
                tp += 1;
                tta += t.lead_time(f);
            }
            (true, None) => fn_ += 1,
            (false, Some(_)) => fp += 1,
            (false, None) => tn += 1,
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 1.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    SweepPoint {
        theta,
        tp,
        fp,
        fn_,
        tn,
        precision,
        recall,
        mean_tta_s: if tp > 0 { tta / tp as f64 } else { 0.0 },
    }
}

/// Video-level sweep over all candidate thresholds, in ascending θ.
pub fn sweep(traces: &[RiskTrace]) -> Result<Vec<SweepPoint>> {
    check(traces)?;
    Ok(thresholds(traces).into_iter().map(|th| sweep_point(traces, th)).collect())
}

/// Interpolated AP over the distinct recall levels of a sweep.
pub fn average_precision(sweep: &[SweepPoint]) -> Result<f64> {
    if sweep.is_empty() {
        return Err(Error::Input("empty sweep".into()));
    }
    if sweep[0].tp + sweep[0].fn_ == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive video".into()));
    }
    let mut recalls: Vec<f64> = sweep.iter().map(|s| s.recall).filter(|&r| r > 0.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let env = sweep
            .iter()
            .filter(|s| s.recall >= r)
            .map(|s| s.precision)
            .fold(0.0, f64::max);
        ap += (r - prev) * env;
        prev = r;
    }
    Ok(ap)
}

/// Mann–Whitney AUC with ties counted half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative samples".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the average rank keeps everything in integers.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum2 += twice_avg;
            }
        }
        i = j + 1;
    }
    let np = n_pos as u128;
    let u2 = rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Frame-level scores and window labels over all evaluated frames.
pub fn frame_samples(traces: &[RiskTrace], window_s: f64) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for t in traces {
        let ev = t.evaluated();
        let y = crate::sim::label_frames(ev.len(), if t.label { t.t_accident } else { None }, t.fps, window_s);
        scores.extend_from_slice(ev);
        labels.extend(y.iter().map(|&v| v > 0.5));
    }
    (scores, labels)
}

pub fn frame_auc(traces: &[RiskTrace], window_s: f64) -> Result<f64> {
    check(traces)?;
    let (s, l) = frame_samples(traces, window_s);
    auc(&s, &l)
}

/// How mTTA reads the sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MttaMode {
    /// Uniform mean over every sweep point with nonzero recall.
    #[default]
    SweepMean,
    /// Lead time at one fixed threshold.
    Fixed(f64),
}

/// `(mTTA, TTA@R50)` in seconds.
pub fn tta_metrics(sweep: &[SweepPoint]) -> Result<(f64, f64)> {
    Ok((mean_tta(sweep, MttaMode::SweepMean)?, tta_at_r50(sweep)?))
}

pub fn mean_tta(sweep: &[SweepPoint], mode: MttaMode) -> Result<f64> {
    if sweep.is_empty() {
        return Err(Error::Input("empty sweep".into()));
    }
    match mode {
        MttaMode::SweepMean => {
            let hits: Vec<f64> = sweep.iter().filter(|s| s.recall > 0.0).map(|s| s.mean_tta_s).collect();
            if hits.is_empty() {
                return Err(Error::UndefinedMetric("no threshold detects any positive".into()));
            }
            Ok(hits.iter().sum::<f64>() / hits.len() as f64)
        }
        MttaMode::Fixed(theta) => sweep
            .iter()
            .filter(|s| s.theta <= theta)
            .max_by(|a, b| a.theta.total_cmp(&b.theta))
            .map(|s| s.mean_tta_s)
            .ok_or_else(|| Error::UndefinedMetric(format!("no sweep point at or below {theta}"))),
    }
}

pub fn tta_at_r50(sweep: &[SweepPoint]) -> Result<f64> {
    sweep
        .iter()
        .filter(|s| s.recall >= 0.5)
        .max_by(|a, b| a.theta.total_cmp(&b.theta))
        .map(|s| s.mean_tta_s)
        .ok_or_else(|| Error::UndefinedMetric("recall never reaches 0.5".into()))
}

/// Outcome of a trigger rule applied to every trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlertStats {
    pub false_alarm_rate: f64,
    pub recall: f64,
    /// Mean lead time over detected positives, 0 when none are detected.
    pub mean_tta_s: f64,
}

/// First evaluated frame where `p_t > τ_t`.
pub fn first_alert(trace: &RiskTrace, tau: impl Fn(&RiskTrace, usize) -> f64) -> Option<usize> {
    (0..trace.evaluated().len()).find(|&t| trace.p[t] > tau(trace, t))
}

fn trigger_eval(traces: &[RiskTrace], tau: impl Fn(&RiskTrace, usize) -> f64) -> Result<AlertStats> {
    check(traces)?;
    let (mut neg, mut fa, mut pos, mut hit, mut tta) = (0usize, 0usize, 0usize, 0usize, 0.0);
    for t in traces {
        let alert = first_alert(t, &tau);
        if t.label {
            pos += 1;
            if let Some(f) = alert {
                hit += 1;
                tta += t.lead_time(f);
            }
        } else {
            neg += 1;
            fa += alert.is_some() as usize;
        }
    }
    let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
    Ok(AlertStats {
        false_alarm_rate: ratio(fa, neg),
        recall: ratio(hit, pos),
        mean_tta_s: if hit > 0 { tta / hit as f64 } else { 0.0 },
    })
}

/// Alerts under each trace's own adaptive thresholds.
pub fn adaptive_alert_eval(traces: &[RiskTrace]) -> Result<AlertStats> {
    trigger_eval(traces, |tr, t| tr.tau[t])
}

/// Alerts under one fixed threshold.
pub fn static_alert_eval(traces: &[RiskTrace], theta: f64) -> Result<AlertStats> {
    trigger_eval(traces, |_, _| theta)
}

/// Frame-level AP over all evaluated frames, the alternative reading of AP.
pub fn frame_average_precision(traces: &[RiskTrace], window_s: f64) -> Result<f64> {
    check(traces)?;
    let (scores, labels) = frame_samples(traces, window_s);
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive frame".into()));
    }
    let mut th = scores.clone();
    th.push(0.0);
    th.push(1.0);
    th.sort_by(f64::total_cmp);
    th.dedup();
    let points: Vec<SweepPoint> = th
        .into_iter()
        .map(|theta| {
            let tp = scores.iter().zip(&labels).filter(|(s, &l)| l && **s >= theta).count();
            let fp = scores.iter().zip(&labels).filter(|(s, &l)| !l && **s >= theta).count();
            SweepPoint {
                theta,
                tp,
                fp,
                fn_: n_pos - tp,
                tn: labels.len() - n_pos - fp,
                precision: if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 1.0 },
                recall: tp as f64 / n_pos as f64,
                mean_tta_s: 0.0,
            }
        })
        .collect();
    average_precision(&points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_videos() -> Vec<RiskTrace> {
        vec![
            RiskTrace::from_scores(true, Some(0), 10.0, vec![0.9]),
            RiskTrace::from_scores(true, Some(0), 10.0, vec![0.4]),
            RiskTrace::from_scores(false, None, 10.0, vec![0.6]),
        ]
    }

    fn at(sw: &[SweepPoint], theta: f64) -> &SweepPoint {
        sw.iter().find(|s| s.theta == theta).unwrap()
    }

    #[test]
    fn three_video_sweep() {
        let sw = sweep(&three_videos()).unwrap();
        let thetas: Vec<f64> = sw.iter().map(|s| s.theta).collect();
        assert_eq!(thetas, vec![0.0, 0.4, 0.6, 0.9, 1.0]);
        let p = at(&sw, 0.9);
        assert_eq!((p.precision, p.recall), (1.0, 0.5));
        let p = at(&sw, 0.6);
        assert_eq!((p.precision, p.recall), (0.5, 0.5));
        let p = at(&sw, 0.4);
        assert_eq!((p.precision, p.recall), (2.0 / 3.0, 1.0));
        assert_eq!(at(&sw, 0.0).recall, 1.0);
        let top = at(&sw, 1.0);
        assert_eq!((top.tp, top.fp), (0, 0));
        let ap = average_precision(&sw).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn perfect_separation_and_ties() {
        let tr = vec![
            RiskTrace::from_scores(true, Some(1), 10.0, vec![0.2, 0.8]),
            RiskTrace::from_scores(false, None, 10.0, vec![0.1, 0.3]),
        ];
        assert_eq!(average_precision(&sweep(&tr).unwrap()).unwrap(), 1.0);
        // All scores equal: one informative sweep point with precision = prevalence.
        let tr: Vec<_> = (0..5)
            .map(|i| RiskTrace::from_scores(i < 2, if i < 2 { Some(2) } else { None }, 10.0, vec![0.5; 3]))
            .collect();
        assert!((average_precision(&sweep(&tr).unwrap()).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ap_without_positives_is_undefined() {
        let tr = vec![RiskTrace::from_scores(false, None, 10.0, vec![0.3])];
        assert!(matches!(average_precision(&sweep(&tr).unwrap()), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.2], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn lead_time_examples() {
        // Crossing exactly at the accident frame.
        let tr = vec![RiskTrace::from_scores(true, Some(4), 10.0, vec![0.1, 0.1, 0.1, 0.1, 0.9])];
        let sw = sweep(&tr).unwrap();
        assert_eq!(at(&sw, 0.9).mean_tta_s, 0.0);

        // Crossing 20 frames early at 10 fps: 2 s at every θ up to that score.
        let mut p = vec![0.05; 31];
        for v in &mut p[10..] {
            *v = 0.7;
        }
        let tr = vec![RiskTrace::from_scores(true, Some(30), 10.0, p)];
        let sw = sweep(&tr).unwrap();
        for s in sw.iter().filter(|s| s.theta > 0.05 && s.theta <= 0.7) {
            assert_eq!(s.mean_tta_s, 2.0);
        }
    }

    #[test]
    fn frames_after_accident_are_ignored() {
        let base = RiskTrace::from_scores(true, Some(3), 10.0, vec![0.1, 0.6, 0.2, 0.8]);
        let mut longer = base.clone();
        for v in [0.99, 0.95] {
            longer.p.push(v);
            longer.tau.push(0.5);
            longer.entropy.push(0.0);
            longer.risk_peak.push([0, 0]);
        }
        let neg = RiskTrace::from_scores(false, None, 10.0, vec![0.3, 0.7]);
        let a = tta_metrics(&sweep(&[base, neg.clone()]).unwrap()).unwrap();
        let b = tta_metrics(&sweep(&[longer, neg]).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn r50_needs_half_recall() {
        let sw = vec![SweepPoint {
            theta: 0.0,
            tp: 1,
            fp: 0,
            fn_: 3,
            tn: 0,
            precision: 1.0,
            recall: 0.25,
            mean_tta_s: 1.0,
        }];
        assert!(matches!(tta_at_r50(&sw), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn adaptive_trace_walk() {
        let mut tr = RiskTrace::from_scores(true, Some(2), 10.0, vec![0.1, 0.45, 0.6]);
        tr.tau = vec![0.5, 0.4, 0.5];
        assert_eq!(first_alert(&tr, |t, i| t.tau[i]), Some(1));
        let s = adaptive_alert_eval(&[tr]).unwrap();
        assert_eq!(s.recall, 1.0);
        assert!((s.mean_tta_s - 0.1).abs() < 1e-15);
    }

    #[test]
    fn constant_thresholds() {
        let tr = vec![
            RiskTrace::from_scores(true, Some(1), 10.0, vec![0.0, 0.3]),
            RiskTrace::from_scores(false, None, 10.0, vec![0.9, 1.0]),
        ];
        let none = static_alert_eval(&tr, 1.0).unwrap();
        assert_eq!((none.false_alarm_rate, none.recall), (0.0, 0.0));
        // τ ≡ 0 fires on any positive score.
        assert_eq!(static_alert_eval(&tr, 0.0).unwrap().recall, 1.0);
    }

    #[test]
    fn frame_ap_perfect() {
        let tr = vec![
            RiskTrace::from_scores(true, Some(40), 10.0, (0..41).map(|t| if t >= 10 { 0.9 } else { 0.1 }).collect()),
            RiskTrace::from_scores(false, None, 10.0, vec![0.2; 41]),
        ];
        assert_eq!(frame_average_precision(&tr, 3.0).unwrap(), 1.0);
        assert_eq!(frame_auc(&tr, 3.0).unwrap(), 1.0);
    }
}
