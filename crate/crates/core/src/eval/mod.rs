//! Anticipation metrics, reports and the ablation harness.

pub mod ablation;
pub mod metrics;
pub mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use metrics::{
    adaptive_alert_eval, auc, average_precision, frame_auc, frame_average_precision, mean_tta,
    static_alert_eval, sweep, tta_at_r50, tta_metrics, AlertStats, MttaMode, RiskTrace, SweepPoint,
};
pub use trace::{drop_frames, trace, trace_csv, traces, traces_threaded};

/// Threshold of the static trigger the adaptive one is compared with.
pub const STATIC_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: usize,
    pub positives: usize,
    pub ap: f64,
    pub auc: f64,
    pub mtta_s: f64,
    /// Absent when recall never reaches one half.
    pub tta_at_r50_s: Option<f64>,
    pub false_alarm_rate: f64,
    pub adaptive_recall: f64,
    pub adaptive_mean_tta_s: f64,
    pub static_false_alarm_rate: f64,
    pub static_recall: f64,
    pub static_mean_tta_s: f64,
    pub sweep: Vec<SweepPoint>,
}

/// Computes every metric over `traces`. Frame labels for AUC use a window of
/// `window_s` seconds before each accident.
pub fn evaluate(traces: &[RiskTrace], window_s: f64, mtta: MttaMode) -> Result<EvalReport> {
    let sw = sweep(traces)?;
    let ap = average_precision(&sw)?;
    let auc = frame_auc(traces, window_s)?;
    let mtta_s = mean_tta(&sw, mtta)?;
    let tta_at_r50_s = match tta_at_r50(&sw) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let adaptive = adaptive_alert_eval(traces)?;
    let fixed = static_alert_eval(traces, STATIC_THRESHOLD)?;
    Ok(EvalReport {
        videos: traces.len(),
        positives: traces.iter().filter(|t| t.label).count(),
        ap,
        auc,
        mtta_s,
        tta_at_r50_s,
        false_alarm_rate: adaptive.false_alarm_rate,
        adaptive_recall: adaptive.recall,
        adaptive_mean_tta_s: adaptive.mean_tta_s,
        static_false_alarm_rate: fixed.false_alarm_rate,
        static_recall: fixed.recall,
        static_mean_tta_s: fixed.mean_tta_s,
        sweep: sw,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// `theta,precision,recall,mean_tta_s` rows in ascending θ.
    pub fn sweep_csv(&self) -> String {
        let mut s = String::from("theta,precision,recall,mean_tta_s\n");
        for p in &self.sweep {
            s.push_str(&format!("{},{},{},{}\n", p.theta, p.precision, p.recall, p.mean_tta_s));
        }
        s
    }
}
