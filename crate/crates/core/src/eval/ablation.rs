//! Data-fraction, frame-drop and module-knockout experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelDims, Variant};
use crate::rng::{split_seed, Rng};
use crate::sim::Sequence;
use crate::train::{self, TrainConfig};

use super::{drop_frames, evaluate, traces, EvalReport, MttaMode};

pub const TRAIN_FRACTIONS: [f64; 3] = [0.5, 0.75, 1.0];
pub const DROP_RATES: [f64; 3] = [0.1, 0.2, 0.5];
pub const KNOCKOUTS: [Variant; 3] = [Variant::NoRefiner, Variant::NoFusion, Variant::NoRecurrence];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Table {
    DataFraction,
    DropRate,
    Module,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: Table,
    pub variant: Variant,
    pub train_fraction: f64,
    pub drop_rate: f64,
    pub ap: f64,
    pub mtta_s: f64,
    pub tta_at_r50_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Fraction × drop-rate grid, then the knockouts, then the full model.
    pub rows: Vec<AblationRow>,
    /// Whether evaluating with drop rate 0 reproduced the base report exactly.
    pub drop_zero_identical: bool,
}

impl AblationReport {
    pub fn row(&self, table: Table, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.table == table && r.variant == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One CSV per table shape: `table,variant,train_fraction,drop_rate,ap,mtta_s,tta_at_r50_s`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("table,variant,train_fraction,drop_rate,ap,mtta_s,tta_at_r50_s\n");
        for r in &self.rows {
            let table = match r.table {
                Table::DataFraction => "data-fraction",
                Table::DropRate => "drop-rate",
                Table::Module => "module",
            };
            let r50 = r.tta_at_r50_s.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{table},{},{},{},{},{},{r50}\n",
                r.variant.label(),
                r.train_fraction,
                r.drop_rate,
                r.ap,
                r.mtta_s
            ));
        }
        s
    }
}

/// A seeded subset holding `round(fraction · n)` sequences of each class.
pub fn subset(seqs: &[Sequence], fraction: f64, seed: u64) -> Result<Vec<Sequence>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("train fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(seqs.to_vec());
    }
    let mut keep = Vec::new();
    for (k, class) in [true, false].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..seqs.len()).filter(|&i| seqs[i].label == class).collect();
        Rng::derive(seed, k as u64).shuffle(&mut idx);
        keep.extend_from_slice(&idx[..(idx.len() as f64 * fraction).round() as usize]);
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| seqs[i].clone()).collect())
}

pub fn evaluate_model(model: &Model, test: &[Sequence], drop_rate: f64, seed: u64, window_s: f64) -> Result<EvalReport> {
    let data: Vec<Sequence> = test
        .iter()
        .enumerate()
        .map(|(i, s)| drop_frames(s, drop_rate, split_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    evaluate(&traces(model, &data)?, window_s, MttaMode::SweepMean)
}

fn row(table: Table, variant: Variant, train_fraction: f64, drop_rate: f64, r: &EvalReport) -> AblationRow {
    AblationRow {
        table,
        variant,
        train_fraction,
        drop_rate,
        ap: r.ap,
        mtta_s: r.mtta_s,
        tta_at_r50_s: r.tta_at_r50_s,
    }
}

/// Runs every experiment. `base` is the already trained full model on all of
/// `train_set`, together with its report on `test_set`; it is trained here
/// when absent. `progress` receives a short note after each training run.
pub fn run(
    train_set: &[Sequence],
    test_set: &[Sequence],
    dims: ModelDims,
    cfg: &TrainConfig,
    base: Option<(&Model, &EvalReport)>,
    mut progress: impl FnMut(&str),
) -> Result<AblationReport> {
    let drop_seed = split_seed(cfg.seed, 7);
    let owned;
    let (base_model, base_report) = match base {
        Some((m, r)) => (m, r.clone()),
        None => {
            owned = train::train(train_set, dims, Variant::Full, cfg)?.model;
            let r = evaluate_model(&owned, test_set, 0.0, drop_seed, cfg.window_s)?;
            progress("trained full model");
            (&owned, r)
        }
    };
    let zero = evaluate_model(base_model, test_set, 0.0, drop_seed, cfg.window_s)?;
    let drop_zero_identical = zero.to_json() == base_report.to_json();

    let mut rows = Vec::new();
    for &fraction in &TRAIN_FRACTIONS {
        let trained;
        let model = if fraction == 1.0 {
            base_model
        } else {
            let data = subset(train_set, fraction, split_seed(cfg.seed, 8))?;
            trained = train::train(&data, dims, Variant::Full, cfg)?.model;
            progress(&format!("trained on {:.0}% of the data", fraction * 100.0));
            &trained
        };
        for &rate in &DROP_RATES {
            let r = evaluate_model(model, test_set, rate, drop_seed, cfg.window_s)?;
            rows.push(row(Table::DataFraction, Variant::Full, fraction, rate, &r));
        }
    }
    for &v in &KNOCKOUTS {
        let m = train::train(train_set, dims, v, cfg)?.model;
        progress(&format!("trained {} knockout", v.label()));
        let r = evaluate_model(&m, test_set, 0.0, drop_seed, cfg.window_s)?;
        rows.push(row(Table::Module, v, 1.0, 0.0, &r));
    }
    rows.push(row(Table::Module, Variant::Full, 1.0, 0.0, &base_report));
    Ok(AblationReport {
        rows,
        drop_zero_identical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, SimConfig};

    #[test]
    fn subset_keeps_class_balance() {
        let cfg = SimConfig {
            frames: 44,
            grid: 8,
            ..SimConfig::default()
        };
        let data = generate(3, 20, 0.4, &cfg).unwrap();
        let half = subset(&data, 0.5, 1).unwrap();
        assert_eq!(half.len(), 10);
        assert_eq!(half.iter().filter(|s| s.label).count(), 4);
        assert_eq!(subset(&data, 1.0, 1).unwrap(), data);
        assert!(subset(&data, 0.0, 1).is_err());
    }

    #[test]
    fn harness_shape() {
        let cfg = SimConfig {
            frames: 44,
            grid: 16,
            ..SimConfig::default()
        };
        let train_set = generate(1, 8, 0.5, &cfg).unwrap();
        let test_set = generate(2, 4, 0.5, &cfg).unwrap();
        let dims = ModelDims {
            grid: 16,
            feat: 4,
            channels: 4,
            refine_channels: 4,
            hidden: 4,
            ..ModelDims::default()
        };
        let tc = TrainConfig {
            epochs: 1,
            warmup_epochs: 1,
            val_fraction: 0.25,
            ..TrainConfig::default()
        };
        let rep = run(&train_set, &test_set, dims, &tc, None, |_| {}).unwrap();
        assert_eq!(rep.rows.len(), 3 * 3 + 3 + 1);
        assert!(rep.drop_zero_identical);
        assert_eq!(rep.to_csv().lines().count(), 14);
    }
}
