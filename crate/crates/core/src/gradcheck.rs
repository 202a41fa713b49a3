//! Central finite-difference verification of tape gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims, SequenceInput, Variant};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::loss::{self, FocalParams, KlDirection};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Lower bound on the denominator of the relative error.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, serde::Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn eval<F>(f: &F, params: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(n, t)| g.param(n, t)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h` for every element of every parameter.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(n, t)| g.param(n, t)).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item();
    if !base.is_finite() {
        return Err(Error::GradCheck("objective is not finite at the base point".into()));
    }
    let grads = g.backward(out)?;

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            work[pi].1.data_mut()[i] = orig + step;
            let plus = eval(&f, &work)?;
            work[pi].1.data_mut()[i] = orig - step;
            let minus = eval(&f, &work)?;
            work[pi].1.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::GradCheck(format!(
                    "objective not finite when perturbing {name}[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let e = rel_err(a, numeric);
            if e > check.max_rel_err || i == 0 {
                check.max_rel_err = e.max(check.max_rel_err);
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report, tol })
}

/// Inputs and per-frame targets for an end-to-end check on a small model.
#[derive(Clone, Debug)]
pub struct Probe {
    pub scene: Tensor,
    pub attention: Tensor,
    pub tokens: Vec<u16>,
    pub targets: Vec<f64>,
}

impl Probe {
    /// Random inputs, first frame negative and the rest positive. Mostly
    /// positive frames keep the loss small, and with it the rounding noise
    /// in the finite differences.
    pub fn random(dims: &ModelDims, frames: usize, seed: u64) -> Probe {
        let mut rng = Rng::new(seed);
        let g = dims.grid;
        let scene = Tensor::from_fn(&[frames, g, g, 3], |_| rng.uniform());
        let attention = Tensor::from_fn(&[frames, g, g, 1], |_| 0.05 + rng.uniform());
        let tokens = (0..dims.tokens)
            .map(|i| if i + 2 < dims.tokens { rng.below(1, dims.vocab) as u16 } else { 0 })
            .collect();
        let targets = (0..frames).map(|t| (t >= 1) as u8 as f64).collect();
        Probe {
            scene,
            attention,
            tokens,
            targets,
        }
    }

    fn input(&self) -> SequenceInput<'_> {
        SequenceInput {
            scene: &self.scene,
            attention: &self.attention,
            tokens: &self.tokens,
        }
    }
}

fn model_loss(model: &Model, probe: &Probe, q: &Tensor) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &probe.input())?;
    let lv = loss::composite_graph(
        &mut g,
        out.prob,
        out.risk_map,
        &probe.targets,
        q,
        FocalParams::default(),
        KlDirection::AttentionToRisk,
    )?;
    Ok((g, lv.total))
}

/// Checks the gradient of the full training loss (focal, attention KL and
/// smoothness) with respect to every model parameter.
pub fn model_grad_check(model: &Model, probe: &Probe, step: f64, tol: f64) -> Result<GradCheckReport> {
    let q = loss::attention_targets(&probe.attention, model.dims.feat)?;
    let (g, total) = model_loss(model, probe, &q)?;
    let grads = g.param_grads(&g.backward(total)?);
    let mut work = model.clone();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let mut report = Vec::with_capacity(names.len());
    let objective = |m: &Model| -> Result<f64> {
        let (g, total) = model_loss(m, probe, &q)?;
        let v = g.value(total).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::GradCheck("loss is not finite".into()))
        }
    };
    for name in names {
        let len = model.params.get(&name)?.len();
        let zeros = Tensor::zeros(model.params.get(&name)?.shape());
        let analytic = grads.get(&name).unwrap_or(&zeros);
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: analytic.data()[0],
            numeric: 0.0,
        };
        for i in 0..len {
            let orig = model.params.get(&name)?.data()[i];
            work.params.get_mut(&name).expect("parameter exists").data_mut()[i] = orig + step;
            let plus = objective(&work)?;
            work.params.get_mut(&name).expect("parameter exists").data_mut()[i] = orig - step;
            let minus = objective(&work)?;
            work.params.get_mut(&name).expect("parameter exists").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let e = rel_err(a, numeric);
            if e > check.max_rel_err || i == 0 {
                check.max_rel_err = e.max(check.max_rel_err);
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report, tol })
}

/// The standard end-to-end check: a freshly initialised miniature model over
/// `frames` random frames.
/// The miniature model and probe used by [`miniature_check`].
pub fn miniature(variant: Variant, frames: usize, seed: u64) -> Result<(Model, Probe)> {
    let dims = ModelDims::miniature();
    let mut model = Model::new(dims, variant, seed)?;
    // Zero-filled biases put dead units exactly on a relu hinge, where the
    // one-sided slopes differ. Jitter them off it.
    let mut rng = Rng::new(seed ^ 0xb1a5);
    for (_, t) in model.params.iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = 0.1 * rng.uniform() - 0.05;
            }
        }
    }
    let probe = Probe::random(&dims, frames, seed ^ 0x5eed);
    Ok((model, probe))
}

pub fn miniature_check(variant: Variant, frames: usize, seed: u64) -> Result<GradCheckReport> {
    let (model, probe) = miniature(variant, frames, seed)?;
    model_grad_check(&model, &probe, DEFAULT_STEP, DEFAULT_TOL)
}
