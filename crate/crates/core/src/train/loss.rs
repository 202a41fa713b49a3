//! Composite training objective
//! `L = L_focal + 0.5 · L_KL + 0.1 · L_smooth`, in graph form for training
//! and in plain form for evaluation and tests.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{avg_pool2d, Tensor};

pub const KL_WEIGHT: f64 = 0.5;
pub const SMOOTH_WEIGHT: f64 = 0.1;
pub const PROB_CLAMP: f64 = 1e-7;
pub const KL_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub focal: f64,
    pub kl: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn new(focal: f64, kl: f64, smooth: f64) -> Self {
        Self {
            focal,
            kl,
            smooth,
            total: combine(focal, kl, smooth),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.focal.is_finite() && self.kl.is_finite() && self.smooth.is_finite() && self.total.is_finite()
    }

    /// Running mean helper: `self + (other − self) / n`.
    pub fn accumulate(&mut self, other: &LossTerms, n: usize) {
        let k = 1.0 / n as f64;
        self.focal += (other.focal - self.focal) * k;
        self.kl += (other.kl - self.kl) * k;
        self.smooth += (other.smooth - self.smooth) * k;
        self.total += (other.total - self.total) * k;
    }
}

pub fn combine(focal: f64, kl: f64, smooth: f64) -> f64 {
    focal + KL_WEIGHT * kl + SMOOTH_WEIGHT * smooth
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    /// Weight of positive frames; negatives get `1 − alpha`.
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

/// Which side of the divergence holds the attention distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `D(attention ‖ risk map)`
    #[default]
    AttentionToRisk,
    /// `D(risk map ‖ attention)`
    RiskToAttention,
}

pub fn focal_loss(p: &[f64], y: &[f64], fp: FocalParams) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Dimension(format!("{} probabilities vs {} targets", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::Input("focal loss of an empty sequence".into()));
    }
    let sum: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let (pt, at) = if y > 0.5 { (p, fp.alpha) } else { (1.0 - p, 1.0 - fp.alpha) };
            -at * (1.0 - pt).powf(fp.gamma) * pt.ln()
        })
        .sum();
    Ok(sum / p.len() as f64)
}

/// `(x + ε) / Σ(x + ε)`
pub fn floor_normalize(x: &[f64]) -> Vec<f64> {
    let z: f64 = x.iter().map(|v| v + KL_EPS).sum();
    x.iter().map(|v| (v + KL_EPS) / z).collect()
}

/// `Σ q ln(q/m)` with both sides ε-floored and renormalised.
pub fn kl_divergence(q: &[f64], m: &[f64]) -> Result<f64> {
    if q.len() != m.len() {
        return Err(Error::Dimension(format!("KL over {} vs {} cells", q.len(), m.len())));
    }
    let q = floor_normalize(q);
    let m = floor_normalize(m);
    let kl: f64 = q.iter().zip(&m).map(|(a, b)| a * (a.ln() - b.ln())).sum();
    Ok(kl.max(0.0))
}

pub fn smoothness_loss(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::Input("smoothness needs at least two frames".into()));
    }
    let s: f64 = p.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Ok(s / (p.len() - 1) as f64)
}

/// Attention maps `[T,H,W,1]` pooled to `feat × feat` and ε-normalised per
/// frame, as `[T, feat²]`.
pub fn attention_targets(attention: &Tensor, feat: usize) -> Result<Tensor> {
    let s = attention.shape();
    if s.len() != 4 || s[1] % feat != 0 || s[1] != s[2] {
        return Err(Error::Dimension(format!("cannot pool attention {s:?} to {feat}x{feat}")));
    }
    let pooled = avg_pool2d(attention, s[1] / feat)?;
    let hw = feat * feat;
    let mut out = Vec::with_capacity(s[0] * hw);
    for frame in pooled.data().chunks(hw) {
        out.extend(floor_normalize(frame));
    }
    Tensor::new(vec![s[0], hw], out)
}

/// Graph focal loss over `p` `[T,1]`.
pub fn focal_graph(g: &mut Graph, p: Var, y: &[f64], fp: FocalParams) -> Result<Var> {
    let t = g.shape(p)[0];
    if y.len() != t {
        return Err(Error::Dimension(format!("{t} probabilities vs {} targets", y.len())));
    }
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    // p_t = (1 − y) + (2y − 1) p,  α_t = (1 − α) + (2α − 1) y
    let a = g.leaf(Tensor::new(vec![t, 1], y.iter().map(|&v| 2.0 * v - 1.0).collect())?);
    let b = g.leaf(Tensor::new(vec![t, 1], y.iter().map(|&v| 1.0 - v).collect())?);
    let w = g.leaf(Tensor::new(
        vec![t, 1],
        y.iter().map(|&v| -((1.0 - fp.alpha) + (2.0 * fp.alpha - 1.0) * v)).collect(),
    )?);
    let pt = g.mul(p, a)?;
    let pt = g.add(pt, b)?;
    let miss = g.rsub_scalar(1.0, pt);
    let modulate = g.powf(miss, fp.gamma);
    let lp = g.ln(pt);
    let term = g.mul(modulate, lp)?;
    let term = g.mul(term, w)?;
    g.mean_all(term)
}

/// Graph KL between fixed targets `q` `[T,hw]` (already normalised) and the
/// predicted maps `m` `[T,hw]`, averaged over frames.
pub fn kl_graph(g: &mut Graph, q: &Tensor, m: Var, dir: KlDirection) -> Result<Var> {
    if q.shape() != g.shape(m) {
        return Err(Error::Dimension(format!(
            "attention targets {:?} vs risk maps {:?}",
            q.shape(),
            g.shape(m)
        )));
    }
    let t = q.shape()[0];
    let me = g.offset(m, KL_EPS);
    let z = g.sum_axes(me, &[1])?;
    let mn = g.div(me, z)?;
    let qv = g.leaf(q.clone());
    // ln of the ratio rather than a difference of logs: the ratio is near 1
    // when the maps agree, so less is lost to cancellation.
    let per_cell = match dir {
        KlDirection::AttentionToRisk => {
            let r = g.div(qv, mn)?;
            let l = g.ln(r);
            g.mul(qv, l)?
        }
        KlDirection::RiskToAttention => {
            let r = g.div(mn, qv)?;
            let l = g.ln(r);
            g.mul(mn, l)?
        }
    };
    let s = g.sum_all(per_cell)?;
    Ok(g.scale(s, 1.0 / t as f64))
}

pub fn smooth_graph(g: &mut Graph, p: Var) -> Result<Var> {
    let t = g.shape(p)[0];
    if t < 2 {
        return Err(Error::Input("smoothness needs at least two frames".into()));
    }
    let a = g.slice(p, 0, 1, t - 1)?;
    let b = g.slice(p, 0, 0, t - 1)?;
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let s = g.sum_all(sq)?;
    Ok(g.scale(s, 1.0 / (t - 1) as f64))
}

/// Graph handles of each term and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub focal: Var,
    pub kl: Var,
    pub smooth: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossTerms {
        LossTerms {
            focal: g.value(self.focal).item(),
            kl: g.value(self.kl).item(),
            smooth: g.value(self.smooth).item(),
            total: g.value(self.total).item(),
        }
    }
}

pub fn composite_graph(
    g: &mut Graph,
    prob: Var,
    risk_map: Var,
    targets: &[f64],
    attention: &Tensor,
    fp: FocalParams,
    dir: KlDirection,
) -> Result<LossVars> {
    let focal = focal_graph(g, prob, targets, fp)?;
    let kl = kl_graph(g, attention, risk_map, dir)?;
    let smooth = smooth_graph(g, prob)?;
    let k = g.scale(kl, KL_WEIGHT);
    let s = g.scale(smooth, SMOOTH_WEIGHT);
    let total = g.add(focal, k)?;
    let total = g.add(total, s)?;
    Ok(LossVars {
        focal,
        kl,
        smooth,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn focal_examples() {
        let fp = FocalParams::default();
        let v = focal_loss(&[0.5], &[1.0], fp).unwrap();
        assert!(close(v, 0.25 * 0.25 * 2f64.ln(), 1e-15), "{v}");
        assert!(close(v, 0.043322, 1e-6));
        assert!(focal_loss(&[1.0, 0.0], &[1.0, 0.0], fp).unwrap() <= 1e-5);
        assert!(matches!(focal_loss(&[0.5], &[1.0, 0.0], fp), Err(Error::Dimension(_))));
    }

    #[test]
    fn focal_reduces_to_half_cross_entropy() {
        let mut rng = Rng::new(4);
        let p: Vec<f64> = (0..50).map(|_| rng.range(0.01, 0.99)).collect();
        let y: Vec<f64> = (0..50).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect();
        let f = focal_loss(&p, &y, FocalParams { gamma: 0.0, alpha: 0.5 }).unwrap();
        let ce: f64 = p
            .iter()
            .zip(&y)
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 50.0;
        assert!(close(f, 0.5 * ce, 1e-12));
    }

    #[test]
    fn kl_examples() {
        let q = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(close(v, 2f64.ln(), 1e-6), "{v}");
        let mut rng = Rng::new(8);
        for _ in 0..1000 {
            let a: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
            assert!(kl_divergence(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(smoothness_loss(&[0.3; 8]).unwrap(), 0.0);
        assert_eq!(smoothness_loss(&[0.0, 1.0]).unwrap(), 1.0);
        let p = [0.1, 0.5, 0.2, 0.9];
        let r: Vec<f64> = p.iter().rev().copied().collect();
        assert_eq!(smoothness_loss(&p).unwrap(), smoothness_loss(&r).unwrap());
        assert!(matches!(smoothness_loss(&[0.1]), Err(Error::Input(_))));
    }

    #[test]
    fn graph_terms_match_plain() {
        let mut rng = Rng::new(2);
        let t = 5;
        let p: Vec<f64> = (0..t).map(|_| rng.range(0.05, 0.95)).collect();
        let y = [0.0, 0.0, 1.0, 1.0, 1.0];
        let raw: Vec<f64> = (0..t * 4).map(|_| rng.uniform()).collect();
        let q_raw: Vec<f64> = (0..t * 4).map(|_| rng.uniform()).collect();
        let q: Vec<f64> = q_raw.chunks(4).flat_map(floor_normalize).collect();
        let q = Tensor::new(vec![t, 4], q).unwrap();

        let mut g = Graph::new();
        let pv = g.leaf(Tensor::new(vec![t, 1], p.clone()).unwrap());
        let mv = g.leaf(Tensor::new(vec![t, 4], raw.clone()).unwrap());
        let mv = g.softmax(mv, 1).unwrap();
        let fp = FocalParams::default();
        let lv = composite_graph(&mut g, pv, mv, &y, &q, fp, KlDirection::AttentionToRisk).unwrap();
        let got = lv.values(&g);

        let m = g.value(mv).data().to_vec();
        let kl: f64 = (0..t)
            .map(|i| kl_divergence(&q_raw[i * 4..i * 4 + 4], &m[i * 4..i * 4 + 4]).unwrap())
            .sum::<f64>()
            / t as f64;
        let want = LossTerms::new(focal_loss(&p, &y, fp).unwrap(), kl, smoothness_loss(&p).unwrap());
        assert!(close(got.focal, want.focal, 1e-14));
        assert!(close(got.kl, want.kl, 1e-12));
        assert!(close(got.smooth, want.smooth, 1e-15));
        assert_eq!(got.total, got.focal + 0.5 * got.kl + 0.1 * got.smooth);
    }

    #[test]
    fn kl_of_identical_maps_is_zero_in_graph() {
        let q = Tensor::new(vec![2, 3], floor_normalize(&[0.2, 0.3, 0.5]).repeat(2)).unwrap();
        let mut g = Graph::new();
        let m = g.leaf(q.clone());
        // The ε-renormalisation of an already normalised map is not exactly idempotent.
        let kl = kl_graph(&mut g, &q, m, KlDirection::AttentionToRisk).unwrap();
        assert!(g.value(kl).item().abs() <= 1e-10);
    }

    #[test]
    fn reverse_direction_swaps_roles() {
        let a_raw = [0.7, 0.2, 0.1];
        let a = floor_normalize(&a_raw);
        let b = [0.3, 0.3, 0.4];
        let mut g = Graph::new();
        let q = Tensor::new(vec![1, 3], a.clone()).unwrap();
        let m = g.leaf(Tensor::new(vec![1, 3], b.to_vec()).unwrap());
        let kl = kl_graph(&mut g, &q, m, KlDirection::RiskToAttention).unwrap();
        assert!(close(g.value(kl).item(), kl_divergence(&b, &a_raw).unwrap(), 1e-12));
    }

    #[test]
    fn attention_targets_are_distributions() {
        let mut rng = Rng::new(1);
        let att = Tensor::from_fn(&[3, 32, 32, 1], |_| rng.uniform());
        let q = attention_targets(&att, 8).unwrap();
        assert_eq!(q.shape(), &[3, 64]);
        for row in q.data().chunks(64) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
