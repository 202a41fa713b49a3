//! Risk head: per-frame accident probability, spatial risk distribution and
//! the adaptive alert threshold.
//!
//! ```text
//! p_t   = σ(w_p · [H_t ; ψ(F_context)] + b_p)
//! M_s   = softmax_{x,y} Σ_k (P H_t)_k · V(x,y,k)        V = 1×1 conv of F_visual
//! τ_t   = clamp(0.5 + λ1 E(X_f) − λ2 tanh(‖F_context‖ / √c), 0.3, 0.7)
//! ```

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Padding;

use super::{Init, ModelDims, Params, LAMBDA_INIT};

pub const LAMBDA1: &str = "head.lambda1";
pub const LAMBDA2: &str = "head.lambda2";
pub const ENTROPY_EPS: f64 = 1e-8;
pub const TAU_MIN: f64 = 0.3;
pub const TAU_MAX: f64 = 0.7;

pub(crate) fn init(init: &mut Init, d: &ModelDims) {
    let c = d.channels;
    let h = d.hidden;
    init.uniform("head.psi.w1", &[c, c / 2], c);
    init.fill("head.psi.b1", &[c / 2], 0.0);
    init.uniform("head.psi.w2", &[c / 2, c / 4], c / 2);
    init.fill("head.psi.b2", &[c / 4], 0.0);
    init.uniform("head.wp", &[2 * h + c / 4, 1], 2 * h + c / 4);
    init.fill("head.bp", &[1], 0.0);
    init.uniform("head.proj", &[2 * h, h], 2 * h);
    init.uniform("head.vis.k", &[1, 1, c, h], c);
    init.fill(LAMBDA1, &[], LAMBDA_INIT);
    init.fill(LAMBDA2, &[], LAMBDA_INIT);
}

/// `ψ(F_context)`: `[T,c]` to `[T,c/4]`.
pub fn context_embedding(g: &mut Graph, p: &Params, context: Var) -> Result<Var> {
    let w1 = p.var(g, "head.psi.w1")?;
    let b1 = p.var(g, "head.psi.b1")?;
    let w2 = p.var(g, "head.psi.w2")?;
    let b2 = p.var(g, "head.psi.b2")?;
    let h = g.linear(context, w1, b1)?;
    let h = g.relu(h);
    g.linear(h, w2, b2)
}

/// `[T,1]` accident probabilities.
pub fn predict_probability(g: &mut Graph, p: &Params, _d: &ModelDims, states: Var, context: Var) -> Result<Var> {
    let psi = context_embedding(g, p, context)?;
    let x = g.concat(&[states, psi], 1)?;
    let w = p.var(g, "head.wp")?;
    let b = p.var(g, "head.bp")?;
    let logit = g.linear(x, w, b)?;
    Ok(g.sigmoid(logit))
}

/// `[T, h·w]` correlation scores before normalisation.
pub fn risk_scores(g: &mut Graph, p: &Params, d: &ModelDims, states: Var, visual: Var) -> Result<Var> {
    let frames = g.shape(states)[0];
    if g.shape(visual)[0] != frames {
        return Err(Error::Dimension(format!(
            "{frames} temporal states but visual map has batch {}",
            g.shape(visual)[0]
        )));
    }
    let proj = p.var(g, "head.proj")?;
    let u = g.matmul(states, proj)?;
    let u = g.reshape(u, &[frames, 1, 1, d.hidden])?;
    let k = p.var(g, "head.vis.k")?;
    let v = g.conv2d(visual, k, 1, Padding::Same)?;
    let prod = g.mul(v, u)?;
    let score = g.sum_axes(prod, &[3])?;
    let hw = d.feat * d.feat;
    g.reshape(score, &[frames, hw])
}

/// `[T, h·w]` spatial risk distributions.
pub fn risk_map(g: &mut Graph, p: &Params, d: &ModelDims, states: Var, visual: Var) -> Result<Var> {
    let s = risk_scores(g, p, d, states, visual)?;
    g.softmax(s, 1)
}

/// Normalised entropy of a nonnegative attention map, in `[0,1]`.
pub fn attention_entropy(map: &[f64]) -> Result<f64> {
    if map.len() < 2 {
        return Err(Error::Input("attention map needs at least two cells".into()));
    }
    if map.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Input("attention map must be finite and nonnegative".into()));
    }
    let total: f64 = map.iter().sum();
    if total <= 0.0 {
        return Err(Error::Input("attention map is all zero".into()));
    }
    let z = total + ENTROPY_EPS * map.len() as f64;
    let h: f64 = map
        .iter()
        .map(|&v| {
            let q = (v + ENTROPY_EPS) / z;
            -q * q.ln()
        })
        .sum();
    Ok((h / (map.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Bounded scene complexity `tanh(‖v‖₂ / √c)`.
pub fn context_complexity(context: &[f64]) -> f64 {
    let n = context.iter().map(|v| v * v).sum::<f64>().sqrt();
    (n / (context.len().max(1) as f64).sqrt()).tanh()
}

/// Threshold before clamping; lies in `[0.3, 0.7]` whenever the inputs are in range.
pub fn raw_threshold(lambda1: f64, lambda2: f64, entropy: f64, complexity: f64) -> f64 {
    0.5 + lambda1 * entropy - lambda2 * complexity
}

pub fn adaptive_threshold(lambda1: f64, lambda2: f64, entropy: f64, context: &[f64]) -> f64 {
    raw_threshold(lambda1, lambda2, entropy, context_complexity(context)).clamp(TAU_MIN, TAU_MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, Variant};
    use crate::rng::Rng;
    use crate::Tensor;

    fn setup(seed: u64) -> (Model, Graph, Var, Var, Var) {
        let m = Model::new(ModelDims::default(), Variant::Full, seed).unwrap();
        let mut g = Graph::new();
        let mut rng = Rng::new(seed + 100);
        let states = g.leaf(Tensor::from_fn(&[3, 32], |_| rng.range(-1.0, 1.0)));
        let ctx = g.leaf(Tensor::from_fn(&[3, 16], |_| rng.normal()));
        let vis = g.leaf(Tensor::from_fn(&[3, 8, 8, 16], |_| rng.normal()));
        (m, g, states, ctx, vis)
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let (mut m, mut g, s, c, _) = setup(1);
        m.params.get_mut("head.wp").unwrap().scale_assign(0.0);
        let p = predict_probability(&mut g, &m.params, &m.dims, s, c).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn probability_increases_with_bias() {
        let (mut m, _, _, _, _) = setup(2);
        let mut last = 0.0;
        for b in [-5.0, 0.0, 5.0, 20.0, 40.0] {
            m.params.insert("head.bp", Tensor::from_vec(vec![b]));
            let (_, mut g, s, c, _) = setup(2);
            let p = predict_probability(&mut g, &m.params, &m.dims, s, c).unwrap();
            let v = g.value(p).data()[0];
            assert!(v >= last);
            last = v;
        }
        assert!(last > 1.0 - 1e-12);
    }

    #[test]
    fn small_instance_by_hand() {
        let dims = ModelDims {
            hidden: 1,
            channels: 4,
            ..ModelDims::miniature()
        };
        let mut p = Params::default();
        p.insert("head.psi.w1", Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        p.insert("head.psi.b1", Tensor::from_vec(vec![0.0, -1.0]));
        p.insert("head.psi.w2", Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap());
        p.insert("head.psi.b2", Tensor::from_vec(vec![0.5]));
        p.insert("head.wp", Tensor::new(vec![3, 1], vec![0.4, -0.2, 0.1]).unwrap());
        p.insert("head.bp", Tensor::from_vec(vec![0.05]));
        let mut g = Graph::new();
        let s = g.leaf(Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap());
        let c = g.leaf(Tensor::new(vec![1, 4], vec![1.5, 0.5, 9.0, 9.0]).unwrap());
        let out = predict_probability(&mut g, &p, &dims, s, c).unwrap();
        // ψ = 2·relu(1.5) + 3·relu(0.5 − 1) + 0.5 = 3.5
        // logit = 0.4·0.5 − 0.2·(−1) + 0.1·3.5 + 0.05 = 0.8
        let expect = 1.0 / (1.0 + (-0.8f64).exp());
        assert!((g.value(out).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn risk_maps_are_distributions() {
        let (m, mut g, s, _, v) = setup(3);
        let r = risk_map(&mut g, &m.params, &m.dims, s, v).unwrap();
        assert_eq!(g.shape(r), &[3, 64]);
        for row in g.value(r).data().chunks(64) {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_arithmetic_and_uniform() {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::new(vec![1, 4], vec![0.0, 2f64.ln(), 0.0, 0.0]).unwrap());
        let m = g.softmax(s, 1).unwrap();
        for (a, b) in g.value(m).data().iter().zip([0.2, 0.4, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        let (model, mut g, s, _, _) = setup(4);
        let v = g.leaf(Tensor::full(&[3, 8, 8, 16], 0.7));
        let r = risk_map(&mut g, &model.params, &model.dims, s, v).unwrap();
        assert!(g.value(r).data().iter().all(|&x| (x - 1.0 / 64.0).abs() < 1e-15));
    }

    #[test]
    fn argmax_invariant_to_score_shift() {
        let (m, mut g, s, _, v) = setup(5);
        let scores = risk_scores(&mut g, &m.params, &m.dims, s, v).unwrap();
        let shifted = g.offset(scores, 123.0);
        let a = g.softmax(scores, 1).unwrap();
        let b = g.softmax(shifted, 1).unwrap();
        let diff = g.value(a).zip_map(g.value(b), |x, y| (x - y).abs()).unwrap().max_abs();
        assert!(diff < 1e-12);
    }

    #[test]
    fn entropy_cases() {
        assert!((attention_entropy(&[0.25; 16]).unwrap() - 1.0).abs() < 1e-12);
        assert!(attention_entropy(&[0.0, 0.0, 1.0, 0.0]).unwrap() <= 1e-6);
        // The ε floor leaks about (n−1)·ε·ln(1/ε)/ln n on larger one-hot maps.
        let mut one_hot = vec![0.0; 1024];
        one_hot[3] = 1.0;
        let e = attention_entropy(&one_hot).unwrap();
        let leak = 1023.0 * ENTROPY_EPS * (1.0 / ENTROPY_EPS).ln() / 1024f64.ln();
        assert!(e <= 1.1 * leak, "{e} {leak}");
        let half = attention_entropy(&[0.5, 0.0, 0.5, 0.0]).unwrap();
        assert!((half - 0.5).abs() < 1e-6, "{half}");
        assert!(matches!(attention_entropy(&[0.0; 4]), Err(Error::Input(_))));
        assert!(matches!(attention_entropy(&[1.0, -0.1]), Err(Error::Input(_))));
    }

    #[test]
    fn threshold_cases() {
        let ctx = [3.0, -1.0, 2.0, 0.5];
        assert_eq!(adaptive_threshold(0.0, 0.0, 0.8, &ctx), 0.5);
        assert!((adaptive_threshold(0.2, 0.0, 1.0, &ctx) - 0.7).abs() < 1e-15);
        assert!((raw_threshold(0.0, 0.2, 0.0, 1.0) - 0.3).abs() < 1e-15);
        assert!(adaptive_threshold(0.0, 0.2, 0.0, &[1e6; 4]) >= 0.3);
        assert_eq!(context_complexity(&[0.0; 4]), 0.0);
    }
}
