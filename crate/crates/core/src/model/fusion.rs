//! Adaptive hierarchical fusion.
//!
//! Each modality is projected by a 1×1 convolution (`H_i`) and recalibrated
//! into a scale-aware map `M_i` by a softmax-weighted 4-level pyramid. Ordered
//! modality pairs are then fused with channel gates
//! `β_ij = σ(MLP([avg M_i; avg M_j]))` and pointwise correspondence gates
//! `γ_ij(x,y) = (1 + cos(M_i(x,y), M_j(x,y))) / 2`:
//!
//! ```text
//! F_fused(x,y) = 1/6 Σ_{i≠j} β_ij ⊙ γ_ij(x,y) H_i(x,y) + 1/3 Σ_i H_i(x,y)
//! ```
//!
//! Finally `F_fused` is split into visual- and context-centric parts by
//! mixtures of `K` linear bases whose coefficients are softmax outputs of a
//! small MLP over the pooled fused feature.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Padding;

use super::encoders::{weighted_upsample_sum, PYRAMID_LEVELS};
use super::{Init, ModelDims, Params, Variant};

pub const MODALITIES: [&str; 3] = ["r", "c", "f"];
pub const COSINE_FLOOR: f64 = 1e-8;

pub(crate) fn init(init: &mut Init, d: &ModelDims, variant: Variant) {
    if variant == Variant::NoFusion {
        return;
    }
    let c = d.channels;
    for m in MODALITIES {
        init.uniform(&format!("fus.proj.{m}.k"), &[1, 1, c, c], c);
        init.fill(&format!("fus.proj.{m}.b"), &[c], 0.0);
        for l in 1..PYRAMID_LEVELS {
            init.uniform(&format!("fus.hsfa.{m}.{l}.k"), &[3, 3, c, c], 9 * c);
            init.fill(&format!("fus.hsfa.{m}.{l}.b"), &[c], 0.0);
        }
        init.fill(&format!("fus.hsfa.{m}.logits"), &[PYRAMID_LEVELS], 0.0);
    }
    for (i, j) in pairs() {
        let name = pair_name(i, j);
        init.uniform(&format!("fus.coat.{name}.w1"), &[2 * c, c / 2], 2 * c);
        init.fill(&format!("fus.coat.{name}.b1"), &[c / 2], 0.0);
        init.uniform(&format!("fus.coat.{name}.w2"), &[c / 2, c], c / 2);
        init.fill(&format!("fus.coat.{name}.b2"), &[c], 0.0);
    }
    for branch in ["v", "c"] {
        // Bases start near identity so both branches initially pass F_fused through.
        let k = d.bases;
        let basis = crate::Tensor::from_fn(&[k, c, c], |i| {
            let (row, col) = ((i / c) % c, i % c);
            let eye = if row == col { 1.0 } else { 0.0 };
            eye + init.rng.range(-0.1, 0.1)
        });
        init.params.insert(format!("fus.biba.{branch}.basis"), basis);
        init.fill(&format!("fus.biba.{branch}.bias"), &[k, c], 0.0);
        init.uniform(&format!("fus.biba.{branch}.w1"), &[c, c / 2], c);
        init.fill(&format!("fus.biba.{branch}.b1"), &[c / 2], 0.0);
        init.uniform(&format!("fus.biba.{branch}.w2"), &[c / 2, k], c / 2);
        init.fill(&format!("fus.biba.{branch}.b2"), &[k], 0.0);
    }
}

/// Ordered modality pairs `(i, j)`, `i ≠ j`.
pub fn pairs() -> impl Iterator<Item = (usize, usize)> {
    (0..3).flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j)))
}

pub fn pair_name(i: usize, j: usize) -> String {
    format!("{}{}", MODALITIES[i], MODALITIES[j])
}

/// Projected (`H_i`) and recalibrated (`M_i`) features per modality.
#[derive(Clone, Copy, Debug)]
pub struct AlignedFeatures {
    pub projected: [Var; 3],
    pub recalibrated: [Var; 3],
}

pub fn align_and_recalibrate(g: &mut Graph, p: &Params, d: &ModelDims, features: [Var; 3]) -> Result<AlignedFeatures> {
    let spatial = |s: &[usize]| s[1..].to_vec();
    let s0 = spatial(g.shape(features[0]));
    if features.iter().any(|&f| spatial(g.shape(f)) != s0) {
        return Err(Error::Dimension("modality feature maps differ in shape".into()));
    }
    let mut projected = features;
    let mut recalibrated = features;
    for (i, m) in MODALITIES.iter().enumerate() {
        let k = p.var(g, &format!("fus.proj.{m}.k"))?;
        let b = p.var(g, &format!("fus.proj.{m}.b"))?;
        let h = g.conv_bias(features[i], k, b, 1, Padding::Same)?;
        let mut levels = vec![h];
        let mut cur = h;
        for l in 1..PYRAMID_LEVELS {
            let k = p.var(g, &format!("fus.hsfa.{m}.{l}.k"))?;
            let b = p.var(g, &format!("fus.hsfa.{m}.{l}.b"))?;
            cur = g.conv_bias(cur, k, b, 2, Padding::Same)?;
            levels.push(cur);
        }
        let logits = p.var(g, &format!("fus.hsfa.{m}.logits"))?;
        let w = g.softmax(logits, 0)?;
        projected[i] = h;
        recalibrated[i] = weighted_upsample_sum(g, &levels, w, d.feat)?;
    }
    Ok(AlignedFeatures {
        projected,
        recalibrated,
    })
}

/// Channel co-activation gate `β_ij`, `[T,c]`.
pub fn coactivation(g: &mut Graph, p: &Params, frames: usize, mi: Var, mj: Var, name: &str) -> Result<Var> {
    let mut pooled = Vec::with_capacity(2);
    for m in [mi, mj] {
        let a = g.global_avg(m)?;
        let c = g.shape(a)[1];
        pooled.push(g.broadcast_to(a, &[frames, c])?);
    }
    let x = g.concat(&pooled, 1)?;
    let w1 = p.var(g, &format!("fus.coat.{name}.w1"))?;
    let b1 = p.var(g, &format!("fus.coat.{name}.b1"))?;
    let w2 = p.var(g, &format!("fus.coat.{name}.w2"))?;
    let b2 = p.var(g, &format!("fus.coat.{name}.b2"))?;
    let h = g.linear(x, w1, b1)?;
    let h = g.relu(h);
    let o = g.linear(h, w2, b2)?;
    Ok(g.sigmoid(o))
}

/// Pointwise correspondence gate `γ = (1 + cos) / 2`, `[.., h, w, 1]`.
pub fn correspondence(g: &mut Graph, mi: Var, mj: Var) -> Result<Var> {
    let prod = g.mul(mi, mj)?;
    let dot = g.sum_axes(prod, &[3])?;
    let si = g.mul(mi, mi)?;
    let si = g.sum_axes(si, &[3])?;
    let ni = g.sqrt_floor(si, COSINE_FLOOR);
    let sj = g.mul(mj, mj)?;
    let sj = g.sum_axes(sj, &[3])?;
    let nj = g.sqrt_floor(sj, COSINE_FLOOR);
    let den = g.mul(ni, nj)?;
    let cos = g.div(dot, den)?;
    let half = g.scale(cos, 0.5);
    Ok(g.offset(half, 0.5))
}

pub fn coat_fuse(g: &mut Graph, p: &Params, _d: &ModelDims, aligned: &AlignedFeatures) -> Result<Var> {
    let frames = aligned
        .projected
        .iter()
        .map(|&v| g.shape(v)[0])
        .max()
        .unwrap_or(1);
    let h = aligned.projected;
    let m = aligned.recalibrated;
    let mut gammas = [[None; 3]; 3];
    for i in 0..3 {
        for j in i + 1..3 {
            let gm = correspondence(g, m[i], m[j])?;
            gammas[i][j] = Some(gm);
            gammas[j][i] = Some(gm);
        }
    }
    let mut acc: Option<Var> = None;
    for (i, j) in pairs() {
        let beta = coactivation(g, p, frames, m[i], m[j], &pair_name(i, j))?;
        let c = g.shape(beta)[1];
        let beta = g.reshape(beta, &[frames, 1, 1, c])?;
        let gamma = gammas[i][j].expect("gamma computed for every pair");
        let gated = g.mul(h[i], gamma)?;
        let term = g.mul(gated, beta)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let pair_sum = acc.expect("six pairs");
    let pair_mean = g.scale(pair_sum, 1.0 / 6.0);
    let hs = g.add(h[0], h[1])?;
    let hs = g.add(hs, h[2])?;
    let residual = g.scale(hs, 1.0 / 3.0);
    g.add(pair_mean, residual)
}

/// Basis coefficients `α = softmax(MLP(avg F_fused))`, `[T,K]`.
pub fn basis_coefficients(g: &mut Graph, p: &Params, fused: Var, branch: &str) -> Result<Var> {
    let a = g.global_avg(fused)?;
    let w1 = p.var(g, &format!("fus.biba.{branch}.w1"))?;
    let b1 = p.var(g, &format!("fus.biba.{branch}.b1"))?;
    let w2 = p.var(g, &format!("fus.biba.{branch}.w2"))?;
    let b2 = p.var(g, &format!("fus.biba.{branch}.b2"))?;
    let h = g.linear(a, w1, b1)?;
    let h = g.relu(h);
    let o = g.linear(h, w2, b2)?;
    g.softmax(o, 1)
}

/// Per-frame mixed basis `Σ_k α_k Φ^(k)` as `([T,c,c], [T,1,c])`.
fn mixed_basis(g: &mut Graph, p: &Params, d: &ModelDims, fused: Var, branch: &str) -> Result<(Var, Var)> {
    let c = d.channels;
    let k = d.bases;
    let frames = g.shape(fused)[0];
    let alpha = basis_coefficients(g, p, fused, branch)?;
    let basis = p.var(g, &format!("fus.biba.{branch}.basis"))?;
    let basis = g.reshape(basis, &[k, c * c])?;
    let w = g.matmul(alpha, basis)?;
    let w = g.reshape(w, &[frames, c, c])?;
    let bias = p.var(g, &format!("fus.biba.{branch}.bias"))?;
    let b = g.matmul(alpha, bias)?;
    let b = g.reshape(b, &[frames, 1, c])?;
    Ok((w, b))
}

fn apply_basis(g: &mut Graph, p: &Params, d: &ModelDims, fused: Var, branch: &str) -> Result<Var> {
    let s = g.shape(fused).to_vec();
    let (w, b) = mixed_basis(g, p, d, fused, branch)?;
    let x = g.reshape(fused, &[s[0], s[1] * s[2], s[3]])?;
    let y = g.bmm(x, w)?;
    let y = g.add(y, b)?;
    g.reshape(y, &s)
}

/// Visual-centric map `F_visual`, `[T,h,w,c]`.
pub fn biba_visual(g: &mut Graph, p: &Params, d: &ModelDims, fused: Var) -> Result<Var> {
    apply_basis(g, p, d, fused, "v")
}

/// Context-centric map `F_context`, `[T,h,w,c]`.
pub fn biba_context_map(g: &mut Graph, p: &Params, d: &ModelDims, fused: Var) -> Result<Var> {
    apply_basis(g, p, d, fused, "c")
}

/// `avg(F_context)` computed as `Σ_k α_k Φ^(k)(avg F_fused)`; equal to pooling the
/// map because every basis is linear.
pub fn biba_context_vec(g: &mut Graph, p: &Params, d: &ModelDims, fused: Var) -> Result<Var> {
    let frames = g.shape(fused)[0];
    let (w, b) = mixed_basis(g, p, d, fused, "c")?;
    let a = g.global_avg(fused)?;
    let a = g.reshape(a, &[frames, 1, d.channels])?;
    let y = g.bmm(a, w)?;
    let y = g.add(y, b)?;
    g.reshape(y, &[frames, d.channels])
}

/// Full decomposition: `(F_visual, F_context map, F_context vector)`.
pub fn biba_decompose(g: &mut Graph, p: &Params, d: &ModelDims, fused: Var) -> Result<(Var, Var, Var)> {
    let visual = biba_visual(g, p, d, fused)?;
    let context = biba_context_map(g, p, d, fused)?;
    let vec = g.global_avg(context)?;
    Ok((visual, context, vec))
}

/// Knockout path: `F_fused = mean(F_r, F_c, F_f)` used as both the visual map
/// and (pooled) the context vector.
pub fn mean_fusion(g: &mut Graph, f_r: Var, f_c: Var, f_f: Var) -> Result<(Var, Var)> {
    let s = g.add(f_r, f_c)?;
    let s = g.add(s, f_f)?;
    let fused = g.scale(s, 1.0 / 3.0);
    let ctx = g.global_avg(fused)?;
    Ok((fused, ctx))
}
