//! Per-modality encoders producing aligned `[.., h, w, c]` feature maps.
//!
//! * scene grid: three 3×3 convolutions (strides 2, 2, 1) with ReLU;
//! * tokens: embedding mean over non-pad ids, a linear map, broadcast over
//!   the grid plus a learned positional grid;
//! * attention map: the dual-stage refiner. The map is average-pooled to the
//!   feature resolution and lifted to `c0` channels by a 3×3 convolution.
//!   Channel attention (shared MLP over global average and max descriptors)
//!   scales channels; spatial attention (3×3 convolution over channel average
//!   and max) scales positions. A 4-level pyramid of stride-2 convolutions is
//!   refined level by level with the same two stages, fused by
//!   softmax-weighted nearest upsampling, and mapped to `c` channels.
//!
//! Refiner convolutions use replicate padding, so a spatially uniform map
//! stays uniform through every stage.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Padding;

use super::{Init, ModelDims, Params, Variant};

pub const PYRAMID_LEVELS: usize = 4;

pub(crate) fn init(init: &mut Init, d: &ModelDims, variant: Variant) {
    let [w1, w2] = d.scene_widths;
    let c = d.channels;
    let c0 = d.refine_channels;
    init.uniform_relu("enc.scene.k1", &[3, 3, 3, w1], 27);
    init.fill("enc.scene.b1", &[w1], 0.0);
    init.uniform_relu("enc.scene.k2", &[3, 3, w1, w2], 9 * w1);
    init.fill("enc.scene.b2", &[w2], 0.0);
    init.uniform_relu("enc.scene.k3", &[3, 3, w2, c], 9 * w2);
    init.fill("enc.scene.b3", &[c], 0.0);

    init.uniform("enc.text.embed", &[d.vocab, c], 1);
    init.uniform("enc.text.w", &[c, c], c);
    init.fill("enc.text.b", &[c], 0.0);
    init.uniform("enc.text.pos", &[1, d.feat, d.feat, c], 4);

    if variant == Variant::NoRefiner {
        init.uniform("enc.att.raw.k", &[1, 1, 1, c], 1);
        init.fill("enc.att.raw.b", &[c], 0.0);
        return;
    }
    let r = c0 / 4;
    init.uniform("enc.att.lift.k", &[3, 3, 1, c0], 9);
    init.fill("enc.att.lift.b", &[c0], 0.0);
    init.uniform("enc.att.ch.w1", &[c0, r], c0);
    init.fill("enc.att.ch.b1", &[r], 0.0);
    init.uniform("enc.att.ch.w2", &[r, c0], r);
    init.fill("enc.att.ch.b2", &[c0], 0.0);
    init.uniform("enc.att.sp.k", &[3, 3, 2, 1], 18);
    init.fill("enc.att.sp.b", &[1], 0.0);
    for l in 1..PYRAMID_LEVELS {
        init.uniform(&format!("enc.att.pyr{l}.k"), &[3, 3, c0, c0], 9 * c0);
        init.fill(&format!("enc.att.pyr{l}.b"), &[c0], 0.0);
    }
    init.fill("enc.att.levels", &[PYRAMID_LEVELS], 0.0);
    init.uniform("enc.att.out.k", &[1, 1, c0, c], c0);
    init.fill("enc.att.out.b", &[c], 0.0);
}

/// Scene grid `[T,H,W,3]` to `F_r` `[T,h,w,c]`.
pub fn encode_scene(g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
    let strides = [2, 2, 1];
    let mut h = x;
    for (i, s) in strides.iter().enumerate() {
        let k = p.var(g, &format!("enc.scene.k{}", i + 1))?;
        let b = p.var(g, &format!("enc.scene.b{}", i + 1))?;
        h = g.conv_bias(h, k, b, *s, Padding::Same)?;
        h = g.relu(h);
    }
    Ok(h)
}

/// Token ids to `F_c` `[1,h,w,c]` (identical for every frame of a clip).
pub fn encode_text(g: &mut Graph, p: &Params, d: &ModelDims, tokens: &[u16]) -> Result<Var> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= d.vocab) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of {}",
            d.vocab
        )));
    }
    let nonpad = tokens.iter().filter(|&&t| t != 0).count();
    let mut weights = vec![0.0; d.vocab];
    if nonpad > 0 {
        for &t in tokens.iter().filter(|&&t| t != 0) {
            weights[t as usize] += 1.0 / nonpad as f64;
        }
    }
    let sel = g.leaf(crate::Tensor::new(vec![1, d.vocab], weights)?);
    let embed = p.var(g, "enc.text.embed")?;
    let pooled = g.matmul(sel, embed)?;
    let w = p.var(g, "enc.text.w")?;
    let b = p.var(g, "enc.text.b")?;
    let v = g.linear(pooled, w, b)?;
    let v = g.reshape(v, &[1, 1, 1, d.channels])?;
    let pos = p.var(g, "enc.text.pos")?;
    g.add(v, pos)
}

/// Handles of the refiner's intermediate values, exposed for inspection.
#[derive(Clone, Debug)]
pub struct RefinedAttention {
    /// `F_f`, `[T,h,w,c]`.
    pub features: Var,
    /// Softmax pyramid weights, `[levels]`.
    pub level_weights: Var,
    /// Lifted map before any attention, `[T,h,w,c0]`.
    pub lifted: Var,
    /// Refined levels before upsampling.
    pub levels: Vec<Var>,
    /// Channel attention per level, `[T,1,1,c0]`.
    pub channel_attention: Vec<Var>,
    /// Spatial attention per level, `[T,h_l,w_l,1]`.
    pub spatial_attention: Vec<Var>,
}

fn channel_mlp(g: &mut Graph, p: &Params, v: Var) -> Result<Var> {
    let w1 = p.var(g, "enc.att.ch.w1")?;
    let b1 = p.var(g, "enc.att.ch.b1")?;
    let w2 = p.var(g, "enc.att.ch.w2")?;
    let b2 = p.var(g, "enc.att.ch.b2")?;
    let h = g.linear(v, w1, b1)?;
    let h = g.relu(h);
    g.linear(h, w2, b2)
}

/// Channel then spatial attention. Returns `(refined, a_ch, a_sp)`.
fn dual_attention(g: &mut Graph, p: &Params, z: Var) -> Result<(Var, Var, Var)> {
    let s = g.shape(z).to_vec();
    let (n, c0) = (s[0], s[3]);
    let avg = g.global_avg(z)?;
    let mx = g.global_max(z)?;
    let ma = channel_mlp(g, p, avg)?;
    let mm = channel_mlp(g, p, mx)?;
    let logits = g.add(ma, mm)?;
    let a_ch = g.sigmoid(logits);
    let a_ch = g.reshape(a_ch, &[n, 1, 1, c0])?;
    let z1 = g.mul(z, a_ch)?;

    let cavg = g.mean_axes(z1, &[3])?;
    let cmax = g.max_axes(z1, &[3])?;
    let desc = g.concat(&[cavg, cmax], 3)?;
    let k = p.var(g, "enc.att.sp.k")?;
    let b = p.var(g, "enc.att.sp.b")?;
    let sp = g.conv_bias(desc, k, b, 1, Padding::Replicate)?;
    let a_sp = g.sigmoid(sp);
    let z2 = g.mul(z1, a_sp)?;
    Ok((z2, a_ch, a_sp))
}

fn pooled_map(g: &mut Graph, d: &ModelDims, x_f: Var) -> Result<Var> {
    let s = g.shape(x_f).to_vec();
    if s.len() != 4 || s[1] != d.grid || s[2] != d.grid || s[3] != 1 {
        return Err(Error::Dimension(format!(
            "attention map must be [T,{g},{g},1], got {s:?}",
            g = d.grid
        )));
    }
    let v = g.value(x_f);
    let frame = d.grid * d.grid;
    for (t, chunk) in v.data().chunks(frame).enumerate() {
        if chunk.iter().any(|&x| x < 0.0) || chunk.iter().all(|&x| x == 0.0) {
            return Err(Error::Input(format!(
                "attention map of frame {t} must be nonnegative and not all zero"
            )));
        }
    }
    // Rescale each frame to unit mean so the refiner sees O(1) inputs
    // whatever the normalisation of the source map.
    let pooled = g.avg_pool(x_f, d.grid / d.feat)?;
    let mean = g.mean_axes(pooled, &[1, 2, 3])?;
    g.div(pooled, mean)
}

/// Attention map `[T,H,W,1]` to `F_f` `[T,h,w,c]` through the dual-stage refiner.
pub fn refine_attention(g: &mut Graph, p: &Params, d: &ModelDims, x_f: Var) -> Result<RefinedAttention> {
    let x = pooled_map(g, d, x_f)?;
    let k = p.var(g, "enc.att.lift.k")?;
    let b = p.var(g, "enc.att.lift.b")?;
    let lifted = g.conv_bias(x, k, b, 1, Padding::Replicate)?;

    let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
    let mut a_chs = Vec::with_capacity(PYRAMID_LEVELS);
    let mut a_sps = Vec::with_capacity(PYRAMID_LEVELS);
    let mut cur = lifted;
    for l in 0..PYRAMID_LEVELS {
        if l > 0 {
            let k = p.var(g, &format!("enc.att.pyr{l}.k"))?;
            let b = p.var(g, &format!("enc.att.pyr{l}.b"))?;
            let down = g.conv_bias(cur, k, b, 2, Padding::Replicate)?;
            cur = g.relu(down);
        }
        let (refined, a_ch, a_sp) = dual_attention(g, p, cur)?;
        levels.push(refined);
        a_chs.push(a_ch);
        a_sps.push(a_sp);
        cur = refined;
    }

    let logits = p.var(g, "enc.att.levels")?;
    let weights = g.softmax(logits, 0)?;
    let fused = weighted_upsample_sum(g, &levels, weights, d.feat)?;
    let k = p.var(g, "enc.att.out.k")?;
    let b = p.var(g, "enc.att.out.b")?;
    let features = g.conv_bias(fused, k, b, 1, Padding::Same)?;
    Ok(RefinedAttention {
        features,
        level_weights: weights,
        lifted,
        levels,
        channel_attention: a_chs,
        spatial_attention: a_sps,
    })
}

/// `Σ_l w_l · upsample(level_l)` at `size × size`.
pub(crate) fn weighted_upsample_sum(g: &mut Graph, levels: &[Var], weights: Var, size: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (l, &lv) in levels.iter().enumerate() {
        let up = g.upsample(lv, (size, size))?;
        let w = g.slice(weights, 0, l, 1)?;
        let w = g.reshape(w, &[1, 1, 1, 1])?;
        let term = g.mul(up, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Dimension("empty pyramid".into()))
}

/// Knockout path: pooled attention map lifted by a 1×1 convolution.
pub fn raw_attention(g: &mut Graph, p: &Params, d: &ModelDims, x_f: Var) -> Result<Var> {
    let x = pooled_map(g, d, x_f)?;
    let k = p.var(g, "enc.att.raw.k")?;
    let b = p.var(g, "enc.att.raw.b")?;
    g.conv_bias(x, k, b, 1, Padding::Same)
}
