//! Bidirectional gated recurrence over pooled per-frame features.
//!
//! Each direction runs a GRU cell
//!
//! ```text
//! z = σ(W_z [h; x] + b_z)      r = σ(W_r [h; x] + b_r)
//! h̃ = tanh(W_h [r ⊙ h; x] + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```
//!
//! from a zero state. Weights are stored as `[d, d + 2c]` (hidden columns
//! first); the input columns are applied to the whole sequence at once.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

use super::{Init, ModelDims, Params, TemporalMode, Variant};

pub const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];
pub const GATES: [&str; 3] = ["z", "r", "h"];

pub(crate) fn init(init: &mut Init, d: &ModelDims, variant: Variant) {
    let (h, c) = (d.hidden, d.channels);
    if variant == Variant::NoRecurrence {
        init.uniform("tmp.mlp.w", &[2 * c, 2 * h], 2 * c);
        init.fill("tmp.mlp.b", &[2 * h], 0.0);
        return;
    }
    for dir in DIRECTIONS {
        for gate in GATES {
            init.uniform(&format!("gru.{dir}.{gate}.w"), &[h, h + 2 * c], h + 2 * c);
            init.fill(&format!("gru.{dir}.{gate}.b"), &[h], 0.0);
        }
    }
}

/// `[avg F_visual ; F_context]` per frame, `[T, 2c]`.
pub fn pool_inputs(g: &mut Graph, visual: Var, context: Var) -> Result<Var> {
    let v = g.global_avg(visual)?;
    if g.shape(v) != g.shape(context) {
        return Err(Error::Dimension(format!(
            "pooled visual {:?} and context {:?} differ",
            g.shape(v),
            g.shape(context)
        )));
    }
    g.concat(&[v, context], 1)
}

struct Gate {
    /// `[d, d]` acting on the hidden state (row-vector convention).
    hidden: Var,
    /// `[T, d]` input contribution plus bias for every frame.
    input: Var,
}

fn gate(g: &mut Graph, p: &Params, prefix: &str, x: Var, hidden: usize) -> Result<Gate> {
    let w = p.var(g, &format!("{prefix}.w"))?;
    let b = p.var(g, &format!("{prefix}.b"))?;
    let cols = g.shape(w)[1];
    if cols != hidden + g.shape(x)[1] {
        return Err(Error::Dimension(format!(
            "{prefix}.w has {cols} columns, expected {}",
            hidden + g.shape(x)[1]
        )));
    }
    let wt = g.transpose(w)?;
    let u = g.slice(wt, 0, 0, hidden)?;
    let wx = g.slice(wt, 0, hidden, cols - hidden)?;
    let input = g.linear(x, wx, b)?;
    Ok(Gate { hidden: u, input })
}

/// One GRU direction over `x` (`[T, 2c]`), visiting frames in `order`.
/// Returns per-frame states `[1, d]` indexed by frame.
fn run_direction(
    g: &mut Graph,
    p: &Params,
    dir: &str,
    x: Var,
    hidden: usize,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<Var>> {
    let frames = g.shape(x)[0];
    let gz = gate(g, p, &format!("gru.{dir}.z"), x, hidden)?;
    let gr = gate(g, p, &format!("gru.{dir}.r"), x, hidden)?;
    let gh = gate(g, p, &format!("gru.{dir}.h"), x, hidden)?;
    let mut h = g.constant(&[1, hidden], 0.0);
    let mut out = vec![h; frames];
    for t in order {
        let xz = g.slice(gz.input, 0, t, 1)?;
        let xr = g.slice(gr.input, 0, t, 1)?;
        let xh = g.slice(gh.input, 0, t, 1)?;
        let hz = g.matmul(h, gz.hidden)?;
        let z = g.add(hz, xz)?;
        let z = g.sigmoid(z);
        let hr = g.matmul(h, gr.hidden)?;
        let r = g.add(hr, xr)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let hh = g.matmul(rh, gh.hidden)?;
        let cand = g.add(hh, xh)?;
        let cand = g.tanh(cand);
        // h' = h + z (h̃ − h)
        let diff = g.sub(cand, h)?;
        let step = g.mul(z, diff)?;
        h = g.add(h, step)?;
        out[t] = h;
    }
    Ok(out)
}

/// One step from `h_prev` (`[1, d]`) with input `x` (`[1, 2c]`), using the
/// concatenated form directly.
pub fn gru_cell(g: &mut Graph, p: &Params, dir: &str, h_prev: Var, x: Var) -> Result<Var> {
    let lin = |g: &mut Graph, gate: &str, h: Var| -> Result<Var> {
        let w = p.var(g, &format!("gru.{dir}.{gate}.w"))?;
        let b = p.var(g, &format!("gru.{dir}.{gate}.b"))?;
        let hx = g.concat(&[h, x], 1)?;
        let wt = g.transpose(w)?;
        g.linear(hx, wt, b)
    };
    let z = lin(g, "z", h_prev)?;
    let z = g.sigmoid(z);
    let r = lin(g, "r", h_prev)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h_prev)?;
    let cand = lin(g, "h", rh)?;
    let cand = g.tanh(cand);
    let keep = g.rsub_scalar(1.0, z);
    let a = g.mul(keep, h_prev)?;
    let b = g.mul(z, cand)?;
    g.add(a, b)
}

/// `H^gru = [h→; h←]` for every frame, `[T, 2d]`.
pub fn run_bidirectional(g: &mut Graph, p: &Params, d: &ModelDims, x: Var, mode: TemporalMode) -> Result<Var> {
    let frames = g.shape(x)[0];
    if frames == 0 {
        return Err(Error::Input("empty sequence".into()));
    }
    let fwd = run_direction(g, p, "fwd", x, d.hidden, 0..frames)?;
    let fwd = g.concat(&fwd, 0)?;
    let bwd = match mode {
        TemporalMode::Bidirectional => {
            let states = run_direction(g, p, "bwd", x, d.hidden, (0..frames).rev())?;
            g.concat(&states, 0)?
        }
        TemporalMode::Causal => g.constant(&[frames, d.hidden], 0.0),
    };
    g.concat(&[fwd, bwd], 1)
}

/// Knockout path: `tanh(x W + b)` applied to each frame independently.
pub fn frame_mlp(g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
    let w = p.var(g, "tmp.mlp.w")?;
    let b = p.var(g, "tmp.mlp.b")?;
    let y = g.linear(x, w, b)?;
    Ok(g.tanh(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, Variant};
    use crate::rng::Rng;
    use crate::Tensor;

    fn dims() -> ModelDims {
        ModelDims::default()
    }

    fn inputs(g: &mut Graph, seed: u64, frames: usize) -> Var {
        let mut rng = Rng::new(seed);
        g.leaf(Tensor::from_fn(&[frames, 32], |_| rng.normal()))
    }

    fn run(p: &Params, x: &Tensor, mode: TemporalMode) -> Tensor {
        let mut g = Graph::new();
        let x = g.leaf(x.clone());
        let h = run_bidirectional(&mut g, p, &dims(), x, mode).unwrap();
        g.value(h).clone()
    }

    #[test]
    fn pooling_concatenates_means() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::full(&[2, 4, 4, 3], 1.5));
        let c = g.leaf(Tensor::full(&[2, 3], -2.0));
        let x = pool_inputs(&mut g, v, c).unwrap();
        assert_eq!(g.shape(x), &[2, 6]);
        assert_eq!(&g.value(x).data()[..6], &[1.5, 1.5, 1.5, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn zero_weights_halve_state() {
        let mut p = Model::new(dims(), Variant::Full, 0).unwrap().params;
        for gate in GATES {
            p.get_mut(&format!("gru.fwd.{gate}.w")).unwrap().scale_assign(0.0);
            p.get_mut(&format!("gru.fwd.{gate}.b")).unwrap().scale_assign(0.0);
        }
        let mut g = Graph::new();
        let mut rng = Rng::new(1);
        let prev = g.leaf(Tensor::from_fn(&[1, 16], |_| rng.range(-1.0, 1.0)));
        let x = inputs(&mut g, 1, 1);
        let h = gru_cell(&mut g, &p, "fwd", prev, x).unwrap();
        let expect = g.value(prev).map(|v| 0.5 * v);
        assert_eq!(g.value(h), &expect);
    }

    #[test]
    fn cell_matches_sequence_path() {
        let p = Model::new(dims(), Variant::Full, 12).unwrap().params;
        let mut g = Graph::new();
        let x = inputs(&mut g, 4, 3);
        let seq = run_bidirectional(&mut g, &p, &dims(), x, TemporalMode::Causal).unwrap();
        let mut h = g.constant(&[1, 16], 0.0);
        for t in 0..3 {
            let xt = g.slice(x, 0, t, 1).unwrap();
            h = gru_cell(&mut g, &p, "fwd", h, xt).unwrap();
            let row = &g.value(seq).data()[t * 32..t * 32 + 16];
            for (a, b) in row.iter().zip(g.value(h).data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn saturated_update_gate() {
        let mut base = Model::new(dims(), Variant::Full, 5).unwrap().params;
        let mut g = Graph::new();
        let x = inputs(&mut g, 2, 4);
        let x0 = g.value(x).clone();

        // z ≡ 1: each state equals the candidate, which ignores h when r ≡ 0.
        base.insert("gru.fwd.z.b", Tensor::full(&[16], 1e4));
        base.insert("gru.fwd.r.b", Tensor::full(&[16], -1e4));
        let h = run(&base, &x0, TemporalMode::Causal);
        let wh = base.get("gru.fwd.h.w").unwrap();
        for t in 0..4 {
            for k in 0..16 {
                let pre: f64 = (0..32).map(|j| wh.data()[k * 48 + 16 + j] * x0.data()[t * 32 + j]).sum();
                let expect = pre.tanh();
                assert!((h.data()[t * 32 + k] - expect).abs() < 1e-12);
            }
        }

        // z ≡ 0: the state never leaves zero.
        base.insert("gru.fwd.z.b", Tensor::full(&[16], -1e4));
        let h = run(&base, &x0, TemporalMode::Causal);
        assert!(h.data().iter().all(|&v| v.abs() < 1e-12));
    }

    fn swap_directions(p: &Params) -> Params {
        let mut q = p.clone();
        for gate in GATES {
            for part in ["w", "b"] {
                let f = p.get(&format!("gru.fwd.{gate}.{part}")).unwrap().clone();
                let b = p.get(&format!("gru.bwd.{gate}.{part}")).unwrap().clone();
                q.insert(format!("gru.fwd.{gate}.{part}"), b);
                q.insert(format!("gru.bwd.{gate}.{part}"), f);
            }
        }
        q
    }

    #[test]
    fn single_frame_directions_agree_with_shared_weights() {
        let mut p = Model::new(dims(), Variant::Full, 9).unwrap().params;
        for gate in GATES {
            for part in ["w", "b"] {
                let f = p.get(&format!("gru.fwd.{gate}.{part}")).unwrap().clone();
                p.insert(format!("gru.bwd.{gate}.{part}"), f);
            }
        }
        let mut g = Graph::new();
        let x = inputs(&mut g, 3, 1);
        let h = run(&p, g.value(x), TemporalMode::Bidirectional);
        assert_eq!(&h.data()[..16], &h.data()[16..]);
    }

    #[test]
    fn time_reversal_swaps_halves() {
        let p = Model::new(dims(), Variant::Full, 4).unwrap().params;
        let mut g = Graph::new();
        let x = inputs(&mut g, 6, 7);
        let x0 = g.value(x).clone();
        let rev = Tensor::from_fn(&[7, 32], |i| x0.data()[(6 - i / 32) * 32 + i % 32]);
        let a = run(&p, &x0, TemporalMode::Bidirectional);
        let b = run(&swap_directions(&p), &rev, TemporalMode::Bidirectional);
        for t in 0..7 {
            let ra = &a.data()[t * 32..t * 32 + 32];
            let rb = &b.data()[(6 - t) * 32..(6 - t) * 32 + 32];
            for k in 0..16 {
                assert!((ra[k] - rb[16 + k]).abs() < 1e-14);
                assert!((ra[16 + k] - rb[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn scalar_trace_matches_hand_recurrence() {
        let d = ModelDims {
            hidden: 1,
            channels: 4,
            ..ModelDims::miniature()
        };
        let mut p = Params::default();
        // Inputs are [T, 8]; only the first input column carries weight.
        let row = |h: f64, x: f64| {
            let mut v = vec![0.0; 9];
            v[0] = h;
            v[1] = x;
            Tensor::new(vec![1, 9], v).unwrap()
        };
        for dir in DIRECTIONS {
            p.insert(format!("gru.{dir}.z.w"), row(0.5, 1.0));
            p.insert(format!("gru.{dir}.z.b"), Tensor::from_vec(vec![0.0]));
            p.insert(format!("gru.{dir}.r.w"), row(-1.0, 0.5));
            p.insert(format!("gru.{dir}.r.b"), Tensor::from_vec(vec![0.1]));
            p.insert(format!("gru.{dir}.h.w"), row(2.0, 1.0));
            p.insert(format!("gru.{dir}.h.b"), Tensor::from_vec(vec![-0.2]));
        }
        let xs = [1.0, -0.5, 2.0];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[3, 8], |i| if i % 8 == 0 { xs[i / 8] } else { 0.0 }));
        let out = run_bidirectional(&mut g, &p, &d, x, TemporalMode::Bidirectional).unwrap();
        let out = g.value(out).data().to_vec();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let cell = |h: f64, x: f64| {
            let z = sig(0.5 * h + x);
            let r = sig(-h + 0.5 * x + 0.1);
            let c = (2.0 * r * h + x - 0.2).tanh();
            (1.0 - z) * h + z * c
        };
        let mut h = 0.0;
        let mut fwd = [0.0; 3];
        for t in 0..3 {
            h = cell(h, xs[t]);
            fwd[t] = h;
        }
        let mut h = 0.0;
        let mut bwd = [0.0; 3];
        for t in (0..3).rev() {
            h = cell(h, xs[t]);
            bwd[t] = h;
        }
        for t in 0..3 {
            assert!((out[2 * t] - fwd[t]).abs() < 1e-15);
            assert!((out[2 * t + 1] - bwd[t]).abs() < 1e-15);
        }
        // First forward step by hand: z = σ(1), r = σ(0.6), h̃ = tanh(0.8).
        assert!((fwd[0] - sig(1.0) * 0.8f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn causal_mode_zeroes_backward_half() {
        let p = Model::new(dims(), Variant::Full, 4).unwrap().params;
        let mut g = Graph::new();
        let x = inputs(&mut g, 1, 5);
        let a = run(&p, g.value(x), TemporalMode::Causal);
        let b = run(&p, g.value(x), TemporalMode::Bidirectional);
        for t in 0..5 {
            assert!(a.data()[t * 32 + 16..t * 32 + 32].iter().all(|&v| v == 0.0));
            assert_eq!(&a.data()[t * 32..t * 32 + 16], &b.data()[t * 32..t * 32 + 16]);
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = Model::new(dims(), Variant::Full, 4).unwrap().params;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[0, 32]));
        assert!(matches!(
            run_bidirectional(&mut g, &p, &dims(), x, TemporalMode::Bidirectional),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn mlp_variant_is_framewise() {
        let p = Model::new(dims(), Variant::NoRecurrence, 4).unwrap().params;
        let mut g = Graph::new();
        let x = inputs(&mut g, 1, 4);
        let h = frame_mlp(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(h), &[4, 32]);
        let one = g.slice(x, 0, 2, 1).unwrap();
        let h1 = frame_mlp(&mut g, &p, one).unwrap();
        assert_eq!(g.value(h1).data(), &g.value(h).data()[64..96]);
    }
}
