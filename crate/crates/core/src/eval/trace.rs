//! Running a model over sequences to produce risk traces.

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{head, Model};
use crate::rng::Rng;
use crate::sim::Sequence;
use crate::tensor::Tensor;

use super::metrics::RiskTrace;

/// Forward pass over one sequence. Thresholds use the entropy of the raw
/// attention map and the pooled context vector of each frame.
pub fn trace(model: &Model, seq: &Sequence) -> Result<RiskTrace> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &seq.input())?;
    let t_len = seq.frames();
    let p = g.value(out.prob).data().to_vec();
    let ctx = g.value(out.context);
    let c = ctx.shape()[1];
    let risk = g.value(out.risk_map);
    let cells = risk.shape()[1];
    let (l1, l2) = model.lambdas();
    let mut tau = Vec::with_capacity(t_len);
    let mut entropy = Vec::with_capacity(t_len);
    let mut risk_peak = Vec::with_capacity(t_len);
    let side = model.dims.feat;
    for t in 0..t_len {
        let e = head::attention_entropy(seq.attention_frame(t))?;
        tau.push(head::adaptive_threshold(l1, l2, e, &ctx.data()[t * c..(t + 1) * c]));
        entropy.push(e);
        let row = &risk.data()[t * cells..(t + 1) * cells];
        let arg = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        risk_peak.push([arg % side, arg / side]);
    }
    let tr = RiskTrace {
        label: seq.label,
        t_accident: seq.t_accident,
        fps: seq.fps,
        p,
        tau,
        entropy,
        risk_peak,
    };
    tr.validate()?;
    Ok(tr)
}

pub fn traces(model: &Model, seqs: &[Sequence]) -> Result<Vec<RiskTrace>> {
    seqs.iter().map(|s| trace(model, s)).collect()
}

/// [`traces`] spread over up to `threads` scoped threads. Output order and
/// values do not depend on the thread count.
pub fn traces_threaded(model: &Model, seqs: &[Sequence], threads: usize) -> Result<Vec<RiskTrace>> {
    let threads = threads.max(1).min(seqs.len().max(1));
    if threads == 1 {
        return traces(model, seqs);
    }
    let chunk = seqs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<RiskTrace>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seqs.chunks(chunk).map(|c| s.spawn(move || traces(model, c))).collect();
        handles.into_iter().map(|h| h.join().expect("trace worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(seqs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Simulates dropped frames: a seeded subset of `round(rate·(T−1))` frames
/// after the first is replaced by the most recent kept frame. Rate 0 returns
/// an exact copy.
pub fn drop_frames(seq: &Sequence, rate: f64, seed: u64) -> Result<Sequence> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("drop rate {rate} outside [0, 1)")));
    }
    let t_len = seq.frames();
    let n_drop = (rate * (t_len.saturating_sub(1)) as f64).round() as usize;
    let mut out = seq.clone();
    if n_drop == 0 {
        return Ok(out);
    }
    let mut candidates: Vec<usize> = (1..t_len).collect();
    Rng::new(seed).shuffle(&mut candidates);
    let mut dropped = vec![false; t_len];
    for &t in &candidates[..n_drop] {
        dropped[t] = true;
    }
    let mut source = 0;
    for t in 0..t_len {
        if dropped[t] {
            copy_frame(&seq.scene, out.scene.data_mut(), source, t);
            copy_frame(&seq.attention, out.attention.data_mut(), source, t);
        } else {
            source = t;
        }
    }
    Ok(out)
}

fn copy_frame(src: &Tensor, dst: &mut [f64], from: usize, to: usize) {
    let n = src.len() / src.shape()[0];
    dst[to * n..(to + 1) * n].copy_from_slice(&src.data()[from * n..(from + 1) * n]);
}

/// `frame,p,tau,alert,argmax_x,argmax_y` rows for one trace.
pub fn trace_csv(trace: &RiskTrace) -> String {
    let mut s = String::from("frame,p,tau,alert,argmax_x,argmax_y\n");
    for t in 0..trace.p.len() {
        let [x, y] = trace.risk_peak[t];
        let alert = (trace.p[t] > trace.tau[t]) as u8;
        s.push_str(&format!("{t},{},{},{alert},{x},{y}\n", trace.p[t], trace.tau[t]));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, Variant};
    use crate::sim::{generate, SimConfig};

    fn small() -> (Model, Vec<Sequence>) {
        let cfg = SimConfig {
            frames: 44,
            grid: 16,
            ..SimConfig::default()
        };
        let dims = ModelDims {
            grid: 16,
            feat: 4,
            channels: 4,
            refine_channels: 4,
            hidden: 4,
            ..ModelDims::default()
        };
        let seqs = generate(5, 2, 0.5, &cfg);
        (Model::new(dims, Variant::Full, 1).unwrap(), seqs.unwrap())
    }

    #[test]
    fn drop_rate_zero_is_identity() {
        let (_, seqs) = small();
        assert_eq!(drop_frames(&seqs[0], 0.0, 3).unwrap(), seqs[0]);
    }

    #[test]
    fn dropped_frames_repeat_last_kept() {
        let (_, seqs) = small();
        let s = &seqs[0];
        let d = drop_frames(s, 0.5, 3).unwrap();
        let n = s.grid() * s.grid();
        let frame = |q: &Sequence, t: usize| q.attention.data()[t * n..(t + 1) * n].to_vec();
        assert_eq!(frame(&d, 0), frame(s, 0));
        let mut changed = 0;
        for t in 1..s.frames() {
            let f = frame(&d, t);
            if f != frame(s, t) {
                changed += 1;
                assert_eq!(f, frame(&d, t - 1));
            }
        }
        assert_eq!(changed, 22);
        assert!(drop_frames(s, 1.0, 0).is_err());
    }

    #[test]
    fn trace_columns_line_up() {
        let (m, seqs) = small();
        let tr = trace(&m, &seqs[0]).unwrap();
        assert_eq!(tr.p.len(), 44);
        assert!(tr.p.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(tr.tau.iter().all(|&t| (head::TAU_MIN..=head::TAU_MAX).contains(&t)));
        assert!(tr.risk_peak.iter().all(|&[x, y]| x < 4 && y < 4));
        let csv = trace_csv(&tr);
        assert_eq!(csv.lines().count(), 45);
    }

    #[test]
    fn threaded_traces_match() {
        let (m, seqs) = small();
        assert_eq!(traces_threaded(&m, &seqs, 3).unwrap(), traces(&m, &seqs).unwrap());
    }

    #[test]
    fn zero_lambdas_give_half_threshold() {
        let (mut m, seqs) = small();
        m.set_lambdas(0.0, 0.0);
        let tr = trace(&m, &seqs[1]).unwrap();
        assert!(tr.tau.iter().all(|&t| t == 0.5));
    }
}
