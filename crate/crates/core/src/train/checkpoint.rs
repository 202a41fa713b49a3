//! `CAMR` checkpoint files.
//!
//! Little-endian: magic `CAMR`, version `u32`, tensor count `u32`, then per
//! tensor a `u16` name length and UTF-8 name, `u8` rank, `u32` dims and the
//! values as `f64`. The model layout travels as the `meta.config` tensor.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelDims, Params, TemporalMode, Variant};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CAMR";
pub const FORMAT_VERSION: u32 = 1;
pub const META: &str = "meta.config";

fn meta_tensor(m: &Model) -> Tensor {
    let d = &m.dims;
    let mode = match m.mode {
        TemporalMode::Bidirectional => 0.0,
        TemporalMode::Causal => 1.0,
    };
    Tensor::from_vec(vec![
        d.grid as f64,
        d.feat as f64,
        d.channels as f64,
        d.refine_channels as f64,
        d.hidden as f64,
        d.bases as f64,
        d.vocab as f64,
        d.tokens as f64,
        d.scene_widths[0] as f64,
        d.scene_widths[1] as f64,
        m.variant.code() as f64,
        mode,
    ])
}

fn parse_meta(t: &Tensor) -> Result<(ModelDims, Variant, TemporalMode)> {
    let v = t.data();
    if t.shape() != [12] || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0 || *x > 1e6) {
        return Err(Error::Input("malformed model layout in checkpoint".into()));
    }
    let u = |i: usize| v[i] as usize;
    let dims = ModelDims {
        grid: u(0),
        feat: u(1),
        channels: u(2),
        refine_channels: u(3),
        hidden: u(4),
        bases: u(5),
        vocab: u(6),
        tokens: u(7),
        scene_widths: [u(8), u(9)],
    };
    let variant = Variant::from_code(u(10) as u8).ok_or_else(|| Error::Input("unknown model variant".into()))?;
    let mode = match u(11) {
        0 => TemporalMode::Bidirectional,
        1 => TemporalMode::Causal,
        _ => return Err(Error::Input("unknown temporal mode".into())),
    };
    Ok((dims, variant, mode))
}

pub fn save_to(w: &mut impl Write, model: &Model) -> Result<()> {
    let meta = meta_tensor(model);
    let mut entries: Vec<(&str, &Tensor)> = model.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    entries.push((META, &meta));
    entries.sort_by(|a, b| a.0.cmp(b.0));
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Input(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut b = Vec::new();
    save_to(&mut b, model).expect("writing to memory");
    b
}

pub fn save(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint and checks every tensor against the layout it names.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad magic, not a checkpoint".into(),
        });
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let count = c.u32()? as usize;
    let mut tensors = Params::default();
    let mut meta = None;
    for _ in 0..count {
        let at = c.pos;
        let len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Parse {
                offset: at,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Parse {
            offset: c.pos,
            msg: "tensor size overflows".into(),
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)?;
        if name == META {
            meta = Some(t);
        } else if tensors.contains(&name) {
            return Err(Error::Parse {
                offset: at,
                msg: format!("duplicate tensor {name}"),
            });
        } else {
            tensors.insert(name, t);
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Parse {
            offset: c.pos,
            msg: "trailing bytes after last tensor".into(),
        });
    }
    let meta = meta.ok_or_else(|| Error::Input(format!("checkpoint has no {META} tensor")))?;
    let (dims, variant, mode) = parse_meta(&meta)?;
    let mut model = Model::new(dims, variant, 0)?;
    model.mode = mode;
    if model.params.len() != tensors.len() {
        return Err(Error::Input(format!(
            "checkpoint holds {} tensors, layout expects {}",
            tensors.len(),
            model.params.len()
        )));
    }
    for (name, slot) in model.params.iter_mut() {
        let t = tensors
            .get(name)
            .map_err(|_| Error::Input(format!("checkpoint is missing {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Input(format!(
                "{name}: shape {:?} does not match layout {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(ModelDims::miniature(), Variant::Full, 9).unwrap()
    }

    #[test]
    fn round_trip_preserves_every_tensor() {
        let mut m = model();
        m.mode = TemporalMode::Causal;
        m.set_lambdas(0.05, 0.17);
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let b = to_bytes(&model());
        for cut in [2, 9, 20, b.len() - 3] {
            assert!(matches!(from_bytes(&b[..cut]), Err(Error::Parse { .. })), "{cut}");
        }
        let mut v = b.clone();
        v[4] = 2;
        assert!(matches!(from_bytes(&v), Err(Error::Version { expected: 1, found: 2 })));
        // First name length blown up past the end of the file.
        let mut l = b.clone();
        l[12] = 0xff;
        l[13] = 0xff;
        assert!(matches!(from_bytes(&l), Err(Error::Parse { .. })));
        let mut m = b;
        m[3] = b'S';
        assert!(matches!(from_bytes(&m), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn variant_mismatch_detected() {
        let full = model();
        let mut other = Model::new(ModelDims::miniature(), Variant::NoRecurrence, 9).unwrap();
        // Swap layouts: knockout parameters under the full model's meta.
        other.variant = full.variant;
        assert!(matches!(from_bytes(&to_bytes(&other)), Err(Error::Input(_))));
    }
}
