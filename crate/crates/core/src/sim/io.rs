//! `CAMS` scenario files.
//!
//! Little-endian throughout. Header: magic `CAMS`, version `u32`, sequence
//! count `u32`. Each sequence is a record prefixed by its byte length (`u32`):
//!
//! ```text
//! label u8 | t_accident i32 (-1 = none) | T u16 | H u16 | W u16
//! fps f64 | flags u8 (1 distracted, 2 occluded, 4 hazard text) | regime u8
//! token count u16 | tokens u16...
//! scene f64 × T·H·W·3 | attention f64 × T·H·W
//! agent count u16 | per agent: id u16, class u8, role u8,
//!                   per frame: x, z, vx, vz f64 and hidden u8
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Agent, AgentClass, AgentRole, AgentState, Regime, Sequence, SequenceFlags};

pub const MAGIC: &[u8; 4] = b"CAMS";
pub const FORMAT_VERSION: u32 = 1;

fn encode(seq: &Sequence, out: &mut Vec<u8>) -> Result<()> {
    let too_big = |what: &str| Error::Input(format!("{what} does not fit the file format"));
    let t = seq.frames();
    let g = seq.grid();
    out.push(seq.label as u8);
    let ta = match seq.t_accident {
        Some(v) => i32::try_from(v).map_err(|_| too_big("accident frame"))?,
        None => -1,
    };
    out.extend_from_slice(&ta.to_le_bytes());
    for v in [t, g, g] {
        out.extend_from_slice(&u16::try_from(v).map_err(|_| too_big("extent"))?.to_le_bytes());
    }
    out.extend_from_slice(&seq.fps.to_le_bytes());
    let f = &seq.flags;
    out.push(f.distracted as u8 | (f.occluded as u8) << 1 | (f.hazard_text as u8) << 2);
    out.push(f.regime.code());
    out.extend_from_slice(&u16::try_from(seq.tokens.len()).map_err(|_| too_big("token list"))?.to_le_bytes());
    for tok in &seq.tokens {
        out.extend_from_slice(&tok.to_le_bytes());
    }
    for v in seq.scene.data().iter().chain(seq.attention.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&u16::try_from(seq.agents.len()).map_err(|_| too_big("agent list"))?.to_le_bytes());
    for a in &seq.agents {
        out.extend_from_slice(&a.id.to_le_bytes());
        out.push(a.class.index() as u8);
        out.push(a.role.code());
        for (s, &h) in a.track.iter().zip(&a.hidden) {
            for v in [s.x, s.z, s.vx, s.vz] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(h as u8);
        }
    }
    Ok(())
}

pub fn save_to(w: &mut impl Write, seqs: &[Sequence]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(seqs.len()).map_err(|_| Error::Input("too many sequences".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    let mut rec = Vec::new();
    for s in seqs {
        rec.clear();
        encode(s, &mut rec)?;
        let len = u32::try_from(rec.len()).map_err(|_| Error::Input("sequence record too large".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(&rec);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save(path: impl AsRef<Path>, seqs: &[Sequence]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_to(&mut f, seqs)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Sequence>> {
    load_from(&std::fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
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

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.to_string(),
        }
    }
}

fn decode(r: &mut Reader) -> Result<Sequence> {
    let label = match r.u8()? {
        0 => false,
        1 => true,
        _ => return Err(r.err("label must be 0 or 1")),
    };
    let ta = r.i32()?;
    let t_accident = match ta {
        -1 => None,
        v if v >= 0 => Some(v as usize),
        _ => return Err(r.err("bad accident frame")),
    };
    let t = r.u16()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    if h != w || t == 0 || h == 0 {
        return Err(r.err("grid must be square and nonempty"));
    }
    let fps = r.f64()?;
    let bits = r.u8()?;
    let regime = Regime::from_code(r.u8()?).ok_or_else(|| r.err("unknown regime"))?;
    let n_tok = r.u16()? as usize;
    let mut tokens = Vec::with_capacity(n_tok);
    for _ in 0..n_tok {
        tokens.push(r.u16()?);
    }
    let scene = Tensor::new(vec![t, h, w, 3], r.f64s(t * h * w * 3)?)?;
    let attention = Tensor::new(vec![t, h, w, 1], r.f64s(t * h * w)?)?;
    let n_agents = r.u16()? as usize;
    let mut agents = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let id = r.u16()?;
        let class = AgentClass::from_index(r.u8()? as usize).ok_or_else(|| r.err("unknown agent class"))?;
        let role = AgentRole::from_code(r.u8()?).ok_or_else(|| r.err("unknown agent role"))?;
        let mut track = Vec::with_capacity(t);
        let mut hidden = Vec::with_capacity(t);
        for _ in 0..t {
            let v = r.f64s(4)?;
            track.push(AgentState {
                x: v[0],
                z: v[1],
                vx: v[2],
                vz: v[3],
            });
            hidden.push(r.u8()? != 0);
        }
        agents.push(Agent {
            id,
            class,
            role,
            track,
            hidden,
        });
    }
    Ok(Sequence {
        fps,
        label,
        t_accident,
        tokens,
        scene,
        attention,
        agents,
        flags: SequenceFlags {
            distracted: bits & 1 != 0,
            occluded: bits & 2 != 0,
            hazard_text: bits & 4 != 0,
            regime,
        },
    })
}

pub fn load_from(bytes: &[u8]) -> Result<Vec<Sequence>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad magic, not a scenario file".into(),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let start = r.pos;
        let body = r.take(len)?;
        let mut sub = Reader { buf: body, pos: 0 };
        let seq = decode(&mut sub).map_err(|e| match e {
            Error::Parse { offset, msg } => Error::Parse {
                offset: start + offset,
                msg,
            },
            other => other,
        })?;
        if sub.pos != len {
            return Err(Error::Parse {
                offset: start + sub.pos,
                msg: "record length does not match its contents".into(),
            });
        }
        seq.validate().map_err(|e| Error::Parse {
            offset: start,
            msg: e.to_string(),
        })?;
        out.push(seq);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last record"));
    }
    Ok(out)
}
