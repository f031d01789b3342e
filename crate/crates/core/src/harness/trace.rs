//! Binary trace container.
//!
//! Header: `KVTR`, then u32 LE version, G, H, d, S, decode_steps, turns and
//! dtype (0 = f32 LE). The first turn's payload follows directly: prompt K,
//! prompt V, queries, appended K, appended V. Every later turn is preceded
//! by its new-prompt length as u32 LE. The file must end after the last turn.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::harness::workload::{Session, Turn};
use crate::kv_store::GroupLayout;

pub const MAGIC: &[u8; 4] = b"KVTR";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

fn put_u32<W: Write + ?Sized>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s<W: Write + ?Sized>(w: &mut W, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::TraceFormat(format!("{what} {v} does not fit in u32")))
}

pub fn write_trace<W: Write + ?Sized>(w: &mut W, session: &Session) -> Result<()> {
    session.validate()?;
    let GroupLayout {
        num_groups,
        heads_per_group,
        head_dim,
    } = session.layout;
    w.write_all(MAGIC)?;
    for (v, what) in [
        (VERSION as usize, "version"),
        (num_groups, "G"),
        (heads_per_group, "H"),
        (head_dim, "d"),
        (session.turns[0].prompt_len, "S"),
        (session.decode_steps, "decode_steps"),
        (session.turns.len(), "turns"),
        (DTYPE_F32 as usize, "dtype"),
    ] {
        put_u32(w, to_u32(v, what)?)?;
    }
    for (i, turn) in session.turns.iter().enumerate() {
        if i > 0 {
            put_u32(w, to_u32(turn.prompt_len, "prompt length")?)?;
        }
        put_f32s(w, &turn.prompt_keys)?;
        put_f32s(w, &turn.prompt_values)?;
        put_f32s(w, &turn.queries)?;
        put_f32s(w, &turn.step_keys)?;
        put_f32s(w, &turn.step_values)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::TraceFormat(format!(
                    "truncated {what}: need {n} bytes at offset {}, file has {}",
                    self.at,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let n = count
            .checked_mul(4)
            .ok_or_else(|| Error::TraceFormat(format!("{what} size overflows")))?;
        let b = self.take(n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn product(dims: &[usize], what: &str) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &x| acc.checked_mul(x))
        .ok_or_else(|| Error::TraceFormat(format!("{what} size overflows")))
}

pub fn read_trace<R: Read>(r: &mut R) -> Result<Session> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_trace(&bytes)
}

pub fn parse_trace(bytes: &[u8]) -> Result<Session> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::TraceFormat("bad magic, expected KVTR".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::TraceFormat(format!("unsupported version {version}")));
    }
    let g = c.u32("G")?;
    let h = c.u32("H")?;
    let d = c.u32("d")?;
    let s = c.u32("S")?;
    let steps = c.u32("decode_steps")?;
    let turns = c.u32("turns")?;
    let dtype = c.u32("dtype")?;
    if dtype != DTYPE_F32 as usize {
        return Err(Error::TraceFormat(format!(
            "unsupported dtype code {dtype}"
        )));
    }
    let layout = GroupLayout::new(g, h, d).map_err(|e| Error::TraceFormat(e.to_string()))?;
    if turns == 0 || steps == 0 {
        return Err(Error::TraceFormat(
            "turns and decode_steps must be >= 1".into(),
        ));
    }
    let query_len = product(&[steps, g, h, d], "queries")?;
    let step_len = product(&[steps, g, d], "appended tokens")?;
    let mut out = Vec::with_capacity(turns.min(1024));
    for i in 0..turns {
        let p = if i == 0 {
            s
        } else {
            c.u32("turn prompt length")?
        };
        let tok = product(&[p, g, d], "prompt")?;
        out.push(Turn {
            prompt_len: p,
            prompt_keys: c.f32s(tok, "prompt keys")?,
            prompt_values: c.f32s(tok, "prompt values")?,
            queries: c.f32s(query_len, "queries")?,
            step_keys: c.f32s(step_len, "appended keys")?,
            step_values: c.f32s(step_len, "appended values")?,
        });
    }
    if c.at != bytes.len() {
        return Err(Error::TraceFormat(format!(
            "{} trailing bytes after the last turn",
            bytes.len() - c.at
        )));
    }
    Ok(Session {
        layout,
        decode_steps: steps,
        turns: out,
    })
}
