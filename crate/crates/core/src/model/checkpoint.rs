//! Versioned little-endian weight checkpoint.
//!
//! ```text
//! magic            8 bytes  "TKALCKPT"
//! version          u32      = 1
//! config block     13 × u32 (image_size, channels, patch_size, d_vision, d_text,
//!                  embed_dim, vision_layers, text_layers, n_heads, mlp_ratio,
//!                  n_classes, n_prompt_tokens, prompt_depth), then tau f64, ln_eps f64
//! n_arrays         u32
//! per array        name_len u32, name (UTF-8), rows u32, cols u32, rows·cols × f64
//! has_prompts      u32 (0 or 1)
//! prompts          if 1: depth u32, then depth text arrays and depth coupling
//!                  arrays in the per-array layout above
//! ```
//!
//! The backbone hash is SHA-256 over the config block and backbone arrays,
//! so attaching or changing prompts never changes it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamSet;
use super::{Model, ModelConfig, PromptState};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TKALCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rows());
    put_u32(out, t.cols());
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn config_bytes(cfg: &ModelConfig, out: &mut Vec<u8>) {
    for v in [
        cfg.image_size,
        cfg.channels,
        cfg.patch_size,
        cfg.d_vision,
        cfg.d_text,
        cfg.embed_dim,
        cfg.vision_layers,
        cfg.text_layers,
        cfg.n_heads,
        cfg.mlp_ratio,
        cfg.n_classes,
        cfg.n_prompt_tokens,
        cfg.prompt_depth,
    ] {
        put_u32(out, v);
    }
    out.extend_from_slice(&cfg.tau.to_le_bytes());
    out.extend_from_slice(&cfg.ln_eps.to_le_bytes());
}

/// Serialized config block plus backbone arrays (the hashed region).
pub(crate) fn backbone_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * model.params.total_len() + 1024);
    config_bytes(&model.config, &mut out);
    put_u32(&mut out, model.params.len());
    for (name, t) in model.params.iter() {
        put_array(&mut out, name, t);
    }
    out
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    model: &Model,
    prompts: Option<&PromptState>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend(backbone_bytes(model));
    match prompts {
        None => put_u32(&mut out, 0),
        Some(p) => {
            p.check_compatible(&model.config)?;
            put_u32(&mut out, 1);
            put_u32(&mut out, p.depth());
            for (l, t) in p.text().iter().enumerate() {
                put_array(&mut out, &format!("prompt.text.{l}"), t);
            }
            for (l, t) in p.coupling().iter().enumerate() {
                put_array(&mut out, &format!("prompt.coupling.{l}"), t);
            }
        }
    }
    w.write_all(&out)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model, prompts: Option<&PromptState>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, prompts)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn array(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()?;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::format("array name is not UTF-8"))?
            .to_string();
        let (rows, cols) = (self.u32()?, self.u32()?);
        if rows == 0 || cols == 0 {
            return Err(Error::format(format!("array {name:?} has an empty shape")));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format("array too large"))?;
        let raw = self.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::format("array too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::matrix(rows, cols, data)))
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Model, Option<PromptState>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = c.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut f = [0usize; 13];
    for v in &mut f {
        *v = c.u32()?;
    }
    let config = ModelConfig {
        image_size: f[0],
        channels: f[1],
        patch_size: f[2],
        d_vision: f[3],
        d_text: f[4],
        embed_dim: f[5],
        vision_layers: f[6],
        text_layers: f[7],
        n_heads: f[8],
        mlp_ratio: f[9],
        n_classes: f[10],
        n_prompt_tokens: f[11],
        prompt_depth: f[12],
        tau: c.f64()?,
        ln_eps: c.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::format(format!("invalid config block: {e}")))?;
    let n = c.u32()?;
    let mut params = ParamSet::default();
    for _ in 0..n {
        let (name, t) = c.array()?;
        params.push(name, t);
    }
    let model = Model::from_params(config, params)?;
    let prompts = match c.u32()? {
        0 => None,
        1 => {
            let depth = c.u32()?;
            let mut text = Vec::with_capacity(depth);
            let mut coupling = Vec::with_capacity(depth);
            for _ in 0..depth {
                text.push(c.array()?.1);
            }
            for _ in 0..depth {
                coupling.push(c.array()?.1);
            }
            let p = PromptState::new(text, coupling).map_err(|e| Error::format(e.to_string()))?;
            p.check_compatible(model.config())
                .map_err(|e| Error::format(e.to_string()))?;
            Some(p)
        }
        other => return Err(Error::format(format!("bad prompt flag {other}"))),
    };
    if c.pos != buf.len() {
        return Err(Error::format(format!(
            "{} trailing bytes",
            buf.len() - c.pos
        )));
    }
    Ok((model, prompts))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<PromptState>)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
