//! Binary container for backend outputs.
//!
//! ```text
//! magic      8 bytes   "SSELTRC\0"
//! version    u32 LE    currently 1
//! records    u32 LE
//! per record:
//!   meta_len u32 LE
//!   meta     meta_len bytes of UTF-8 `key=value` lines, in this order:
//!            clip_id, n_layers, n_heads, layers (comma list), n_memory, n_visual,
//!            n_instruction, n_caption, dim, caption_tokens, [text]
//!   payload  f32 LE: attention blocks (layer-major, then head, row-major
//!            n_caption x n_visual), then caption embeddings (caption_tokens x dim)
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on load. In `text`, `\` and
//! newlines are escaped as `\\` and `\n`.

use std::path::Path;

use crate::backend::BackendOutput;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::retrieval::CaptionRecord;
use crate::scalar::Scalar;
use crate::scoring::{AttentionTrace, TokenLayout};

pub const TRACE_MAGIC: [u8; 8] = *b"SSELTRC\0";
pub const TRACE_VERSION: u32 = 1;

fn escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(text: &str) -> Option<String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next()? {
                '\\' => out.push('\\'),
                'n' => out.push('\n'),
                _ => return None,
            }
        } else {
            out.push(c);
        }
    }
    Some(out)
}

/// Serializes `outputs` into the container format.
pub fn write_trace_bytes<T: Scalar>(outputs: &[BackendOutput<T>]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&TRACE_MAGIC);
    buf.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    let count = u32::try_from(outputs.len()).map_err(|_| Error::InvalidArgument("too many trace records".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for out in outputs {
        let t = &out.trace;
        let l = t.layout();
        let layers: Vec<String> = t.layers().iter().map(usize::to_string).collect();
        let mut meta = format!(
            "clip_id={}\nn_layers={}\nn_heads={}\nlayers={}\nn_memory={}\nn_visual={}\nn_instruction={}\nn_caption={}\ndim={}\ncaption_tokens={}\n",
            t.clip_id(),
            t.n_layers(),
            t.n_heads(),
            layers.join(","),
            l.n_memory,
            l.n_visual,
            l.n_instruction,
            l.n_caption,
            out.caption.token_embeddings().cols(),
            out.caption.token_count(),
        );
        if let Some(text) = &out.caption.text {
            meta.push_str(&format!("text={}\n", escape(text)));
        }
        let meta_len = u32::try_from(meta.len()).map_err(|_| Error::InvalidArgument("trace metadata too long".into()))?;
        buf.extend_from_slice(&meta_len.to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        let values = t
            .blocks()
            .iter()
            .flat_map(|b| b.as_slice())
            .chain(out.caption.token_embeddings().as_slice());
        for &v in values {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_trace<T: Scalar>(path: impl AsRef<Path>, outputs: &[BackendOutput<T>]) -> Result<()> {
    std::fs::write(path, write_trace_bytes(outputs)?)?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<BackendOutput<f64>>> {
    read_trace_bytes(&std::fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::TraceFormat { offset: self.pos as u64, reason: reason.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[derive(Default)]
struct Meta {
    clip_id: Option<u64>,
    n_layers: Option<usize>,
    n_heads: Option<usize>,
    layers: Option<Vec<usize>>,
    n_memory: Option<usize>,
    n_visual: Option<usize>,
    n_instruction: Option<usize>,
    n_caption: Option<usize>,
    dim: Option<usize>,
    caption_tokens: Option<usize>,
    text: Option<String>,
}

fn parse_meta(text: &str) -> std::result::Result<Meta, String> {
    let mut m = Meta::default();
    for line in text.lines() {
        let (key, value) = line.split_once('=').ok_or_else(|| format!("metadata line `{line}` has no `=`"))?;
        let num = |v: &str| v.parse::<usize>().map_err(|_| format!("`{key}` is not a count: `{v}`"));
        match key {
            "clip_id" => m.clip_id = Some(value.parse().map_err(|_| format!("bad clip_id `{value}`"))?),
            "n_layers" => m.n_layers = Some(num(value)?),
            "n_heads" => m.n_heads = Some(num(value)?),
            "layers" => {
                m.layers = Some(if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(num).collect::<std::result::Result<_, _>>()?
                })
            }
            "n_memory" => m.n_memory = Some(num(value)?),
            "n_visual" => m.n_visual = Some(num(value)?),
            "n_instruction" => m.n_instruction = Some(num(value)?),
            "n_caption" => m.n_caption = Some(num(value)?),
            "dim" => m.dim = Some(num(value)?),
            "caption_tokens" => m.caption_tokens = Some(num(value)?),
            "text" => m.text = Some(unescape(value).ok_or("bad escape in text")?),
            other => return Err(format!("unknown metadata key `{other}`")),
        }
    }
    Ok(m)
}

/// Parses a container; on any error nothing is returned.
pub fn read_trace_bytes(bytes: &[u8]) -> Result<Vec<BackendOutput<f64>>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != TRACE_MAGIC {
        return Err(Error::TraceFormat { offset: 0, reason: "bad magic".into() });
    }
    let version = cur.u32("version")?;
    if version != TRACE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = cur.u32("record count")?;
    let mut outputs = Vec::new();
    for _ in 0..count {
        let record_start = cur.pos;
        let meta_len = cur.u32("metadata length")? as usize;
        let meta_bytes = cur.take(meta_len, "metadata")?;
        let meta_text = std::str::from_utf8(meta_bytes).map_err(|_| cur.err("metadata is not UTF-8"))?;
        let meta = parse_meta(meta_text).map_err(|r| cur.err(r))?;
        let missing = |k: &str| cur.err(format!("metadata lacks `{k}`"));
        let clip_id = meta.clip_id.ok_or_else(|| missing("clip_id"))?;
        let n_layers = meta.n_layers.ok_or_else(|| missing("n_layers"))?;
        let n_heads = meta.n_heads.ok_or_else(|| missing("n_heads"))?;
        let layers = meta.layers.ok_or_else(|| missing("layers"))?;
        let layout = TokenLayout::new(
            meta.n_memory.ok_or_else(|| missing("n_memory"))?,
            meta.n_visual.ok_or_else(|| missing("n_visual"))?,
            meta.n_instruction.ok_or_else(|| missing("n_instruction"))?,
            meta.n_caption.ok_or_else(|| missing("n_caption"))?,
        );
        let dim = meta.dim.ok_or_else(|| missing("dim"))?;
        let caption_tokens = meta.caption_tokens.ok_or_else(|| missing("caption_tokens"))?;

        let block_len = layout.n_caption.checked_mul(layout.n_visual);
        let n_blocks = layers.len().checked_mul(n_heads);
        let total = block_len
            .zip(n_blocks)
            .and_then(|(b, n)| b.checked_mul(n))
            .and_then(|v| v.checked_add(caption_tokens.checked_mul(dim)?))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| cur.err("payload size overflows"))?;
        let payload_start = cur.pos;
        let payload = cur.take(total, "payload")?;
        let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        if let Some(i) = payload.chunks_exact(4).position(|c| !f32::from_le_bytes(c.try_into().unwrap()).is_finite()) {
            return Err(Error::TraceFormat { offset: (payload_start + 4 * i) as u64, reason: "non-finite value".into() });
        }
        let block_len = block_len.unwrap();
        let blocks: Vec<Matrix<f64>> = (0..n_blocks.unwrap())
            .map(|_| Matrix::from_raw(layout.n_caption, layout.n_visual, values.by_ref().take(block_len).collect()))
            .collect();
        let caption_data: Vec<f64> = values.collect();
        let bad = |e: Error| Error::TraceFormat { offset: record_start as u64, reason: e.to_string() };
        let trace = AttentionTrace::new(clip_id, n_layers, n_heads, layers, layout, blocks).map_err(bad)?;
        let caption = Matrix::new(caption_tokens, dim, caption_data)
            .and_then(|m| CaptionRecord::new(clip_id, m, meta.text))
            .map_err(bad)?;
        outputs.push(BackendOutput::new(caption, trace).map_err(bad)?);
    }
    if cur.pos != bytes.len() {
        return Err(cur.err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(outputs)
}
