//! Binary checkpoints: magic `FGCK`, version, config, then every tensor in
//! visit order as little-endian `f32`.

use std::io::Write;
use std::path::Path;

use super::params::{ModelParams, Parameters};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::layout::PatchGrid;

const MAGIC: &[u8; 4] = b"FGCK";
const VERSION: u32 = 1;

pub(crate) fn put_f32s(out: &mut Vec<u8>, p: &dyn Parameters) {
    p.for_each(&mut |t| {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
}

pub(crate) fn take_f32s(bytes: &[u8], p: &mut dyn Parameters) -> Result<usize> {
    let mut pos = 0;
    let mut short = false;
    p.for_each_mut(&mut |t| {
        for v in t.iter_mut() {
            match bytes.get(pos..pos + 4) {
                Some(b) => *v = f32::from_le_bytes(b.try_into().unwrap()) as f64,
                None => short = true,
            }
            pos += 4;
        }
    });
    if short {
        return Err(Error::Format("truncated tensor data".into()));
    }
    Ok(pos)
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl Reader<'_> {
    pub fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Format("truncated header".into()))?;
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size overflow".into()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn checkpoint_bytes(params: &ModelParams, cfg: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.n_layers,
        cfg.n_heads,
        cfg.embed_dim,
        cfg.vocab_size,
        cfg.n_categories,
        cfg.max_objects,
        cfg.grid.rows,
        cfg.grid.cols,
        cfg.coord_bins,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&cfg.dropout_rate.to_le_bytes());
    put_f32s(&mut out, params);
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n_layers = r.usize()?;
    let n_heads = r.usize()?;
    let embed_dim = r.usize()?;
    let vocab_size = r.usize()?;
    let n_categories = r.usize()?;
    let max_objects = r.usize()?;
    let rows = r.usize()?;
    let cols = r.usize()?;
    let coord_bins = r.usize()?;
    let dropout_rate = r.f64()?;
    let cfg = ModelConfig {
        n_layers,
        n_heads,
        embed_dim,
        vocab_size,
        n_categories,
        max_objects,
        grid: PatchGrid::new(rows, cols)?,
        dropout_rate,
        coord_bins,
    };
    cfg.validate()?;
    let mut params = ModelParams::zeros(&cfg);
    let used = take_f32s(&bytes[r.pos..], &mut params)?;
    if r.pos + used != bytes.len() {
        return Err(Error::Format("trailing bytes after tensors".into()));
    }
    Ok((params, cfg))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params, cfg))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, ModelConfig)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// `step loss` lines.
pub fn write_trace(path: impl AsRef<Path>, trace: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, l) in trace.iter().enumerate() {
        writeln!(f, "{i} {l:.17e}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let mut it = l.split_whitespace();
            let bad = |msg: &str| Error::Parse { line: n + 1, msg: msg.to_string() };
            it.next().ok_or_else(|| bad("missing step"))?.parse::<usize>().map_err(|_| bad("bad step"))?;
            it.next().ok_or_else(|| bad("missing loss"))?.parse::<f64>().map_err(|_| bad("bad loss"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let cfg = ModelConfig::tiny(6);
        let p = ModelParams::init(&cfg, 5, 0.3);
        let (q, c) = checkpoint_from_bytes(&checkpoint_bytes(&p, &cfg)).unwrap();
        assert_eq!(c, cfg);
        let a = p.to_flat();
        let b = q.to_flat();
        assert!(a.iter().zip(&b).all(|(x, y)| (*x as f32) as f64 == *y));
        let (r, _) = checkpoint_from_bytes(&checkpoint_bytes(&q, &cfg)).unwrap();
        assert_eq!(r, q);
    }

    #[test]
    fn rejects_garbage() {
        assert!(checkpoint_from_bytes(b"nope").is_err());
        let cfg = ModelConfig::tiny(6);
        let mut b = checkpoint_bytes(&ModelParams::zeros(&cfg), &cfg);
        b.pop();
        assert!(checkpoint_from_bytes(&b).is_err());
    }
}
