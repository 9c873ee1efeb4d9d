//! Binary checkpoint format.
//!
//! ```text
//! salu-checkpoint\n
//! format_version=1\n
//! kind=policy|reward\n
//! <ModelConfig fields as key=value lines>\n
//! tensors=<count>\n
//! end\n
//! then per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank × u64 extents
//!   u64 payload length in bytes, payload as little-endian f64
//! ```
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use salu_autodiff::{ParamStore, Tensor};

use crate::error::{Result, SaluError};
use crate::model::{HeadKind, ModelConfig, Transformer};

pub const MAGIC: &str = "salu-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_to<W: Write>(net: &Transformer, mut w: W) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "format_version={FORMAT_VERSION}")?;
    writeln!(w, "kind={}", net.kind().as_str())?;
    for line in net.config().to_header_lines() {
        writeln!(w, "{line}")?;
    }
    writeln!(w, "tensors={}", net.params().len())?;
    writeln!(w, "end")?;
    for (_, name, t) in net.params().iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&((t.numel() * 8) as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> SaluError {
    SaluError::Checkpoint(msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated tensor record"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated tensor record"))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_from<R: BufRead>(mut r: R) -> Result<Transformer> {
    let mut header = BTreeMap::new();
    let mut line = String::new();
    let mut first = true;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        let l = line.trim_end_matches('\n');
        if first {
            if l != MAGIC {
                return Err(bad("not a checkpoint file"));
            }
            first = false;
            continue;
        }
        if l == "end" {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header line `{l}`")))?;
        header.insert(k.to_string(), v.to_string());
    }
    let field = |k: &str| -> Result<&String> {
        header.get(k).ok_or_else(|| bad(format!("missing header field `{k}`")))
    };
    let num = |k: &str| -> Result<u64> {
        field(k)?
            .parse()
            .map_err(|_| bad(format!("header field `{k}` is not an integer")))
    };
    if num("format_version")? != u64::from(FORMAT_VERSION) {
        return Err(bad(format!("unsupported format version {}", field("format_version")?)));
    }
    let kind = HeadKind::parse(field("kind")?)?;
    let config = ModelConfig {
        n_layers: num("n_layers")? as usize,
        d_model: num("d_model")? as usize,
        n_heads: num("n_heads")? as usize,
        ffn_dim: num("ffn_dim")? as usize,
        max_seq_len: num("max_seq_len")? as usize,
        vocab_size: num("vocab_size")? as usize,
        seed: num("seed")?,
    };
    let count = num("tensors")? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let bytes = read_u64(&mut r)? as usize;
        let numel: usize = shape.iter().product();
        if bytes != numel * 8 {
            return Err(bad(format!("tensor `{name}`: payload {bytes} bytes for shape {shape:?}")));
        }
        let mut raw = vec![0u8; bytes];
        r.read_exact(&mut raw)
            .map_err(|_| bad(format!("tensor `{name}`: truncated payload")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }
    Transformer::from_params(config, kind, store)
}

pub fn save(net: &Transformer, path: &Path) -> Result<()> {
    write_to(net, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<Transformer> {
    read_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Transformer::new(
            ModelConfig {
                seed: 11,
                ..ModelConfig::default()
            },
            HeadKind::Reward,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_to(&net, &mut buf).unwrap();
        let back = read_from(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        for ((_, _, a), (_, _, b)) in net.params().iter().zip(back.params().iter()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let mut again = Vec::new();
        write_to(&back, &mut again).unwrap();
        assert_eq!(buf, again);
        let text = String::from_utf8_lossy(&buf[..120]);
        assert!(text.starts_with("salu-checkpoint\nformat_version=1\nkind=reward\n"));
    }

    #[test]
    fn truncated_file_rejected() {
        let net = Transformer::new(ModelConfig::default(), HeadKind::Policy).unwrap();
        let mut buf = Vec::new();
        write_to(&net, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_from(buf.as_slice()), Err(SaluError::Checkpoint(_))));
    }
}
