//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [8]  magic "RBKT0001"
//! [4]  u32 config length, then that many bytes of UTF-8 "key=value" lines
//! [4]  u32 tensor count
//! per tensor:
//!   [4] u32 name length, name bytes
//!   [1] u8 rank
//!   [8 * rank] u64 dims
//!   [8 * prod(dims)] f64 payload
//! ```
//!
//! Model checkpoints and alignment-map files share this container; they
//! differ only in config keys and tensor naming.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{
    Activation, HeadParams, LayerParams, NormKind, NormParams, TransformerConfig,
    TransformerParams,
};

pub const MAGIC: &[u8; 8] = b"RBKT0001";

const MAX_CONFIG_BYTES: u32 = 1 << 20;
const MAX_NAME_BYTES: u32 = 4096;
const MAX_TENSOR_ENTRIES: u64 = 1 << 28;

/// One named tensor record.
#[derive(Debug, Clone)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    /// Interprets the record as a matrix; rank-1 records become single rows.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims.len() {
            1 => Matrix::new(1, self.dims[0], self.data.clone()),
            2 => Matrix::new(self.dims[0], self.dims[1], self.data.clone()),
            r => Err(Error::FormatInvalid {
                detail: format!("tensor {:?} has unsupported rank {r}", self.name),
            }),
        }
    }
}

pub fn write_container(path: &Path, config: &str, tensors: &[RawTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let cfg = config.as_bytes();
    if cfg.len() as u64 > MAX_CONFIG_BYTES as u64 {
        return Err(Error::FormatInvalid {
            detail: "config block too large".into(),
        });
    }
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        if name.len() as u64 > MAX_NAME_BYTES as u64 {
            return Err(Error::FormatInvalid {
                detail: format!("tensor name too long ({} bytes)", name.len()),
            });
        }
        let expect: usize = t.dims.iter().product();
        if expect != t.data.len() {
            return Err(Error::FormatInvalid {
                detail: format!(
                    "tensor {:?}: dims {:?} disagree with {} data entries",
                    t.name,
                    t.dims,
                    t.data.len()
                ),
            });
        }
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[t.dims.len() as u8])?;
        for &d in &t.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(String, Vec<RawTensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            expected: *MAGIC,
            found: magic,
        });
    }
    let cfg_len = read_u32(&mut r, "config length")?;
    if cfg_len > MAX_CONFIG_BYTES {
        return Err(Error::FormatInvalid {
            detail: format!("config block of {cfg_len} bytes exceeds limit"),
        });
    }
    let mut cfg = vec![0u8; cfg_len as usize];
    read_exact(&mut r, &mut cfg, "config block")?;
    let config = String::from_utf8(cfg).map_err(|_| Error::FormatInvalid {
        detail: "config block is not UTF-8".into(),
    })?;
    let count = read_u32(&mut r, "tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = read_u32(&mut r, "tensor name length")?;
        if name_len > MAX_NAME_BYTES {
            return Err(Error::FormatInvalid {
                detail: format!("tensor {i}: name of {name_len} bytes exceeds limit"),
            });
        }
        let mut name = vec![0u8; name_len as usize];
        read_exact(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| Error::FormatInvalid {
            detail: format!("tensor {i}: name is not UTF-8"),
        })?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "tensor rank")?;
        let rank = rank[0] as usize;
        if rank == 0 || rank > 2 {
            return Err(Error::FormatInvalid {
                detail: format!("tensor {name:?}: unsupported rank {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        let mut total: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r, "tensor dim")?;
            total = total.saturating_mul(d.max(1));
            dims.push(d as usize);
        }
        if total > MAX_TENSOR_ENTRIES {
            return Err(Error::FormatInvalid {
                detail: format!("tensor {name:?}: {total} entries exceeds limit"),
            });
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            read_exact(&mut r, &mut buf, "tensor payload")?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(RawTensor { name, dims, data });
    }
    // Trailing garbage means the file was not produced by this writer.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::FormatInvalid {
            detail: "trailing bytes after last tensor".into(),
        });
    }
    Ok((config, tensors))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                context: what.to_string(),
            }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

/// True for tensors stored as rank-1 vectors.
fn is_vector_name(name: &str) -> bool {
    name.ends_with(".scale")
        || name.ends_with(".offset")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
}

impl TransformerParams {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let c = &self.config;
        let mut config = String::new();
        config.push_str("kind=transformer\n");
        config.push_str(&format!("vocab={}\n", c.vocab));
        config.push_str(&format!("max_seq={}\n", c.max_seq));
        config.push_str(&format!("d_r={}\n", c.d_r));
        config.push_str(&format!("layers={}\n", c.layers));
        config.push_str(&format!("heads={}\n", c.heads));
        config.push_str(&format!("d_k={}\n", c.d_k));
        config.push_str(&format!("d_h={}\n", c.d_h));
        config.push_str(&format!("activation={}\n", c.activation.name()));
        config.push_str(&format!("norm={}\n", c.norm.name()));
        config.push_str(&format!("eps={}\n", c.eps));
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != c.heads {
                config.push_str(&format!("layer{l}.heads={}\n", layer.heads.len()));
            }
            if layer.d_k() != c.d_k {
                config.push_str(&format!("layer{l}.d_k={}\n", layer.d_k()));
            }
            if layer.d_h() != c.d_h {
                config.push_str(&format!("layer{l}.d_h={}\n", layer.d_h()));
            }
        }
        let tensors: Vec<RawTensor> = self
            .tensor_views()
            .into_iter()
            .map(|(name, m)| {
                if is_vector_name(&name) {
                    RawTensor::vector(name, m.data().to_vec())
                } else {
                    RawTensor::matrix(name, m)
                }
            })
            .collect();
        write_container(path, &config, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config_text, tensors) = read_container(path)?;
        let (config, per_layer) = parse_model_config(&config_text)?;

        // Expected tensor sequence, from config defaults plus overrides.
        let mut expected: Vec<(String, usize, usize)> = vec![
            ("embed".into(), config.vocab, config.d_r),
            ("pos".into(), config.max_seq, config.d_r),
        ];
        for l in 0..config.layers {
            let (heads, d_k, d_h) = per_layer[l];
            expected.push((format!("layer{l}.norm_attn.scale"), 1, config.d_r));
            expected.push((format!("layer{l}.norm_attn.offset"), 1, config.d_r));
            for h in 0..heads {
                expected.push((format!("layer{l}.head{h}.wq"), d_k, config.d_r));
                expected.push((format!("layer{l}.head{h}.wk"), d_k, config.d_r));
                expected.push((format!("layer{l}.head{h}.wv"), d_k, config.d_r));
                expected.push((format!("layer{l}.head{h}.wo"), config.d_r, d_k));
            }
            expected.push((format!("layer{l}.norm_ffn.scale"), 1, config.d_r));
            expected.push((format!("layer{l}.norm_ffn.offset"), 1, config.d_r));
            expected.push((format!("layer{l}.w1"), d_h, config.d_r));
            expected.push((format!("layer{l}.b1"), 1, d_h));
            expected.push((format!("layer{l}.w2"), config.d_r, d_h));
            expected.push((format!("layer{l}.b2"), 1, config.d_r));
        }
        expected.push(("norm_final.scale".into(), 1, config.d_r));
        expected.push(("norm_final.offset".into(), 1, config.d_r));
        expected.push(("w_out".into(), config.vocab, config.d_r));

        if tensors.len() != expected.len() {
            return Err(Error::FormatInvalid {
                detail: format!(
                    "expected {} tensors for this config, found {}",
                    expected.len(),
                    tensors.len()
                ),
            });
        }
        let mut mats = Vec::with_capacity(tensors.len());
        for (t, (name, rows, cols)) in tensors.iter().zip(&expected) {
            if &t.name != name {
                return Err(Error::FormatInvalid {
                    detail: format!("expected tensor {name:?}, found {:?}", t.name),
                });
            }
            let m = t.to_matrix()?;
            if m.dims() != (*rows, *cols) {
                return Err(Error::FormatInvalid {
                    detail: format!(
                        "tensor {name:?}: expected {rows}x{cols}, found {}x{}",
                        m.rows(),
                        m.cols()
                    ),
                });
            }
            mats.push(m);
        }

        let mut it = mats.into_iter();
        let embed = it.next().unwrap();
        let pos = it.next().unwrap();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let (heads_n, _, _) = per_layer[l];
            let norm_attn = NormParams {
                scale: it.next().unwrap(),
                offset: it.next().unwrap(),
            };
            let mut heads = Vec::with_capacity(heads_n);
            for _ in 0..heads_n {
                heads.push(HeadParams {
                    w_q: it.next().unwrap(),
                    w_k: it.next().unwrap(),
                    w_v: it.next().unwrap(),
                    w_o: it.next().unwrap(),
                });
            }
            let norm_ffn = NormParams {
                scale: it.next().unwrap(),
                offset: it.next().unwrap(),
            };
            layers.push(LayerParams {
                norm_attn,
                heads,
                norm_ffn,
                w_1: it.next().unwrap(),
                b_1: it.next().unwrap(),
                w_2: it.next().unwrap(),
                b_2: it.next().unwrap(),
            });
        }
        let norm_final = NormParams {
            scale: it.next().unwrap(),
            offset: it.next().unwrap(),
        };
        let w_out = it.next().unwrap();
        let params = Self {
            config,
            embed,
            pos,
            layers,
            norm_final,
            w_out,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Parses the model config block; returns the config and per-layer
/// `(heads, d_k, d_h)` after overrides.
fn parse_model_config(text: &str) -> Result<(TransformerConfig, Vec<(usize, usize, usize)>)> {
    let mut base: std::collections::BTreeMap<&str, &str> = Default::default();
    let mut overrides: Vec<(usize, &str, &str)> = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::FormatInvalid {
            detail: format!("config line {line:?} is not key=value"),
        })?;
        // Per-layer override keys look like "layer<N>.<field>"; the plain
        // "layers" key must not be mistaken for one.
        let is_override = key
            .strip_prefix("layer")
            .is_some_and(|rest| rest.starts_with(|c: char| c.is_ascii_digit()));
        if is_override {
            let rest = key.strip_prefix("layer").unwrap();
            let Some((idx, field)) = rest.split_once('.') else {
                return Err(Error::FormatInvalid {
                    detail: format!("malformed per-layer config key {key:?}"),
                });
            };
            let idx: usize = idx.parse().map_err(|_| Error::FormatInvalid {
                detail: format!("malformed per-layer config key {key:?}"),
            })?;
            if !matches!(field, "heads" | "d_k" | "d_h") {
                return Err(Error::FormatInvalid {
                    detail: format!("unknown per-layer config key {key:?}"),
                });
            }
            overrides.push((idx, field, value));
            continue;
        }
        if base.insert(key, value).is_some() {
            return Err(Error::FormatInvalid {
                detail: format!("duplicate config key {key:?}"),
            });
        }
    }
    let get = |k: &str| -> Result<&str> {
        base.get(k).copied().ok_or_else(|| Error::FormatInvalid {
            detail: format!("missing config key {k:?}"),
        })
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::FormatInvalid {
            detail: format!("config key {k:?} is not an integer"),
        })
    };
    let kind = get("kind")?;
    if kind != "transformer" {
        return Err(Error::FormatInvalid {
            detail: format!("checkpoint kind {kind:?} is not a transformer model"),
        });
    }
    let known = [
        "kind", "vocab", "max_seq", "d_r", "layers", "heads", "d_k", "d_h", "activation", "norm",
        "eps",
    ];
    if let Some(unknown) = base.keys().find(|k| !known.contains(k)) {
        return Err(Error::FormatInvalid {
            detail: format!("unknown config key {unknown:?}"),
        });
    }
    let config = TransformerConfig {
        vocab: parse_usize("vocab")?,
        max_seq: parse_usize("max_seq")?,
        d_r: parse_usize("d_r")?,
        layers: parse_usize("layers")?,
        heads: parse_usize("heads")?,
        d_k: parse_usize("d_k")?,
        d_h: parse_usize("d_h")?,
        activation: Activation::parse(get("activation")?)?,
        norm: NormKind::parse(get("norm")?)?,
        eps: get("eps")?.parse().map_err(|_| Error::FormatInvalid {
            detail: "config key \"eps\" is not a float".into(),
        })?,
    };
    if config.layers == 0 {
        return Err(Error::FormatInvalid {
            detail: "config declares zero layers".into(),
        });
    }
    let mut per_layer = vec![(config.heads, config.d_k, config.d_h); config.layers];
    for (idx, field, value) in overrides {
        if idx >= config.layers {
            return Err(Error::FormatInvalid {
                detail: format!("override for layer {idx} but model has {} layers", config.layers),
            });
        }
        let v: usize = value.parse().map_err(|_| Error::FormatInvalid {
            detail: format!("layer{idx}.{field} is not an integer"),
        })?;
        match field {
            "heads" => per_layer[idx].0 = v,
            "d_k" => per_layer[idx].1 = v,
            _ => per_layer[idx].2 = v,
        }
    }
    Ok((config, per_layer))
}
