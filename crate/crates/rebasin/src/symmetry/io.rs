//! Alignment-map serialization, reusing the checkpoint container. Tensor
//! names carry a class prefix: `PERM:` (index vector), `SEMI:` (rows of
//! `(destination, source, weight)` triples), `ORTH:` (dense matrix).

use std::path::Path;

use crate::error::{Error, Result};
use crate::transformer::{read_container, write_container, RawTensor};

use super::{AlignmentMaps, LayerMaps, OrthogonalMap, Permutation, SemiPermutation};

impl AlignmentMaps {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut config = String::from("kind=alignment_maps\n");
        config.push_str(&format!("layers={}\n", self.layers.len()));
        config.push_str(&format!("d_r={}\n", self.o.matrix().rows()));
        for (l, maps) in self.layers.iter().enumerate() {
            config.push_str(&format!("layer{l}.ph_rows={}\n", maps.p_h.rows()));
            config.push_str(&format!("layer{l}.ph_cols={}\n", maps.p_h.cols()));
        }
        let mut tensors = vec![RawTensor::matrix("ORTH:o", self.o.matrix())];
        for (l, maps) in self.layers.iter().enumerate() {
            tensors.push(RawTensor::vector(
                format!("PERM:layer{l}.p_ff"),
                maps.p_ff.sigma().iter().map(|&i| i as f64).collect(),
            ));
            let mut triples = Vec::new();
            for (dest, entry) in maps.p_h.entries().iter().enumerate() {
                if let Some((src, w)) = entry {
                    triples.extend_from_slice(&[dest as f64, *src as f64, *w]);
                }
            }
            let k = triples.len() / 3;
            tensors.push(RawTensor {
                name: format!("SEMI:layer{l}.p_h"),
                dims: vec![k, 3],
                data: triples,
            });
        }
        write_container(path, &config, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config_text, tensors) = read_container(path)?;
        let mut layers_n = None;
        let mut d_r = None;
        let mut ph_dims: std::collections::BTreeMap<usize, (Option<usize>, Option<usize>)> =
            Default::default();
        for line in config_text.lines() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::FormatInvalid {
                detail: format!("config line {line:?} is not key=value"),
            })?;
            let parse = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| Error::FormatInvalid {
                    detail: format!("config key {key:?} is not an integer"),
                })
            };
            match key {
                "kind" => {
                    if value != "alignment_maps" {
                        return Err(Error::FormatInvalid {
                            detail: format!("checkpoint kind {value:?} is not alignment_maps"),
                        });
                    }
                }
                "layers" => layers_n = Some(parse(value)?),
                "d_r" => d_r = Some(parse(value)?),
                _ => {
                    let parsed = key
                        .strip_prefix("layer")
                        .and_then(|rest| rest.split_once('.'))
                        .and_then(|(idx, field)| idx.parse::<usize>().ok().map(|i| (i, field)));
                    match parsed {
                        Some((idx, "ph_rows")) => ph_dims.entry(idx).or_default().0 = Some(parse(value)?),
                        Some((idx, "ph_cols")) => ph_dims.entry(idx).or_default().1 = Some(parse(value)?),
                        _ => {
                            return Err(Error::FormatInvalid {
                                detail: format!("unknown config key {key:?}"),
                            })
                        }
                    }
                }
            }
        }
        let layers_n = layers_n.ok_or_else(|| Error::FormatInvalid {
            detail: "missing config key \"layers\"".into(),
        })?;
        let d_r = d_r.ok_or_else(|| Error::FormatInvalid {
            detail: "missing config key \"d_r\"".into(),
        })?;
        if tensors.len() != 1 + 2 * layers_n {
            return Err(Error::FormatInvalid {
                detail: format!(
                    "expected {} tensors for {layers_n} layers, found {}",
                    1 + 2 * layers_n,
                    tensors.len()
                ),
            });
        }
        let mut it = tensors.into_iter();
        let o_raw = it.next().unwrap();
        if o_raw.name != "ORTH:o" {
            return Err(Error::FormatInvalid {
                detail: format!("expected tensor \"ORTH:o\", found {:?}", o_raw.name),
            });
        }
        let o_mat = o_raw.to_matrix()?;
        if o_mat.dims() != (d_r, d_r) {
            return Err(Error::FormatInvalid {
                detail: format!("residual map is {}x{}, expected {d_r}x{d_r}", o_mat.rows(), o_mat.cols()),
            });
        }
        let o = OrthogonalMap::new(o_mat)?;
        let mut layers = Vec::with_capacity(layers_n);
        for l in 0..layers_n {
            let p_ff_raw = it.next().unwrap();
            let want = format!("PERM:layer{l}.p_ff");
            if p_ff_raw.name != want {
                return Err(Error::FormatInvalid {
                    detail: format!("expected tensor {want:?}, found {:?}", p_ff_raw.name),
                });
            }
            let sigma = p_ff_raw
                .data
                .iter()
                .map(|&x| index_from_f64(x, &p_ff_raw.name))
                .collect::<Result<Vec<_>>>()?;
            let p_ff = Permutation::new(sigma)?;

            let p_h_raw = it.next().unwrap();
            let want = format!("SEMI:layer{l}.p_h");
            if p_h_raw.name != want {
                return Err(Error::FormatInvalid {
                    detail: format!("expected tensor {want:?}, found {:?}", p_h_raw.name),
                });
            }
            let (rows, cols) = ph_dims
                .get(&l)
                .and_then(|(r, c)| r.zip(*c))
                .ok_or_else(|| Error::FormatInvalid {
                    detail: format!("missing ph_rows/ph_cols for layer {l}"),
                })?;
            if p_h_raw.dims.len() != 2 || p_h_raw.dims[1] != 3 {
                return Err(Error::FormatInvalid {
                    detail: format!("{want:?} must be k x 3 triples"),
                });
            }
            let mut entries: Vec<Option<(usize, f64)>> = vec![None; rows];
            for t in p_h_raw.data.chunks(3) {
                let dest = index_from_f64(t[0], &p_h_raw.name)?;
                let src = index_from_f64(t[1], &p_h_raw.name)?;
                if dest >= rows {
                    return Err(Error::FormatInvalid {
                        detail: format!("{want:?}: destination {dest} out of {rows} rows"),
                    });
                }
                if entries[dest].is_some() {
                    return Err(Error::FormatInvalid {
                        detail: format!("{want:?}: duplicate destination {dest}"),
                    });
                }
                entries[dest] = Some((src, t[2]));
            }
            let p_h = SemiPermutation::new(cols, entries)?;
            layers.push(LayerMaps { p_h, p_ff });
        }
        Ok(Self { o, layers })
    }
}

fn index_from_f64(x: f64, name: &str) -> Result<usize> {
    if x.fract() != 0.0 || x < 0.0 || x > (1u64 << 52) as f64 {
        return Err(Error::FormatInvalid {
            detail: format!("{name:?}: {x} is not a valid index"),
        });
    }
    Ok(x as usize)
}
