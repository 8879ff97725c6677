//! Transformer forward/eval/checkpoint tests.
//!
//! The pure forward pass is checked against a scalar-loop reference written
//! independently of the Matrix helpers, against the tape forward, and against
//! finite differences through the full loss.

use super::*;
use crate::autodiff::Tape;
use crate::rng;

fn tiny_config(activation: Activation, norm: NormKind) -> TransformerConfig {
    TransformerConfig::new(11, 8, 12, 2, 3)
        .unwrap()
        .with_d_h(20)
        .with_activation(activation)
        .with_norm(norm)
}

fn tiny_batch() -> Batch {
    Batch::with_mask(
        vec![vec![3, 1, 4, 1, 5], vec![9, 2, 6]],
        vec![vec![1, 4, 1, 5, 9], vec![2, 6, 5]],
        Some(vec![
            vec![1.0, 1.0, 0.0, 1.0, 1.0],
            vec![0.0, 1.0, 1.0],
        ]),
    )
    .unwrap()
}

/// Scalar-loop reference forward, sharing no code with the implementation.
fn naive_forward(p: &TransformerParams, tokens: &[usize]) -> Vec<Vec<f64>> {
    let t = tokens.len();
    let d_r = p.config.d_r;
    let norm_rows = |norm: &NormParams, h: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; d_r]; h.len()];
        for (i, row) in h.iter().enumerate() {
            let core: Vec<f64> = match p.config.norm {
                NormKind::LayerNorm => {
                    let mean = row.iter().sum::<f64>() / d_r as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d_r as f64;
                    let inv = 1.0 / (var + p.config.eps).sqrt();
                    row.iter().map(|v| (v - mean) * inv).collect()
                }
                NormKind::RmsNorm => {
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / d_r as f64;
                    let inv = 1.0 / (ms + p.config.eps).sqrt();
                    row.iter().map(|v| v * inv).collect()
                }
            };
            for j in 0..d_r {
                out[i][j] = norm.scale.get(0, j) * core[j] + norm.offset.get(0, j);
            }
        }
        out
    };

    let mut h = vec![vec![0.0; d_r]; t];
    for i in 0..t {
        for j in 0..d_r {
            h[i][j] = p.embed.get(tokens[i], j) + p.pos.get(i, j);
        }
    }
    for layer in &p.layers {
        let z = norm_rows(&layer.norm_attn, &h);
        let d_k = layer.d_k();
        for head in &layer.heads {
            let mut q = vec![vec![0.0; d_k]; t];
            let mut k = vec![vec![0.0; d_k]; t];
            let mut v = vec![vec![0.0; d_k]; t];
            for i in 0..t {
                for a in 0..d_k {
                    for j in 0..d_r {
                        q[i][a] += head.w_q.get(a, j) * z[i][j];
                        k[i][a] += head.w_k.get(a, j) * z[i][j];
                        v[i][a] += head.w_v.get(a, j) * z[i][j];
                    }
                }
            }
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for i2 in 0..t {
                    if i2 > i {
                        scores[i2] = -1e30;
                        continue;
                    }
                    for a in 0..d_k {
                        scores[i2] += q[i][a] * k[i2][a];
                    }
                    scores[i2] /= (d_k as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..d_r {
                    let mut ctx = 0.0;
                    for a in 0..d_k {
                        let mut c = 0.0;
                        for i2 in 0..t {
                            c += exps[i2] / denom * v[i2][a];
                        }
                        ctx += head.w_o.get(j, a) * c;
                    }
                    h[i][j] += ctx;
                }
            }
        }
        let z2 = norm_rows(&layer.norm_ffn, &h);
        let d_h = layer.d_h();
        for i in 0..t {
            let mut hid = vec![0.0; d_h];
            for m in 0..d_h {
                let mut pre = layer.b_1.get(0, m);
                for j in 0..d_r {
                    pre += layer.w_1.get(m, j) * z2[i][j];
                }
                hid[m] = p.config.activation.apply_scalar(pre);
            }
            for j in 0..d_r {
                let mut out = layer.b_2.get(0, j);
                for m in 0..d_h {
                    out += layer.w_2.get(j, m) * hid[m];
                }
                h[i][j] += out;
            }
        }
    }
    let fin = norm_rows(&p.norm_final, &h);
    let mut logits = vec![vec![0.0; p.config.vocab]; t];
    for i in 0..t {
        for v in 0..p.config.vocab {
            for j in 0..d_r {
                logits[i][v] += p.w_out.get(v, j) * fin[i][j];
            }
        }
    }
    logits
}

#[test]
fn forward_matches_scalar_loop_reference() {
    for (act, norm) in [
        (Activation::Gelu, NormKind::RmsNorm),
        (Activation::Relu, NormKind::LayerNorm),
        (Activation::Gelu, NormKind::LayerNorm),
        (Activation::Relu, NormKind::RmsNorm),
    ] {
        let params = TransformerParams::init(&tiny_config(act, norm), 7).unwrap();
        let tokens = [3usize, 1, 4, 1, 5, 9, 2, 6];
        let logits = params.forward(&tokens).unwrap();
        let reference = naive_forward(&params, &tokens);
        for i in 0..tokens.len() {
            for v in 0..params.config.vocab {
                assert!(
                    (logits.get(i, v) - reference[i][v]).abs() < 1e-10,
                    "({act:?},{norm:?}) logit ({i},{v}): {} vs {}",
                    logits.get(i, v),
                    reference[i][v]
                );
            }
        }
    }
}

#[test]
fn tape_forward_matches_pure_forward() {
    for (act, norm) in [
        (Activation::Gelu, NormKind::RmsNorm),
        (Activation::Relu, NormKind::LayerNorm),
    ] {
        let params = TransformerParams::init(&tiny_config(act, norm), 11).unwrap();
        let tokens = [9usize, 2, 6, 5, 3];
        let pure = params.forward(&tokens).unwrap();
        let mut tape = Tape::new();
        let model = TapeModel::from_params(&mut tape, &params, false);
        let logits = model.logits(&mut tape, &tokens).unwrap();
        assert!(tape.value(logits).max_abs_diff(&pure) < 1e-11);
    }
}

#[test]
fn eval_batch_loss_matches_tape_loss() {
    let params = TransformerParams::init(&tiny_config(Activation::Gelu, NormKind::RmsNorm), 3).unwrap();
    let batch = tiny_batch();
    let metrics = params.eval_batch(&batch).unwrap();
    let mut tape = Tape::new();
    let model = TapeModel::from_params(&mut tape, &params, false);
    let loss = model.batch_loss(&mut tape, &batch).unwrap();
    assert!((metrics.loss - tape.value(loss).get(0, 0)).abs() < 1e-12);
    assert!((metrics.weight - 6.0).abs() < 1e-12);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    // Perturbs two entries of every parameter tensor and compares the tape
    // gradient of the batch loss against central differences through the
    // pure forward pass (which is itself an independent implementation).
    let config = TransformerConfig::new(7, 6, 8, 1, 2)
        .unwrap()
        .with_d_h(10)
        .with_activation(Activation::Gelu)
        .with_norm(NormKind::LayerNorm);
    let params = TransformerParams::init(&config, 5).unwrap();
    let batch = Batch::with_mask(
        vec![vec![1, 2, 3, 4], vec![6, 0, 5]],
        vec![vec![2, 3, 4, 5], vec![0, 5, 1]],
        Some(vec![vec![1.0, 0.0, 1.0, 1.0], vec![1.0, 1.0, 0.0]]),
    )
    .unwrap();

    let mut tape = Tape::new();
    let model = TapeModel::from_params(&mut tape, &params, true);
    let loss = model.batch_loss(&mut tape, &batch).unwrap();
    let grads = tape.backward(loss).unwrap();
    let vars = model.vars();

    let h = 1e-5;
    let n_tensors = params.tensor_views().len();
    for k in 0..n_tensors {
        let (rows, cols) = params.tensor_views()[k].1.dims();
        let probes = [(0, 0), (rows - 1, cols - 1)];
        for &(i, j) in &probes {
            let eval = |delta: f64| -> f64 {
                let mut p = params.clone();
                {
                    let mut views = p.tensor_views_mut();
                    let old = views[k].1.get(i, j);
                    views[k].1.set(i, j, old + delta);
                }
                p.eval_batch(&batch).unwrap().loss
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let name = params.tensor_views()[k].0.clone();
            let ad = grads
                .get(vars[k])
                .unwrap_or_else(|| panic!("no gradient for {name}"))
                .get(i, j);
            let err = (ad - fd).abs() / 1.0_f64.max(ad.abs() + fd.abs());
            assert!(err < 1e-6, "{name} ({i},{j}): tape {ad} vs fd {fd}");
        }
    }
}

#[test]
fn causal_mask_blocks_future_tokens() {
    let params = TransformerParams::init(&tiny_config(Activation::Gelu, NormKind::RmsNorm), 9).unwrap();
    let a = params.forward(&[3, 1, 4, 1]).unwrap();
    let b = params.forward(&[3, 1, 4, 7]).unwrap();
    for i in 0..3 {
        for v in 0..params.config.vocab {
            assert_eq!(a.get(i, v), b.get(i, v), "position {i} saw the future");
        }
    }
    assert!((0..params.config.vocab).any(|v| a.get(3, v) != b.get(3, v)));
}

#[test]
fn init_is_deterministic_per_seed() {
    let config = tiny_config(Activation::Gelu, NormKind::RmsNorm);
    let a = TransformerParams::init(&config, 1).unwrap();
    let b = TransformerParams::init(&config, 1).unwrap();
    let c = TransformerParams::init(&config, 2).unwrap();
    assert!(a == b);
    assert!(a != c);
}

#[test]
fn golden_logits_are_stable() {
    // Frozen output of a seeded model; guards against accidental changes to
    // init draw order or forward arithmetic.
    let params = TransformerParams::init(&tiny_config(Activation::Gelu, NormKind::RmsNorm), 42).unwrap();
    let logits = params.forward(&[3, 1, 4, 1, 5]).unwrap();
    let expected_row2 = GOLDEN_ROW2;
    for (v, &want) in expected_row2.iter().enumerate() {
        assert!(
            (logits.get(2, v) - want).abs() < 1e-12,
            "logit (2,{v}): {:.17e} vs frozen {want}",
            logits.get(2, v)
        );
    }
}

// Row 2 of the logits for seed 42, tokens [3,1,4,1,5]; recorded from the
// first verified run of the scalar-loop-checked forward pass.
const GOLDEN_ROW2: [f64; 11] = [
    7.60245653770607488e-1,
    7.83695179298025402e-2,
    5.84728643376137280e-1,
    5.81686725718704278e-1,
    4.80464278465854433e-1,
    6.41494461895673052e-1,
    -4.14244590364346965e-1,
    6.05441570096106441e-1,
    4.17554163803496414e-1,
    4.37803826787286965e-1,
    -2.36444092832187369e0,
];

#[test]
fn forward_rejects_bad_inputs() {
    let params = TransformerParams::init(&tiny_config(Activation::Gelu, NormKind::RmsNorm), 1).unwrap();
    assert!(params.forward(&[]).is_err());
    assert!(params.forward(&[11]).is_err()); // vocab is 11, ids 0..=10
    assert!(params.forward(&[0; 9]).is_err()); // max_seq is 8
}

#[test]
fn batch_validation_rejects_ragged_input() {
    assert!(Batch::new(vec![vec![1, 2]], vec![vec![1]]).is_err());
    assert!(Batch::new(vec![], vec![]).is_err());
    assert!(Batch::with_mask(
        vec![vec![1, 2]],
        vec![vec![1, 2]],
        Some(vec![vec![1.0]])
    )
    .is_err());
    assert!(Batch::with_mask(
        vec![vec![1, 2]],
        vec![vec![1, 2]],
        Some(vec![vec![1.0, -0.5]])
    )
    .is_err());
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rbkt");
    let params = TransformerParams::init(&tiny_config(Activation::Relu, NormKind::LayerNorm), 13).unwrap();
    params.save(&path).unwrap();
    let loaded = TransformerParams::load(&path).unwrap();
    assert!(params == loaded);
}

#[test]
fn checkpoint_roundtrip_preserves_heterogeneous_layers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hetero.rbkt");
    let mut params = TransformerParams::init(&tiny_config(Activation::Gelu, NormKind::RmsNorm), 17).unwrap();
    // Give layer 1 an extra head and a different hidden width.
    let extra = params.layers[1].heads[0].clone();
    params.layers[1].heads.push(extra);
    let d_r = params.config.d_r;
    let mut r = rng::seeded(99);
    params.layers[1].w_1 = rng::normal_matrix(&mut r, 24, d_r, 0.1);
    params.layers[1].b_1 = Matrix::zeros(1, 24);
    params.layers[1].w_2 = rng::normal_matrix(&mut r, d_r, 24, 0.1);
    params.validate().unwrap();
    params.save(&path).unwrap();
    let loaded = TransformerParams::load(&path).unwrap();
    assert!(params == loaded);
    assert_eq!(loaded.layers[1].heads.len(), 4);
    assert_eq!(loaded.layers[1].d_h(), 24);
}

#[test]
fn checkpoint_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rbkt");
    let params = TransformerParams::init(&tiny_config(Activation::Gelu, NormKind::RmsNorm), 1).unwrap();
    params.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    // Bad magic.
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let bad_path = dir.path().join("badmagic.rbkt");
    std::fs::write(&bad_path, &bad).unwrap();
    assert!(matches!(
        TransformerParams::load(&bad_path),
        Err(crate::Error::BadMagic { .. })
    ));

    // Truncation.
    let cut_path = dir.path().join("cut.rbkt");
    std::fs::write(&cut_path, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(
        TransformerParams::load(&cut_path),
        Err(crate::Error::Truncated { .. })
    ));

    // Trailing garbage.
    let mut long = bytes.clone();
    long.push(0);
    let long_path = dir.path().join("long.rbkt");
    std::fs::write(&long_path, &long).unwrap();
    assert!(matches!(
        TransformerParams::load(&long_path),
        Err(crate::Error::FormatInvalid { .. })
    ));
}

#[test]
fn config_rejects_indivisible_widths() {
    assert!(TransformerConfig::new(10, 8, 12, 2, 5).is_err());
    assert!(TransformerConfig::new(10, 8, 0, 2, 2).is_err());
}
