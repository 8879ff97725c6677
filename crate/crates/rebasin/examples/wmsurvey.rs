use std::path::PathBuf;

use rebasin::barrier::barrier;
use rebasin::matching::{weight_match, MatchConfig, ResidualMatching};
use rebasin::symmetry::{absorb_layernorm, apply_alignment};
use rebasin::trainer::{generate_dataset, train, TaskKind, TaskSpec, TrainConfig};
use rebasin::transformer::{Activation, NormKind, TransformerConfig, TransformerParams};

fn spec(p: usize) -> TaskSpec {
    let total = p * p;
    let train_size = (total as f64 * 0.9) as usize;
    TaskSpec {
        kind: TaskKind::ModularAddition,
        vocab: p + 1,
        seq_len: 3,
        train_size,
        test_size: total - train_size,
        batch_size: 64,
        data_seed: 13,
    }
}

fn trained(p: usize, d_h: usize, seed: u64, epochs: usize, wd: f64, d_r: usize, heads: usize) -> TransformerParams {
    let path = PathBuf::from(format!("/tmp/mod{p}_dr{d_r}_h{heads}_dh{d_h}_l1_e{epochs}_w{wd}_s{seed}.ckpt"));
    if path.exists() {
        return TransformerParams::load(&path).unwrap();
    }
    let config = TransformerConfig::new(p + 1, 8, d_r, 1, heads)
        .unwrap()
        .with_d_h(d_h)
        .with_activation(Activation::Gelu)
        .with_norm(NormKind::RmsNorm);
    let opt = TrainConfig { epochs, lr: 1e-3, weight_decay: wd };
    let report = train(&config, &spec(p), &opt, seed).unwrap();
    eprintln!("  trained d_r={d_r} h={heads} d_h={d_h} seed {seed}: test_acc {:.3}", report.test.accuracy);
    report.params.save(&path).unwrap();
    report.params
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let d_r: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(64);
    let d_h: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(128);
    let heads: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(250);
    let p = 29;
    let wd = 0.3;

    let nseeds: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(3);
    let models: Vec<_> = (1..=nseeds).map(|s| trained(p, d_h, s, epochs, wd, d_r, heads)).collect();
    let absorbed: Vec<_> = models.iter().map(|m| absorb_layernorm(m).unwrap().0).collect();
    let (_, test_data) = generate_dataset(&spec(p)).unwrap();

    let mut pairs = Vec::new();
    for i in 0..absorbed.len() {
        for j in (i + 1)..absorbed.len() {
            pairs.push((i, j));
        }
    }
    for (i, j) in pairs {
        let a = &absorbed[i];
        let b = &absorbed[j];
        let vanilla = barrier(a, b, &test_data, 13).unwrap();
        let mut line = format!("pair ({},{}): vanilla {:.3} | wm", i + 1, j + 1, vanilla.barrier);
        for iters in [1usize, 3, 5] {
            let mut cfg = MatchConfig::default();
            cfg.wm_iterations = iters;
            let wm = weight_match(a, b, &cfg).unwrap();
            let aligned = apply_alignment(b, &wm.maps).unwrap();
            let rep = barrier(a, &aligned, &test_data, 13).unwrap();
            line.push_str(&format!(" i{iters}={:.3}", rep.barrier));
        }
        let mut cfg = MatchConfig::default();
        cfg.residual = ResidualMatching::Permutation;
        let wm = weight_match(a, b, &cfg).unwrap();
        let aligned = apply_alignment(b, &wm.maps).unwrap();
        let rep = barrier(a, &aligned, &test_data, 13).unwrap();
        line.push_str(&format!(" perm={:.3}", rep.barrier));
        println!("{line}");
    }
}
