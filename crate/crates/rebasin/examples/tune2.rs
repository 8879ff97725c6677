use std::path::PathBuf;

use rebasin::barrier::barrier;
use rebasin::matching::{learned_match, weight_match, InitStrategy, LambdaSampler, MatchConfig};
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

fn trained(p: usize, d_h: usize, layers: usize, seed: u64, epochs: usize, wd: f64, d_r: usize, heads: usize) -> TransformerParams {
    let path = PathBuf::from(format!("/tmp/mod{p}_dr{d_r}_h{heads}_dh{d_h}_l{layers}_e{epochs}_w{wd}_s{seed}.ckpt"));
    if path.exists() {
        return TransformerParams::load(&path).unwrap();
    }
    let config = TransformerConfig::new(p + 1, 8, d_r, layers, heads)
        .unwrap()
        .with_d_h(d_h)
        .with_activation(Activation::Gelu)
        .with_norm(NormKind::RmsNorm);
    let opt = TrainConfig { epochs, lr: 1e-3, weight_decay: wd };
    let report = train(&config, &spec(p), &opt, seed).unwrap();
    eprintln!("trained seed {seed}: test_acc {:.3} train_acc {:.3}", report.test.accuracy, report.train.accuracy);
    report.params.save(&path).unwrap();
    report.params
}

fn profile(tag: &str, rep: &rebasin::barrier::BarrierReport) {
    let devs: Vec<String> = (0..rep.lambda_grid.len())
        .step_by(2)
        .map(|i| format!("{:.2}", rep.deviation(i)))
        .collect();
    println!("{tag} profile (every 2nd λ): {}", devs.join(" "));
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let d_h: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(128);
    let layers: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);
    let init: &str = args.get(5).map(|s| s.as_str()).unwrap_or("weight-matching");
    let epochs: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(250);
    let lm_batch: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(64);
    let p: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(29);
    let seed_a: u64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(1);
    let seed_b: u64 = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(2);
    let restarts: u64 = args.get(11).map(|s| s.parse().unwrap()).unwrap_or(1);
    let wd: f64 = args.get(12).map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let d_r: usize = args.get(13).map(|s| s.parse().unwrap()).unwrap_or(64);
    let heads: usize = args.get(14).map(|s| s.parse().unwrap()).unwrap_or(4);
    let sampler: &str = args.get(15).map(|s| s.as_str()).unwrap_or("uniform-0.4-0.6");

    let t0 = std::time::Instant::now();
    let a = trained(p, d_h, layers, seed_a, epochs, wd, d_r, heads);
    let b = trained(p, d_h, layers, seed_b, epochs, wd, d_r, heads);
    let (_, test_data) = generate_dataset(&spec(p)).unwrap();
    let mut lm_spec = spec(p);
    lm_spec.batch_size = lm_batch;
    let (train_data, _) = generate_dataset(&lm_spec).unwrap();
    let (a_abs, _) = absorb_layernorm(&a).unwrap();
    let (b_abs, _) = absorb_layernorm(&b).unwrap();

    let vanilla = barrier(&a_abs, &b_abs, &test_data, 25).unwrap();
    let wm = weight_match(&a_abs, &b_abs, &MatchConfig::default()).unwrap();
    let b_wm = apply_alignment(&b_abs, &wm.maps).unwrap();
    let wm_bar = barrier(&a_abs, &b_wm, &test_data, 25).unwrap();
    println!("pair ({seed_a},{seed_b}): vanilla {:.4}  wm {:.4}", vanilla.barrier, wm_bar.barrier);

    let mut best: Option<(f64, u64, usize, f64)> = None;
    for r in 0..restarts {
        let mut lm_cfg = MatchConfig::default();
        lm_cfg.learn_iterations = steps;
        lm_cfg.lr = lr;
        lm_cfg.init = InitStrategy::parse(init).unwrap();
        lm_cfg.seed = r * 7919;
        lm_cfg.lambda_sampler = LambdaSampler::parse(sampler).unwrap();
        let lm = learned_match(&a_abs, &b_abs, &train_data, &lm_cfg).unwrap();
        let b_lm = apply_alignment(&b_abs, &lm.maps).unwrap();
        let lm_bar = barrier(&a_abs, &b_lm, &test_data, 25).unwrap();
        let lm_train = barrier(&a_abs, &b_lm, &train_data, 25).unwrap();
        println!(
            "  restart {r}: barrier {:.4} ratio {:.3} (train barrier {:.4}, sel step {} loss {:.3})",
            lm_bar.barrier,
            lm_bar.barrier / vanilla.barrier,
            lm_train.barrier,
            lm.selected_step,
            lm.selected_loss
        );
        profile("  test", &lm_bar);
        profile("  train", &lm_train);
        if best.is_none() || lm_bar.barrier < best.unwrap().0 {
            best = Some((lm_bar.barrier, r, lm.selected_step, lm.selected_loss));
        }
        if let Ok(stages) = std::env::var("STAGES") {
            let stages: usize = stages.parse().unwrap();
            let mut cur = b_lm.clone();
            for k in 2..=stages {
                let mut cfg2 = lm_cfg.clone();
                cfg2.init = InitStrategy::Identity;
                cfg2.seed = lm_cfg.seed.wrapping_add(k as u64 * 101);
                let lm2 = learned_match(&a_abs, &cur, &train_data, &cfg2).unwrap();
                cur = apply_alignment(&cur, &lm2.maps).unwrap();
                let bar2 = barrier(&a_abs, &cur, &test_data, 25).unwrap();
                println!(
                    "  stage{k}: barrier {:.4} ratio {:.3} (sel step {} loss {:.3})",
                    bar2.barrier,
                    bar2.barrier / vanilla.barrier,
                    lm2.selected_step,
                    lm2.selected_loss
                );
            }
        }
    }
    let (bb, br, bs, bl) = best.unwrap();
    println!(
        "best: barrier {bb:.4} ratio {:.3} restart {br} (sel step {bs} loss {bl:.3}) t={:.0}s",
        bb / vanilla.barrier,
        t0.elapsed().as_secs_f64()
    );
}
