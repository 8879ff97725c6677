use rebasin::trainer::{generate_dataset, train, TaskKind, TaskSpec, TrainConfig};
use rebasin::transformer::{Activation, NormKind, TransformerConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let p: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(13);
    let frac: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.75);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(400);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let wd: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let layers: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(2);
    let seed: u64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1);

    let total = p * p;
    let train_size = (total as f64 * frac) as usize;
    let spec = TaskSpec {
        kind: TaskKind::ModularAddition,
        vocab: p + 1,
        seq_len: 3,
        train_size,
        test_size: total - train_size,
        batch_size: 64,
        data_seed: 13,
    };
    let config = TransformerConfig::new(p + 1, 8, 64, layers, 4)
        .unwrap()
        .with_d_h(128)
        .with_activation(Activation::Gelu)
        .with_norm(NormKind::RmsNorm);
    let opt = TrainConfig { epochs, lr, weight_decay: wd };
    let t0 = std::time::Instant::now();
    let report = train(&config, &spec, &opt, seed).unwrap();
    let (_, test_data) = generate_dataset(&spec).unwrap();
    let _ = test_data;
    println!(
        "p={p} frac={frac} epochs={epochs} lr={lr} wd={wd} L={layers} seed={seed}: train_loss={:.4} train_acc={:.3} test_loss={:.4} test_acc={:.3} elapsed={:.1}s",
        report.train.loss, report.train.accuracy, report.test.loss, report.test.accuracy,
        t0.elapsed().as_secs_f64()
    );
    let el = report.epoch_losses;
    let show: Vec<String> = el.iter().step_by((el.len() / 12).max(1)).map(|l| format!("{l:.3}")).collect();
    println!("epoch losses: {}", show.join(" "));
}
