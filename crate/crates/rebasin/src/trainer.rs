//! Synthetic tasks and a small Adam training loop, so alignment experiments
//! can produce their own independently seeded checkpoints.
//!
//! Three token tasks are provided. Modular addition presents `a b =` and
//! scores only the answer position. Character copy presents a pattern twice
//! and scores the second half. The character LM samples an order-2 Markov
//! chain (itself derived from the data seed) and scores every position with
//! full context. All generation is deterministic in the data seed, and the
//! train and test splits are disjoint by construction.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Adam, Tape};
use crate::barrier::eval_dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;
use crate::transformer::{Batch, EvalMetrics, TapeModel, TransformerConfig, TransformerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    ModularAddition,
    CharCopy,
    CharLm,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "modular-addition" => Ok(Self::ModularAddition),
            "char-copy" => Ok(Self::CharCopy),
            "char-lm" => Ok(Self::CharLm),
            other => Err(Error::ConfigMismatch {
                detail: format!("unknown task {other:?}"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ModularAddition => "modular-addition",
            Self::CharCopy => "char-copy",
            Self::CharLm => "char-lm",
        }
    }
}

/// A synthetic dataset recipe. `vocab` is the full token alphabet; for
/// modular addition the last token is the `=` marker and the modulus is
/// `vocab - 1`.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    /// Sequence length for the character tasks; modular addition always
    /// emits `a b =` and requires `seq_len == 3`.
    pub seq_len: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub batch_size: usize,
    pub data_seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::ConfigMismatch { detail });
        if self.train_size == 0 || self.test_size == 0 || self.batch_size == 0 {
            return fail("task sizes and batch size must be positive".into());
        }
        match self.kind {
            TaskKind::ModularAddition => {
                if self.vocab < 3 {
                    return fail(format!(
                        "modular addition needs vocab >= 3 (modulus >= 2), got {}",
                        self.vocab
                    ));
                }
                if self.seq_len != 3 {
                    return fail(format!(
                        "modular addition sequences are 'a b =' (length 3), got seq_len {}",
                        self.seq_len
                    ));
                }
                let p = self.vocab - 1;
                if self.train_size + self.test_size > p * p {
                    return fail(format!(
                        "modulus {p} admits {} distinct pairs, fewer than requested {}",
                        p * p,
                        self.train_size + self.test_size
                    ));
                }
            }
            TaskKind::CharCopy => {
                if self.vocab < 2 {
                    return fail("char-copy needs vocab >= 2".into());
                }
                if self.seq_len < 4 || self.seq_len % 2 != 0 {
                    return fail(format!(
                        "char-copy repeats a pattern, so seq_len must be even and >= 4, got {}",
                        self.seq_len
                    ));
                }
            }
            TaskKind::CharLm => {
                if self.vocab < 3 {
                    return fail("char-lm needs vocab >= 3".into());
                }
                if self.seq_len < 4 {
                    return fail(format!("char-lm needs seq_len >= 4, got {}", self.seq_len));
                }
            }
        }
        Ok(())
    }
}

/// One example: tokens, next-token targets, and per-position score weights.
type Example = (Vec<usize>, Vec<usize>, Vec<f64>);

fn modular_examples(spec: &TaskSpec, r: &mut rand_chacha::ChaCha20Rng) -> Vec<Example> {
    let p = spec.vocab - 1;
    let mut pairs: Vec<(usize, usize)> = (0..p)
        .flat_map(|a| (0..p).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(r);
    pairs
        .into_iter()
        .take(spec.train_size + spec.test_size)
        .map(|(a, b)| {
            (
                vec![a, b, p],
                vec![b, p, (a + b) % p],
                vec![0.0, 0.0, 1.0],
            )
        })
        .collect()
}

/// Samples `count` distinct token vectors via `draw`, or reports that the
/// task cannot produce enough of them.
fn distinct_sequences(
    count: usize,
    attempts_per: usize,
    mut draw: impl FnMut() -> Vec<usize>,
) -> Result<Vec<Vec<usize>>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        if attempts > attempts_per * count + 100 {
            return Err(Error::ConfigMismatch {
                detail: format!(
                    "could not sample {count} distinct sequences; vocab/seq_len admit too few"
                ),
            });
        }
        attempts += 1;
        let s = draw();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

fn copy_examples(spec: &TaskSpec, r: &mut rand_chacha::ChaCha20Rng) -> Result<Vec<Example>> {
    let k = spec.seq_len / 2;
    let vocab = spec.vocab;
    let patterns = distinct_sequences(spec.train_size + spec.test_size, 50, || {
        (0..k).map(|_| r.random_range(0..vocab)).collect()
    })?;
    Ok(patterns
        .into_iter()
        .map(|x| {
            let mut tokens = x.clone();
            tokens.extend_from_slice(&x);
            let mut targets: Vec<usize> = tokens[1..].to_vec();
            targets.push(tokens[0]);
            let weights: Vec<f64> = (0..spec.seq_len)
                .map(|i| if (k - 1..spec.seq_len - 1).contains(&i) { 1.0 } else { 0.0 })
                .collect();
            (tokens, targets, weights)
        })
        .collect())
}

fn lm_examples(spec: &TaskSpec, r: &mut rand_chacha::ChaCha20Rng) -> Result<Vec<Example>> {
    let v = spec.vocab;
    // Low-entropy order-2 transition table: three preferred successors per
    // context with fixed probabilities, everything derived from the data seed.
    let mut table = Vec::with_capacity(v * v);
    for _ in 0..v * v {
        let mut succ = Vec::with_capacity(3);
        while succ.len() < 3 {
            let t = r.random_range(0..v);
            if !succ.contains(&t) {
                succ.push(t);
            }
        }
        table.push(succ);
    }
    let probs = [0.6, 0.3, 0.1];
    let seqs = distinct_sequences(spec.train_size + spec.test_size, 50, || {
        let mut s = vec![r.random_range(0..v), r.random_range(0..v)];
        while s.len() < spec.seq_len {
            let ctx = &table[s[s.len() - 2] * v + s[s.len() - 1]];
            let u: f64 = r.random_range(0.0..1.0);
            let pick = if u < probs[0] {
                ctx[0]
            } else if u < probs[0] + probs[1] {
                ctx[1]
            } else {
                ctx[2]
            };
            s.push(pick);
        }
        s
    })?;
    Ok(seqs
        .into_iter()
        .map(|tokens| {
            let mut targets: Vec<usize> = tokens[1..].to_vec();
            targets.push(tokens[0]);
            let weights: Vec<f64> = (0..spec.seq_len)
                .map(|i| if (1..spec.seq_len - 1).contains(&i) { 1.0 } else { 0.0 })
                .collect();
            (tokens, targets, weights)
        })
        .collect())
}

fn into_batches(examples: &[Example], batch_size: usize) -> Result<Vec<Batch>> {
    examples
        .chunks(batch_size)
        .map(|chunk| {
            let tokens = chunk.iter().map(|e| e.0.clone()).collect();
            let targets = chunk.iter().map(|e| e.1.clone()).collect();
            let mask = chunk.iter().map(|e| e.2.clone()).collect();
            Batch::with_mask(tokens, targets, Some(mask))
        })
        .collect()
}

/// Deterministically generates the train and test splits for a task. The
/// splits come from one shuffled pool of distinct examples, so they are
/// disjoint.
pub fn generate_dataset(spec: &TaskSpec) -> Result<(Vec<Batch>, Vec<Batch>)> {
    spec.validate()?;
    let mut r = rng::seeded(spec.data_seed);
    let examples = match spec.kind {
        TaskKind::ModularAddition => modular_examples(spec, &mut r),
        TaskKind::CharCopy => copy_examples(spec, &mut r)?,
        TaskKind::CharLm => lm_examples(spec, &mut r)?,
    };
    let train = into_batches(&examples[..spec.train_size], spec.batch_size)?;
    let test = into_batches(&examples[spec.train_size..], spec.batch_size)?;
    Ok((train, test))
}

/// Optimizer settings for [`train`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

/// Training outcome: final parameters plus the loss trace.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: TransformerParams,
    /// Mean train loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Test-split metrics of the final parameters.
    pub test: EvalMetrics,
    /// Train-split metrics of the final parameters.
    pub train: EvalMetrics,
}

/// Adam training from a seeded initialization. Batches run in a fixed order
/// so a (model seed, data seed) pair is bitwise reproducible. A batch loss
/// above ten times the initial loss, or a non-finite one, aborts.
pub fn train(
    config: &TransformerConfig,
    task: &TaskSpec,
    opt: &TrainConfig,
    model_seed: u64,
) -> Result<TrainReport> {
    if !opt.lr.is_finite() || opt.lr < 0.0 || !opt.weight_decay.is_finite() || opt.weight_decay < 0.0
    {
        return Err(Error::ConfigMismatch {
            detail: format!(
                "learning rate {} and weight decay {} must be finite and non-negative",
                opt.lr, opt.weight_decay
            ),
        });
    }
    if config.vocab != task.vocab {
        return Err(Error::ConfigMismatch {
            detail: format!(
                "model vocab {} does not match task vocab {}",
                config.vocab, task.vocab
            ),
        });
    }
    if config.max_seq < task.seq_len {
        return Err(Error::ConfigMismatch {
            detail: format!(
                "model max_seq {} is shorter than task sequences ({})",
                config.max_seq, task.seq_len
            ),
        });
    }
    let (train_data, test_data) = generate_dataset(task)?;
    let mut params = TransformerParams::init(config, model_seed)?;
    let mut adam = Adam::with_weight_decay(opt.lr, opt.weight_decay);
    let mut epoch_losses = Vec::with_capacity(opt.epochs);
    let mut initial_loss = f64::INFINITY;
    let mut step = 0usize;

    for _ in 0..opt.epochs {
        let mut epoch_sum = 0.0;
        for batch in &train_data {
            let mut tape = Tape::new();
            let model = TapeModel::from_params(&mut tape, &params, true);
            let loss_var = model.batch_loss(&mut tape, batch)?;
            let loss = tape.value(loss_var).get(0, 0);
            if step == 0 {
                initial_loss = loss;
            }
            if !loss.is_finite() || loss > 10.0 * initial_loss {
                return Err(Error::TrainingDiverged { step, loss });
            }
            epoch_sum += loss;
            let grads = tape.backward(loss_var)?;
            let vars = model.vars();
            let mut views = params.tensor_views_mut();
            let mut leaves: Vec<&mut Matrix> = views.iter_mut().map(|(_, m)| &mut **m).collect();
            let grad_refs: Vec<Option<&Matrix>> = vars.iter().map(|&v| grads.get(v)).collect();
            adam.step(&mut leaves, &grad_refs)?;
            step += 1;
        }
        epoch_losses.push(epoch_sum / train_data.len() as f64);
    }

    let test = eval_dataset(&params, &test_data)?;
    let train = eval_dataset(&params, &train_data)?;
    Ok(TrainReport {
        params,
        epoch_losses,
        test,
        train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{Activation, NormKind};

    fn copy_spec() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::CharCopy,
            vocab: 6,
            seq_len: 8,
            train_size: 48,
            test_size: 16,
            batch_size: 16,
            data_seed: 7,
        }
    }

    fn tiny_config(vocab: usize, max_seq: usize) -> TransformerConfig {
        TransformerConfig::new(vocab, max_seq, 16, 1, 2)
            .unwrap()
            .with_d_h(24)
            .with_activation(Activation::Relu)
            .with_norm(NormKind::RmsNorm)
    }

    fn all_sequences(batches: &[Batch]) -> Vec<Vec<usize>> {
        batches.iter().flat_map(|b| b.tokens.clone()).collect()
    }

    #[test]
    fn datasets_are_deterministic_and_disjoint() {
        for kind in [TaskKind::ModularAddition, TaskKind::CharCopy, TaskKind::CharLm] {
            let spec = TaskSpec {
                kind,
                vocab: if kind == TaskKind::ModularAddition { 14 } else { 6 },
                seq_len: if kind == TaskKind::ModularAddition { 3 } else { 8 },
                train_size: 40,
                test_size: 20,
                batch_size: 16,
                data_seed: 11,
            };
            let (tr1, te1) = generate_dataset(&spec).unwrap();
            let (tr2, te2) = generate_dataset(&spec).unwrap();
            assert_eq!(all_sequences(&tr1), all_sequences(&tr2), "{}", kind.name());
            assert_eq!(all_sequences(&te1), all_sequences(&te2), "{}", kind.name());

            let train_set: HashSet<Vec<usize>> = all_sequences(&tr1).into_iter().collect();
            let overlap = all_sequences(&te1)
                .into_iter()
                .filter(|s| train_set.contains(s))
                .count();
            assert_eq!(overlap, 0, "{}: train/test overlap", kind.name());
        }
    }

    #[test]
    fn modular_targets_stay_below_the_modulus() {
        let spec = TaskSpec {
            kind: TaskKind::ModularAddition,
            vocab: 14,
            seq_len: 3,
            train_size: 100,
            test_size: 40,
            batch_size: 32,
            data_seed: 3,
        };
        let p = spec.vocab - 1;
        let (train, test) = generate_dataset(&spec).unwrap();
        for b in train.iter().chain(&test) {
            let mask = b.mask.as_ref().unwrap();
            for (seq, (targets, weights)) in b.tokens.iter().zip(b.targets.iter().zip(mask)) {
                assert_eq!(seq[2], p, "third token is the = marker");
                for (t, w) in targets.iter().zip(weights) {
                    if *w > 0.0 {
                        assert!(*t < p, "scored target {t} >= modulus {p}");
                    }
                }
            }
        }
    }

    #[test]
    fn epoch_cap_zero_returns_the_initialization() {
        let spec = copy_spec();
        let config = tiny_config(spec.vocab, spec.seq_len);
        let opt = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let report = train(&config, &spec, &opt, 5).unwrap();
        let init = TransformerParams::init(&config, 5).unwrap();
        let gap = report
            .params
            .tensor_views()
            .iter()
            .zip(init.tensor_views())
            .map(|((_, x), (_, y))| x.max_abs_diff(y))
            .fold(0.0, f64::max);
        assert_eq!(gap, 0.0);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let spec = copy_spec();
        let config = tiny_config(spec.vocab, spec.seq_len);
        let opt = TrainConfig { epochs: 6, lr: 3e-3, weight_decay: 1e-4 };
        let a = train(&config, &spec, &opt, 5).unwrap();
        assert!(
            a.epoch_losses.last().unwrap() < a.epoch_losses.first().unwrap(),
            "loss did not drop: {:?}",
            a.epoch_losses
        );
        for w in a.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-4, "loss rose beyond plateau tolerance: {:?}", a.epoch_losses);
        }
        let b = train(&config, &spec, &opt, 5).unwrap();
        let gap = a
            .params
            .tensor_views()
            .iter()
            .zip(b.params.tensor_views())
            .map(|((_, x), (_, y))| x.max_abs_diff(y))
            .fold(0.0, f64::max);
        assert_eq!(gap, 0.0, "same seeds must reproduce bitwise");
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        let spec = copy_spec();
        let config = tiny_config(spec.vocab, spec.seq_len);
        let opt = TrainConfig { epochs: 20, lr: 30.0, weight_decay: 0.0 };
        match train(&config, &spec, &opt, 5) {
            Err(Error::TrainingDiverged { loss, .. }) => {
                assert!(!loss.is_finite() || loss > 0.0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn task_specs_are_validated() {
        let mut spec = copy_spec();
        spec.seq_len = 7;
        assert!(generate_dataset(&spec).is_err());
        let bad_mod = TaskSpec {
            kind: TaskKind::ModularAddition,
            vocab: 5,
            seq_len: 3,
            train_size: 100,
            test_size: 100,
            batch_size: 8,
            data_seed: 0,
        };
        assert!(matches!(
            generate_dataset(&bad_mod),
            Err(Error::ConfigMismatch { .. })
        ));
        let tiny_copy = TaskSpec {
            kind: TaskKind::CharCopy,
            vocab: 2,
            seq_len: 4,
            train_size: 100,
            test_size: 100,
            batch_size: 8,
            data_seed: 0,
        };
        assert!(generate_dataset(&tiny_copy).is_err(), "only 4 distinct patterns exist");
        assert_eq!(TaskKind::parse("char-lm").unwrap(), TaskKind::CharLm);
        assert!(TaskKind::parse("sorting").is_err());
    }
}
