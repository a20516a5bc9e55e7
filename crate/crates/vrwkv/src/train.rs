//! Toy supervised training: cross-entropy on the synthetic task, AdamW with
//! warmup + cosine schedule, JSONL step logging, binary checkpoint at the
//! end. Fully deterministic per (seed, config, budget).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use biwkv::KernelError;

use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::data::{make_dataset, DataError, Dataset, SyntheticTask};
use crate::encoder::{model_backward, model_forward, model_forward_trace};
use crate::model::{init_params, ModelConfig, ModelError, ModelParams};
use crate::optim::{OptimError, OptimSettings, OptimState};
use crate::tensor::Mat;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("attention kernel overflow at step {step}: {source}")]
    KernelOverflow { step: u64, source: KernelError },
    #[error("optimizer blow-up at step {step}: {detail}")]
    OptimizerDivergence { step: u64, detail: String },
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub dataset_size: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_train_accuracy: f64,
    pub final_train_loss: f64,
    pub loss_trace: Vec<f64>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Stable softmax cross-entropy. Returns `(mean loss, accuracy, d loss /
/// d logits)`.
pub fn softmax_cross_entropy(
    logits: &Mat<f64>,
    labels: &[usize],
) -> (f64, f64, Mat<f64>) {
    let (b, k) = (logits.rows, logits.cols);
    assert_eq!(labels.len(), b);
    let mut grad = Mat::zeros(b, k);
    let mut loss = 0.0;
    let mut correct = 0usize;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &x in row {
            denom += (x - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss -= (row[labels[i]] - log_denom) * inv_b;
        let mut arg = 0usize;
        for (j, &x) in row.iter().enumerate() {
            let p = (x - log_denom).exp();
            *grad.at_mut(i, j) = (p - if j == labels[i] { 1.0 } else { 0.0 }) * inv_b;
            if x > row[arg] {
                arg = j;
            }
        }
        if arg == labels[i] {
            correct += 1;
        }
    }
    (loss, correct as f64 / b as f64, grad)
}

/// Mean loss and accuracy over a dataset, batched, no activation saving.
pub fn evaluate(
    params: &ModelParams<f64>,
    config: &ModelConfig,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64), ModelError> {
    let n = dataset.len();
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    let mut seen = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (images, labels) = dataset.batch(&indices);
        let logits = model_forward(&images, params, config)?;
        let (loss, acc, _) = softmax_cross_entropy(&logits, &labels);
        loss_sum += loss * indices.len() as f64;
        correct += acc * indices.len() as f64;
        seen += indices.len();
        start = end;
    }
    Ok((loss_sum / seen as f64, correct / seen as f64))
}

fn classify_model_error(err: ModelError, step: u64) -> TrainError {
    match err {
        ModelError::Kernel(k @ KernelError::NumericalOverflow { .. }) => {
            TrainError::KernelOverflow { step, source: k }
        }
        ModelError::Kernel(k @ KernelError::NonFinite { .. }) => {
            // Non-finite activations reaching the kernel are an optimizer
            // blow-up upstream of the attention, not a kernel failure.
            TrainError::OptimizerDivergence {
                step,
                detail: k.to_string(),
            }
        }
        other => TrainError::Model(other),
    }
}

/// Run the training loop and write `train_log.jsonl` plus `model.ckpt`
/// into `out_dir`.
pub fn train(
    config: &ModelConfig,
    task: &SyntheticTask,
    settings: &TrainSettings,
    out_dir: &Path,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(TrainError::Model)?;
    fs::create_dir_all(out_dir)?;
    let dataset = make_dataset(task, settings.dataset_size)?;
    let mut params = init_params(config, seed);
    let optim_settings = OptimSettings::new(
        settings.base_lr,
        settings.weight_decay,
        settings.steps,
        settings.warmup_steps,
    );
    let mut optim = OptimState::new(config, optim_settings);

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let mut loss_trace = Vec::with_capacity(settings.steps as usize);

    let n = dataset.len();
    let mut perm: Vec<usize> = Vec::new();
    let mut pos = 0usize;
    let mut epoch = 0u64;
    for step in 0..settings.steps {
        if perm.is_empty() || pos + settings.batch_size > n {
            // Per-epoch seeded shuffle keeps batch composition reproducible.
            perm = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ epoch);
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            pos = 0;
            epoch += 1;
        }
        let indices = &perm[pos..pos + settings.batch_size];
        pos += settings.batch_size;
        let (images, labels) = dataset.batch(indices);
        let (logits, trace) = model_forward_trace(&images, &params, config)
            .map_err(|e| classify_model_error(e, step))?;
        let (loss, accuracy, g_logits) = softmax_cross_entropy(&logits, &labels);
        if !loss.is_finite() {
            return Err(TrainError::OptimizerDivergence {
                step,
                detail: format!("loss became {loss}"),
            });
        }
        let (grads, _) = model_backward(&g_logits, &params, config, &trace)
            .map_err(|e| classify_model_error(e, step))?;
        let lr = optim
            .apply(&mut params, &grads, config)
            .map_err(|e: OptimError| TrainError::OptimizerDivergence {
                step,
                detail: e.to_string(),
            })?;
        loss_trace.push(loss);
        writeln!(
            log,
            "{}",
            serde_json::json!({
                "step": step,
                "lr": lr,
                "loss": loss,
                "accuracy": accuracy,
            })
        )?;
    }
    log.flush()?;

    let (final_loss, final_acc) =
        evaluate(&params, config, &dataset, settings.batch_size.max(1))
            .map_err(|e| classify_model_error(e, settings.steps))?;
    let checkpoint_path = out_dir.join("model.ckpt");
    save_checkpoint(&checkpoint_path, config, &params)?;
    Ok(TrainOutcome {
        final_train_accuracy: final_acc,
        final_train_loss: final_loss,
        loss_trace,
        checkpoint_path,
        log_path,
    })
}
