//! The training loop.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{multi_similarity_loss, MsLossParams};
use super::optim::{AdamW, AdamWConfig};
use super::sampler::{epoch_batches, BatchSpec};
use super::schedule::LrSchedule;
use crate::data::checkpoint::save_checkpoint;
use crate::data::dataset::{EvalSplit, PlaceDataset};
use crate::data::manifest::Role;
use crate::data::synthetic::{augment, ViewJitter};
use crate::error::{Error, Result};
use crate::model::{BoqModel, ModelConfig, ModelInput};
use crate::retrieval::{evaluate, DescriptorIndex, EvalResult, MatchRule};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct TrainConfig {
    pub batch: BatchSpec,
    pub loss: MsLossParams,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    /// Training-time augmentation of image inputs.
    pub augment: Option<ViewJitter>,
    /// Keep the convolutional stem at its initial weights.
    pub freeze_stem: bool,
    pub match_rule: MatchRule,
    pub seed: u64,
}


#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub val_recall1: f64,
}

impl EpochMetrics {
    /// `epoch,lr,train_loss,val_recall@1`
    pub fn log_line(&self) -> String {
        format!(
            "{},{:.10},{:.6},{:.4}",
            self.epoch, self.lr, self.train_loss, self.val_recall1
        )
    }
}

/// Where to persist progress. Both files are rewritten from scratch.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Best-by-validation checkpoint, replaced whenever validation improves.
    pub checkpoint: Option<PathBuf>,
    /// One line per finished epoch.
    pub metrics_log: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation recall@1.
    pub best: BoqModel,
    pub best_epoch: usize,
    pub last: BoqModel,
    pub metrics: Vec<EpochMetrics>,
}

/// Embeds the given samples in evaluation mode with the cached query context.
pub fn embed_samples(model: &BoqModel, dataset: &PlaceDataset, indices: &[usize]) -> Result<Vec<Tensor>> {
    let mut frozen = model.clone();
    frozen.set_training(false);
    let cache = frozen.precompute_query_context()?;
    indices
        .iter()
        .map(|&i| frozen.embed(&dataset.samples[i].input, Some(&cache)))
        .collect()
}

/// Retrieval of every query against every reference of `split`.
pub fn evaluate_split(model: &BoqModel, dataset: &PlaceDataset, split: &EvalSplit, ks: &[usize]) -> Result<EvalResult> {
    let refs = embed_samples(model, dataset, &split.references)?;
    let ids = split.references.iter().map(|&i| dataset.samples[i].id.clone()).collect();
    let index = DescriptorIndex::new(ids, &refs)?;
    let queries = embed_samples(model, dataset, &split.queries)?;
    evaluate(&index, &queries, &split.ground_truth, ks)
}

fn create_log(path: &Path) -> Result<File> {
    File::create(path)?;
    Ok(OpenOptions::new().append(true).open(path)?)
}

/// One optimization step on a batch; returns the batch loss.
fn train_step(
    model: &mut BoqModel,
    inputs: &[ModelInput],
    place_ids: &[u64],
    cfg: &TrainConfig,
    optimizer: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.params().map(&mut |name, t| {
        if cfg.freeze_stem && name.starts_with("stem.") {
            tape.constant(t)
        } else {
            tape.param(t)
        }
    });
    let mut rows = Vec::with_capacity(inputs.len());
    for input in inputs {
        let fwd = model.forward(&mut tape, &vars, input, None)?;
        let d = tape.shape(fwd.descriptor)[0];
        rows.push(tape.reshape(fwd.descriptor, &[1, d])?);
    }
    let descriptors = tape.concat(&rows, 0)?;
    let loss = multi_similarity_loss(&mut tape, descriptors, place_ids, &cfg.loss)?;
    let value = tape.value(loss)[0];
    tape.backward(loss)?;

    let grads: Vec<Option<Vec<f64>>> = vars
        .named()
        .into_iter()
        .map(|(name, v)| {
            if cfg.freeze_stem && name.starts_with("stem.") {
                None
            } else {
                Some(tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(*v).len()]))
            }
        })
        .collect();
    let mut params = model.params_mut().named_mut();
    for ((_, t), g) in params.iter_mut().zip(&grads) {
        t.zero_grad();
        if let Some(g) = g {
            t.accumulate_grad(g)?;
        }
    }
    let mut refs: Vec<(&str, &mut Tensor)> = params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
    optimizer.step(&mut refs, lr)?;
    Ok(value)
}

fn batch_inputs<R: rand::Rng>(
    dataset: &PlaceDataset,
    indices: &[usize],
    jitter: Option<&ViewJitter>,
    rng: &mut R,
) -> Result<Vec<ModelInput>> {
    indices
        .iter()
        .map(|&i| match (&dataset.samples[i].input, jitter) {
            (ModelInput::Image(img), Some(j)) => Ok(ModelInput::Image(augment(img, j, rng)?)),
            (input, _) => Ok(input.clone()),
        })
        .collect()
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        Error::NonFiniteGradient { param } => Error::Divergence {
            epoch,
            detail: format!("non-finite gradient in {param}"),
        },
        other => other,
    }
}

/// Trains a freshly initialized model seeded with `cfg.seed`.
pub fn train(model_config: &ModelConfig, dataset: &PlaceDataset, cfg: &TrainConfig, outputs: &TrainOutputs) -> Result<TrainOutcome> {
    let model = BoqModel::new(model_config.clone(), cfg.seed)?;
    train_model(model, dataset, cfg, outputs)
}

/// Runs `cfg.schedule.max_epochs` epochs of place-balanced metric learning
/// on the training records of `dataset`, validating on its queries and
/// references after every epoch.
pub fn train_model(mut model: BoqModel, dataset: &PlaceDataset, cfg: &TrainConfig, outputs: &TrainOutputs) -> Result<TrainOutcome> {
    cfg.loss.validate()?;
    cfg.schedule.validate()?;
    let places = dataset.places(Role::Train);
    let split = dataset.eval_split(cfg.match_rule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // fail early on an unusable dataset
    epoch_batches(&places, &cfg.batch, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;

    let mut log = outputs.metrics_log.as_deref().map(create_log).transpose()?;
    let mut optimizer = AdamW::new(cfg.optimizer);
    let mut metrics = Vec::with_capacity(cfg.schedule.max_epochs);
    let mut best: Option<(f64, usize, BoqModel)> = None;

    for epoch in 0..cfg.schedule.max_epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        model.set_training(true);
        let batches = epoch_batches(&places, &cfg.batch, &mut rng)?;
        let mut total = 0.0;
        for batch in &batches {
            let inputs = batch_inputs(dataset, &batch.indices, cfg.augment.as_ref(), &mut rng)?;
            let loss = train_step(&mut model, &inputs, &batch.place_ids, cfg, &mut optimizer, lr)
                .map_err(|e| diverged(e, epoch))?;
            total += loss;
        }
        model.set_training(false);
        let recall = evaluate_split(&model, dataset, &split, &[1]).map_err(|e| diverged(e, epoch))?.recall[&1];
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: total / batches.len() as f64,
            val_recall1: recall,
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", m.log_line())?;
            f.flush()?;
        }
        metrics.push(m);
        if best.as_ref().is_none_or(|(r, _, _)| recall > *r) {
            if let Some(path) = &outputs.checkpoint {
                save_checkpoint(path, &model)?;
            }
            best = Some((recall, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        metrics,
    })
}
