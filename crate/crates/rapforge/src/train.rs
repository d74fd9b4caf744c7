//! Training loops: the generator trained against a frozen classifier
//! (sample, generate unbounded adversaries, smooth when configured, project
//! into the budget, score with the chosen objective, back-propagate into the
//! generator only), plus supervised pretraining for the toy classifiers.
//!
//! Untargeted objectives are ascended (implemented as descending the
//! negated loss); the targeted objective is descended. Checkpoints bundle
//! generator weights and Adam moments in one weight file with a JSON
//! sidecar, so a resumed run reproduces the uninterrupted one bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::DatasetHandle;
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::eval::{craft_adversaries, fooling_rate};
use crate::losses::{ce_loss, rce_loss, targeted_loss, LossKind};
use crate::nets::{build_generator, ClassifierNet, GeneratorNet, WeightFile};
use crate::perturb::{project_var, smooth_var, PerturbationBudget, SmoothingKernel};
use crate::rng::{derive_seed, rng_from_seed};

const ADAM_EPS: f64 = 1e-8;
/// Monitoring slice size when a dataset has no validation split.
const FALLBACK_VAL: usize = 256;

/// Where the labels scored by the untargeted objectives come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    GroundTruth,
    /// Labels are the classifier's own clean predictions; works on
    /// unlabeled data.
    CleanPrediction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    /// Epochs without validation-fooling improvement before stopping.
    pub patience: usize,
}

/// Generator training configuration. Optimizer defaults follow the usual
/// adversarial-generator recipe: Adam at 1e-4 with betas (0.5, 0.999).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub budget: PerturbationBudget,
    #[serde(default)]
    pub smoothing: Option<SmoothingKernel>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub label_mode: LabelMode,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

impl TrainConfig {
    pub fn new(loss: LossKind, budget: PerturbationBudget, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            loss,
            budget,
            smoothing: None,
            epochs,
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed,
            label_mode: LabelMode::CleanPrediction,
            early_stop: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Everything except the epoch budget must match for a resume.
    fn compatible(&self, other: &TrainConfig) -> Result<()> {
        let mut mismatches = Vec::new();
        if self.loss != other.loss {
            mismatches.push("loss");
        }
        if self.budget != other.budget {
            mismatches.push("budget");
        }
        if self.smoothing != other.smoothing {
            mismatches.push("smoothing");
        }
        if self.batch_size != other.batch_size {
            mismatches.push("batch_size");
        }
        if self.lr != other.lr {
            mismatches.push("lr");
        }
        if self.beta1 != other.beta1 {
            mismatches.push("beta1");
        }
        if self.beta2 != other.beta2 {
            mismatches.push("beta2");
        }
        if self.seed != other.seed {
            mismatches.push("seed");
        }
        if self.label_mode != other.label_mode {
            mismatches.push("label_mode");
        }
        if self.early_stop != other.early_stop {
            mismatches.push("early_stop");
        }
        if mismatches.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(mismatches.join(", ")))
        }
    }
}

/// First/second Adam moments, aligned with a parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[(String, &Tensor)]) -> AdamState {
        AdamState {
            m: params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (i, (name, param)) in params.iter_mut().enumerate() {
        let grad = &grads[i];
        if grad.shape() != param.shape() {
            return Err(Error::ParamShapeMismatch {
                name: name.clone(),
                expected: param.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = param.data_mut();
        for j in 0..p.len() {
            let g = grad.data()[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-epoch training record for the generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_fool_rate: f64,
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    /// 1-based epoch whose weights the generator ended up with.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Checkpoint destination plus the provenance recorded in sidecars.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub classifier_id: String,
}

/// JSON sidecar stored next to every checkpoint weight file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub adam_t: u64,
    pub config: TrainConfig,
    pub history: Vec<EpochMetrics>,
    pub generator_arch: String,
    pub input_shape: (usize, usize, usize),
    pub trained_against: String,
    pub train_domain: String,
    pub best_epoch: usize,
}

fn checkpoint_weightfile(gen: &GeneratorNet, adam: &AdamState) -> WeightFile {
    let mut wf = WeightFile::new();
    let params = gen.params();
    for (name, t) in &params {
        wf.push(format!("gen.{name}"), (*t).clone());
    }
    for ((name, _), m) in params.iter().zip(&adam.m) {
        wf.push(format!("adam.m.{name}"), m.clone());
    }
    for ((name, _), v) in params.iter().zip(&adam.v) {
        wf.push(format!("adam.v.{name}"), v.clone());
    }
    wf
}

fn write_checkpoint(dir: &Path, stem: &str, gen: &GeneratorNet, adam: &AdamState, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint_weightfile(gen, adam).save(&dir.join(format!("{stem}.rwt")))?;
    let json = serde_json::to_string_pretty(meta)?;
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a checkpoint sidecar plus its weight file (same stem, `.rwt`).
pub fn load_checkpoint(json_path: &Path) -> Result<(CheckpointMeta, WeightFile)> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let wf = WeightFile::load(&json_path.with_extension("rwt"))?;
    Ok((meta, wf))
}

/// Rebuild a generator and Adam state from a loaded checkpoint.
pub fn restore_generator(meta: &CheckpointMeta, wf: &WeightFile) -> Result<(GeneratorNet, AdamState)> {
    let mut gen = build_generator(&meta.generator_arch, meta.input_shape, 0)?;
    let n = gen.params().len();
    if wf.entries.len() != 3 * n {
        return Err(Error::ParamSetMismatch(format!(
            "checkpoint holds {} entries, expected {}",
            wf.entries.len(),
            3 * n
        )));
    }
    let mut adam = AdamState::new(&gen.params());
    adam.t = meta.adam_t;
    {
        let names: Vec<String> = gen.params().iter().map(|(n, _)| n.clone()).collect();
        let mut params = gen.params_mut();
        for (i, (name, slot)) in params.iter_mut().enumerate() {
            for (prefix, target) in [("gen", None), ("adam.m", Some(0)), ("adam.v", Some(1))] {
                let key = format!("{prefix}.{name}");
                let tensor = wf
                    .get(&key)
                    .ok_or_else(|| Error::ParamSetMismatch(format!("missing checkpoint entry {key:?}")))?;
                if tensor.shape() != slot.shape() {
                    return Err(Error::ParamShapeMismatch {
                        name: key,
                        expected: slot.shape().to_vec(),
                        got: tensor.shape().to_vec(),
                    });
                }
                match target {
                    None => **slot = tensor.clone(),
                    Some(0) => adam.m[i] = tensor.clone(),
                    _ => adam.v[i] = tensor.clone(),
                }
            }
        }
        let _ = names;
    }
    Ok((gen, adam))
}

/// Train/monitor index lists for a dataset: declared splits when present,
/// otherwise a seeded 90/10 split.
fn train_val_indices(data: &DatasetHandle, seed: u64) -> (Vec<usize>, Vec<usize>) {
    match data.splits() {
        Some(sp) if !sp.train.is_empty() => {
            let val = if sp.val.is_empty() {
                sp.train[..sp.train.len().min(FALLBACK_VAL)].to_vec()
            } else {
                sp.val.clone()
            };
            (sp.train.clone(), val)
        }
        _ => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut rng = rng_from_seed(derive_seed(seed, "train-autosplit"));
            order.shuffle(&mut rng);
            let cut = ((order.len() as f64) * 0.9).round() as usize;
            let cut = cut.clamp(1, order.len());
            let val = if cut == order.len() {
                order[..order.len().min(FALLBACK_VAL)].to_vec()
            } else {
                order[cut..].to_vec()
            };
            (order[..cut].to_vec(), val)
        }
    }
}

/// Train the generator against a frozen classifier. Returns per-epoch
/// metrics; the generator ends up with the best-epoch weights when early
/// stopping is configured, the final weights otherwise.
pub fn train_generator(
    gen: &mut GeneratorNet,
    clf: &ClassifierNet,
    data: &DatasetHandle,
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut adam = AdamState::new(&gen.params());
    run_epochs(gen, clf, data, cfg, sink, 0, &mut adam, Vec::new())
}

/// Continue training from a checkpoint sidecar. The supplied config must
/// match the stored one in everything but the epoch budget; the run then
/// reproduces an uninterrupted run of `cfg.epochs` epochs.
pub fn resume(
    checkpoint_json: &Path,
    clf: &ClassifierNet,
    data: &DatasetHandle,
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<(GeneratorNet, TrainOutcome)> {
    cfg.validate()?;
    let (meta, wf) = load_checkpoint(checkpoint_json)?;
    meta.config.compatible(cfg)?;
    if cfg.epochs < meta.epoch {
        return Err(Error::ConfigMismatch(format!(
            "target epochs {} below checkpoint epoch {}",
            cfg.epochs, meta.epoch
        )));
    }
    let (mut gen, mut adam) = restore_generator(&meta, &wf)?;
    let outcome = run_epochs(&mut gen, clf, data, cfg, sink, meta.epoch, &mut adam, meta.history)?;
    Ok((gen, outcome))
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    gen: &mut GeneratorNet,
    clf: &ClassifierNet,
    data: &DatasetHandle,
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
    start_epoch: usize,
    adam: &mut AdamState,
    mut history: Vec<EpochMetrics>,
) -> Result<TrainOutcome> {
    if !clf.frozen() {
        return Err(Error::Config("classifier must be frozen for generator training".into()));
    }
    if data.image_shape() != gen.input_shape() || data.image_shape() != clf.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "train_generator",
            lhs: vec![data.image_shape().0, data.image_shape().1, data.image_shape().2],
            rhs: vec![gen.input_shape().0, gen.input_shape().1, gen.input_shape().2],
        });
    }
    if cfg.label_mode == LabelMode::GroundTruth && data.labels().is_none() {
        return Err(Error::Config(
            "label_mode=ground_truth requires a labeled dataset".into(),
        ));
    }

    let (train_idx, val_idx) = train_val_indices(data, cfg.seed);
    let val_x = data.batch(&val_idx);

    let mut best_fool = f64::NEG_INFINITY;
    let mut best_epoch = start_epoch;
    let mut best_weights: Option<WeightFile> = None;
    for m in &history {
        if m.val_fool_rate > best_fool {
            best_fool = m.val_fool_rate;
            best_epoch = m.epoch;
        }
    }
    let mut stopped_early = false;

    for epoch in start_epoch..cfg.epochs {
        let mut order = train_idx.clone();
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &format!("epoch-order:{epoch}")));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.batch(chunk);
            let clean_logits = clf.predict(&x)?;
            let labels: Vec<usize> = match cfg.label_mode {
                LabelMode::GroundTruth => data.labels_for(chunk).expect("checked above"),
                LabelMode::CleanPrediction => clean_logits.argmax_rows()?,
            };

            // The targeted objective is undefined on samples already of the
            // target class; drop them from the batch.
            let (x, clean_logits, labels, targets) = match cfg.loss {
                LossKind::Targeted(target) => {
                    let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != target).collect();
                    if keep.is_empty() {
                        continue;
                    }
                    let kept_labels: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
                    let targets = vec![target; keep.len()];
                    (x.gather_axis0(&keep), clean_logits.gather_axis0(&keep), kept_labels, targets)
                }
                _ => (x, clean_logits, labels, Vec::new()),
            };

            let g = Graph::new();
            let xv = g.constant(&x)?;
            let (raw, param_vars) = gen.forward(&g, xv, true)?;
            let shaped = match &cfg.smoothing {
                Some(kernel) => smooth_var(&g, raw, kernel)?,
                None => raw,
            };
            let adv = project_var(xv, shaped, &cfg.budget)?;
            let (adv_logits, _) = clf.forward(&g, adv)?;

            let loss = match cfg.loss {
                LossKind::CeUntargeted => ce_loss(adv_logits, &labels)?,
                LossKind::RceUntargeted => rce_loss(&g, adv_logits, &clean_logits, &labels)?,
                LossKind::Targeted(_) => targeted_loss(&g, adv_logits, &targets, &clean_logits, &labels)?,
            };
            let loss_value = loss.value().item();
            if !loss_value.is_finite() {
                return Err(Error::NanLoss {
                    epoch: epoch + 1,
                    batch: batch_idx,
                });
            }
            loss_sum += loss_value * x.shape()[0] as f64;
            loss_count += x.shape()[0];

            let objective = if cfg.loss.maximizes() { loss.neg() } else { loss };
            objective.backward()?;

            let grads: Vec<Tensor> = param_vars
                .iter()
                .map(|p| p.grad().expect("generator parameters always receive gradients"))
                .collect();
            let mut params = gen.params_mut();
            adam_step(&mut params, &grads, adam, cfg.lr, cfg.beta1, cfg.beta2, ADAM_EPS)?;
        }

        let adv_val = craft_adversaries(gen, cfg.smoothing.as_ref(), &cfg.budget, &val_x)?;
        let val_fool = fooling_rate(clf, &val_x, &adv_val, &cfg.budget)?;
        let mean_loss = if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN };
        history.push(EpochMetrics {
            epoch: epoch + 1,
            mean_loss,
            val_fool_rate: val_fool,
        });

        if val_fool > best_fool {
            best_fool = val_fool;
            best_epoch = epoch + 1;
            if cfg.early_stop.is_some() {
                best_weights = Some(gen.to_weight_file());
            }
        }

        if let Some(sink) = sink {
            let meta = CheckpointMeta {
                epoch: epoch + 1,
                adam_t: adam.t,
                config: cfg.clone(),
                history: history.clone(),
                generator_arch: gen.arch().to_string(),
                input_shape: gen.input_shape(),
                trained_against: sink.classifier_id.clone(),
                train_domain: data.name.clone(),
                best_epoch,
            };
            write_checkpoint(&sink.dir, &format!("epoch_{:03}", epoch + 1), gen, adam, &meta)?;
        }

        if let Some(es) = &cfg.early_stop {
            let since_best = history.last().expect("just pushed").epoch - best_epoch;
            if since_best >= es.patience {
                stopped_early = true;
                break;
            }
        }
    }

    if cfg.early_stop.is_some() {
        if let Some(wf) = best_weights {
            gen.load_weight_file(&wf)?;
        }
    } else {
        best_epoch = history.last().map_or(start_epoch, |m| m.epoch);
    }

    if let Some(sink) = sink {
        let meta = CheckpointMeta {
            epoch: best_epoch,
            adam_t: adam.t,
            config: cfg.clone(),
            history: history.clone(),
            generator_arch: gen.arch().to_string(),
            input_shape: gen.input_shape(),
            trained_against: sink.classifier_id.clone(),
            train_domain: data.name.clone(),
            best_epoch,
        };
        write_checkpoint(&sink.dir, "best", gen, adam, &meta)?;
    }

    Ok(TrainOutcome {
        history,
        best_epoch,
        stopped_early,
    })
}

/// Supervised pretraining configuration for the toy classifiers.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClfTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl ClfTrainConfig {
    pub fn new(epochs: usize, seed: u64) -> ClfTrainConfig {
        ClfTrainConfig {
            epochs,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed,
        }
    }
}

/// Per-epoch record for classifier pretraining.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClfEpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

/// Minimize cross-entropy on a labeled dataset with Adam. The classifier
/// must not be frozen.
pub fn train_classifier(
    clf: &mut ClassifierNet,
    data: &DatasetHandle,
    cfg: &ClfTrainConfig,
) -> Result<Vec<ClfEpochMetrics>> {
    if clf.frozen() {
        return Err(Error::Config("cannot train a frozen classifier".into()));
    }
    let labels_all = data.labels().ok_or(Error::MissingLabels)?.to_vec();
    if data.image_shape() != clf.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "train_classifier",
            lhs: vec![data.image_shape().0, data.image_shape().1, data.image_shape().2],
            rhs: vec![clf.input_shape().0, clf.input_shape().1, clf.input_shape().2],
        });
    }
    let (train_idx, val_idx) = train_val_indices(data, cfg.seed);
    let mut adam = AdamState::new(&clf.params());
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &format!("clf-epoch-order:{epoch}")));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.batch(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels_all[i]).collect();
            let g = Graph::new();
            let xv = g.constant(&x)?;
            let (logits, param_vars) = clf.forward(&g, xv)?;
            let loss = ce_loss(logits, &y)?;
            let loss_value = loss.value().item();
            if !loss_value.is_finite() {
                return Err(Error::NanLoss {
                    epoch: epoch + 1,
                    batch: batch_idx,
                });
            }
            loss_sum += loss_value * x.shape()[0] as f64;
            count += x.shape()[0];
            loss.backward()?;
            let grads: Vec<Tensor> = param_vars
                .iter()
                .map(|p| p.grad().expect("trainable classifier parameters receive gradients"))
                .collect();
            let mut params = clf.params_mut();
            adam_step(&mut params, &grads, &mut adam, cfg.lr, cfg.beta1, cfg.beta2, ADAM_EPS)?;
        }
        let val_x = data.batch(&val_idx);
        let preds = clf.predict_labels(&val_x)?;
        let hits = preds
            .iter()
            .zip(val_idx.iter().map(|&i| labels_all[i]))
            .filter(|(p, y)| **p == *y)
            .count();
        out.push(ClfEpochMetrics {
            epoch: epoch + 1,
            mean_loss: loss_sum / count.max(1) as f64,
            val_accuracy: 100.0 * hits as f64 / val_idx.len().max(1) as f64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_single_step_hand_computed() {
        // p=0, grad=1, lr=0.1, betas (0.5, 0.999), step 1:
        // m_hat = 1, v_hat = 1, p -> -0.1 / (1 + 1e-8)
        let mut p = Tensor::zeros(&[1]);
        let mut state = AdamState::new(&[("p".into(), &p)]);
        let grad = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut params = vec![("p".to_string(), &mut p)];
        adam_step(&mut params, &[grad], &mut state, 0.1, 0.5, 0.999, 1e-8).unwrap();
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-12);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_grad_keeps_params_and_counts() {
        let mut p = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&[("p".into(), &p)]);
        let grad = Tensor::zeros(&[2]);
        let mut params = vec![("p".to_string(), &mut p)];
        adam_step(&mut params, &[grad], &mut state, 0.1, 0.5, 0.999, 1e-8).unwrap();
        assert_eq!(p.data(), before.data());
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_trajectories_are_deterministic() {
        let run = || {
            let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
            let mut state = AdamState::new(&[("p".into(), &p)]);
            for step in 0..20 {
                let grad = p.map(|v| 2.0 * v + step as f64 * 0.01);
                let mut params = vec![("p".to_string(), &mut p)];
                adam_step(&mut params, &[grad], &mut state, 0.05, 0.5, 0.999, 1e-8).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn adam_rejects_misaligned_grads() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamState::new(&[("p".into(), &p)]);
        let grad = Tensor::zeros(&[3]);
        let mut params = vec![("p".to_string(), &mut p)];
        assert!(adam_step(&mut params, &[grad], &mut state, 0.1, 0.5, 0.999, 1e-8).is_err());
    }

    #[test]
    fn config_validation_and_compatibility() {
        let budget = PerturbationBudget::new(0.3).unwrap();
        let mut cfg = TrainConfig::new(LossKind::RceUntargeted, budget, 2, 0);
        assert!(cfg.validate().is_ok());
        assert!((cfg.lr - 1e-4).abs() < 1e-18);
        assert!((cfg.beta1 - 0.5).abs() < 1e-18);
        assert!((cfg.beta2 - 0.999).abs() < 1e-18);
        assert_eq!(cfg.batch_size, 32);

        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lr = 1e-4;
        cfg.beta1 = 1.0;
        assert!(cfg.validate().is_err());
        cfg.beta1 = 0.5;

        let mut other = cfg.clone();
        other.epochs = 7;
        assert!(cfg.compatible(&other).is_ok());
        other.batch_size = 16;
        match cfg.compatible(&other) {
            Err(Error::ConfigMismatch(fields)) => assert!(fields.contains("batch_size")),
            _ => panic!("expected config mismatch"),
        }
    }
}
