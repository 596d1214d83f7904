//! Teacher-forced training: loss graph construction, AdamW with
//! decoupled weight decay, warmup-cosine learning-rate schedule,
//! early stopping, and the epoch loop.
//!
//! The loop is single-threaded and fully seeded; identical inputs
//! reproduce identical loss histories and parameters bit for bit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{decode_ppm, preprocess_image, Manifest};
use crate::error::{Error, Result};
use crate::model::{decode_forward, encode_memory, init_params, ModelConfig};
use crate::rng;
use crate::tensor::{NodeId, Parameters, Tape};
use crate::text::{self, Vocabulary};

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.05,
            patience: 3,
            min_delta: 1e-4,
            batch_size: 4,
            seed: 0,
            val_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    /// Field checks. A zero learning rate is allowed so the no-update
    /// degenerate case stays testable.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail(format!(
                "warmup fraction must lie in [0, 1], got {}",
                self.warmup_fraction
            ));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return fail(format!("min_delta must be >= 0, got {}", self.min_delta));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return fail(format!(
                "val fraction must lie in [0, 1], got {}",
                self.val_fraction
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl OptimState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &Parameters) -> Self {
        let m = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        let v = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        OptimState { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One AdamW update with bias correction and decoupled decay:
/// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g²; with mhat = m/(1-b1^t)
/// and vhat = v/(1-b2^t), theta <- theta - lr_t (mhat/(sqrt(vhat)+eps)
/// + lambda theta). Gradients are zeroed afterwards.
///
/// A non-finite gradient aborts before any tensor is touched.
pub fn adamw_step(
    params: &mut Parameters,
    state: &mut OptimState,
    cfg: &TrainConfig,
    lr_t: f64,
) -> Result<()> {
    if !(lr_t.is_finite() && lr_t >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step learning rate must be finite and >= 0, got {lr_t}"
        )));
    }
    for (name, tensor) in params.iter() {
        if let Some(bad) = tensor.grad().iter().find(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient for {name} is not finite ({bad})"
            )));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (name, tensor) in params.iter_mut() {
        let m = state.m.get_mut(name).ok_or_else(|| {
            Error::InvalidArgument(format!("optimizer has no moments for {name}"))
        })?;
        let v = state.v.get_mut(name).expect("moment maps stay in sync");
        let decay = cfg.weight_decay;
        let grads = tensor.grad().to_vec();
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let g = grads[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr_t * (mhat / (vhat.sqrt() + cfg.eps) + decay * data[i]);
        }
        tensor.zero_grad();
    }
    Ok(())
}

/// Learning rate at a global step: linear warmup from 0 to lr over
/// warmup_fraction*total_steps, then cosine decay lr*cos²(pi/2 * p)
/// down to 0 at total_steps.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let warm = cfg.warmup_fraction * total_steps as f64;
    let s = step as f64;
    if s < warm {
        return Ok(cfg.lr * s / warm);
    }
    let progress = (s - warm) / (total_steps as f64 - warm);
    let c = (std::f64::consts::FRAC_PI_2 * progress).cos();
    Ok(cfg.lr * c * c)
}

/// True when the best value seen has not improved by more than
/// `min_delta` for `patience` consecutive entries.
pub fn early_stop(val_history: &[f64], patience: usize, min_delta: f64) -> bool {
    let mut best = match val_history.first() {
        Some(&first) => first,
        None => return false,
    };
    let mut streak = 0;
    for &x in &val_history[1..] {
        if best - x > min_delta {
            best = x;
            streak = 0;
        } else {
            streak += 1;
        }
        if streak >= patience {
            return true;
        }
    }
    false
}

/// Builds the teacher-forced loss graph for one (image, caption)
/// example: encode, decode on ids[..L-1], cross-entropy against
/// ids[1..].
pub fn caption_graph(
    tape: &mut Tape,
    params: &Parameters,
    cfg: &ModelConfig,
    img: &crate::data::ImageTensor,
    ids: &[u32],
) -> Result<NodeId> {
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(
            "caption must hold at least two tokens (BOS and EOS)".into(),
        ));
    }
    let memory = encode_memory(tape, params, cfg, img)?;
    let logits = decode_forward(tape, params, cfg, memory, &ids[..ids.len() - 1])?;
    tape.cross_entropy(logits, &ids[1..], text::PAD)
}

/// Deterministic probe inputs for gradient checking: a pseudo-random
/// image in [-1, 1] and a short caption over ordinary word ids.
pub fn probe_example(cfg: &ModelConfig, seed: u64) -> (crate::data::ImageTensor, Vec<u32>) {
    use rand::Rng as _;
    let mut rng = rng::labeled(seed, "gradcheck-probe");
    let n = 3 * cfg.image_size * cfg.image_size;
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let img = crate::data::ImageTensor {
        size: cfg.image_size,
        data,
    };
    let n_words = (cfg.max_caption_len - 2).clamp(1, 6);
    let mut ids = vec![text::BOS];
    for _ in 0..n_words {
        ids.push(rng.gen_range(4..cfg.vocab_size as u32));
    }
    ids.push(text::EOS);
    (img, ids)
}

/// Forward-only loss of one example.
pub fn caption_loss(
    params: &Parameters,
    cfg: &ModelConfig,
    img: &crate::data::ImageTensor,
    ids: &[u32],
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = caption_graph(&mut tape, params, cfg, img, ids)?;
    tape.scalar_value(loss)
}

/// One epoch's record, serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// History as JSON lines, one epoch per line.
pub fn history_jsonl(history: &[EpochStats]) -> String {
    let mut out = String::new();
    for stats in history {
        out.push_str(&serde_json::to_string(stats).expect("epoch stats serialize"));
        out.push('\n');
    }
    out
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters, or final parameters without a
    /// validation split.
    pub params: Parameters,
    /// Template config with vocab_size set to the realized vocabulary.
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub history: Vec<EpochStats>,
    pub stopped_early: bool,
}

struct Example {
    image: usize,
    ids: Vec<u32>,
}

/// Expands bags into (image, caption) examples, with images loaded and
/// preprocessed once per distinct path.
fn expand_examples(
    manifest: &Manifest,
    bag_range: std::ops::Range<usize>,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    images: &mut Vec<crate::data::ImageTensor>,
    image_index: &mut BTreeMap<String, usize>,
) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    for bag in &manifest.bags[bag_range] {
        for (i, img_rel) in bag.images.iter().enumerate() {
            let path = manifest.image_path(bag, i);
            let key = path.display().to_string();
            let image = match image_index.get(&key) {
                Some(&idx) => idx,
                None => {
                    let raw = decode_ppm(&path)?;
                    let tensor = preprocess_image(&raw, cfg.image_size)?;
                    images.push(tensor);
                    image_index.insert(key, images.len() - 1);
                    images.len() - 1
                }
            };
            let _ = img_rel;
            for caption in &bag.captions {
                let normalized = text::normalize_caption(caption);
                let ids = text::encode(vocab, &normalized, cfg.max_caption_len)?;
                examples.push(Example { image, ids });
            }
        }
    }
    Ok(examples)
}

/// Runs the full training loop over a manifest.
///
/// Bags are split with the last ceil(val_fraction*N) held out for
/// validation; the vocabulary comes from training captions only. Each
/// epoch shuffles examples with a seeded stream, accumulates batch
/// gradients sequentially, averages them, and applies one AdamW step
/// per batch at the scheduled rate. With a validation split the loop
/// may stop early and returns the parameters from the best epoch.
pub fn train(
    manifest: &Manifest,
    model_template: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model_template.validate()?;
    tcfg.validate()?;

    let n_bags = manifest.bags.len();
    let n_val = (tcfg.val_fraction * n_bags as f64).ceil() as usize;
    let n_train = n_bags.saturating_sub(n_val);
    if n_train == 0 {
        return Err(Error::Data(format!(
            "no training bags left after holding out {n_val} of {n_bags} for validation"
        )));
    }

    let train_captions: Vec<String> = manifest.bags[..n_train]
        .iter()
        .flat_map(|b| b.captions.iter())
        .map(|c| text::normalize_caption(c))
        .collect();
    let vocab = Vocabulary::train(&train_captions, model_template.vocab_size)?;
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..model_template.clone()
    };
    cfg.validate()?;

    let mut images = Vec::new();
    let mut image_index = BTreeMap::new();
    let train_set = expand_examples(
        manifest,
        0..n_train,
        &vocab,
        &cfg,
        &mut images,
        &mut image_index,
    )?;
    let val_set = expand_examples(
        manifest,
        n_train..n_bags,
        &vocab,
        &cfg,
        &mut images,
        &mut image_index,
    )?;
    if train_set.is_empty() {
        return Err(Error::Data("no training examples after expansion".into()));
    }

    let mut params = init_params(&cfg, tcfg.seed)?;
    let mut optim = OptimState::new(&params);
    let steps_per_epoch = train_set.len().div_ceil(tcfg.batch_size);
    let total_steps = tcfg.epochs * steps_per_epoch;
    let mut shuffle_rng = rng::labeled(tcfg.seed, "shuffle");

    let mut history = Vec::new();
    let mut val_losses = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<Parameters> = None;
    let mut stopped_early = false;
    let mut global_step = 0usize;

    for epoch in 1..=tcfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            params.zero_grads();
            for &idx in chunk {
                let ex = &train_set[idx];
                let mut tape = Tape::new();
                let loss = caption_graph(&mut tape, &params, &cfg, &images[ex.image], &ex.ids)?;
                epoch_loss += tape.scalar_value(loss)?;
                tape.backward(loss)?;
                tape.write_grads(&mut params)?;
            }
            let scale = 1.0 / chunk.len() as f64;
            for (_, tensor) in params.iter_mut() {
                tensor.grad_mut().iter_mut().for_each(|g| *g *= scale);
            }
            last_lr = lr_at(global_step, total_steps, tcfg)?;
            adamw_step(&mut params, &mut optim, tcfg, last_lr)?;
            global_step += 1;
        }
        let train_loss = epoch_loss / train_set.len() as f64;

        let val_loss = if val_set.is_empty() {
            None
        } else {
            let mut total = 0.0;
            for ex in &val_set {
                total += caption_loss(&params, &cfg, &images[ex.image], &ex.ids)?;
            }
            Some(total / val_set.len() as f64)
        };

        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr: last_lr,
        });

        if let Some(v) = val_loss {
            val_losses.push(v);
            if v < best_val {
                best_val = v;
                best_params = Some(params.clone());
            }
            if early_stop(&val_losses, tcfg.patience, tcfg.min_delta) {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params.unwrap_or(params),
        model: cfg,
        vocab,
        history,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_fixture;
    use crate::tensor::Tensor;

    fn one_param(value: f64) -> Parameters {
        let mut p = Parameters::new();
        p.insert("w", Tensor::new(vec![1], vec![value]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn adamw_zero_gradient_identity_without_decay() {
        let mut params = one_param(0.5);
        let mut state = OptimState::new(&params);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_step(&mut params, &mut state, &cfg, 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0], 0.5);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adamw_zero_gradient_applies_pure_decay() {
        let mut params = one_param(2.0);
        let mut state = OptimState::new(&params);
        let cfg = TrainConfig::default();
        let lr_t = 0.05;
        adamw_step(&mut params, &mut state, &cfg, lr_t).unwrap();
        let want = 2.0 * (1.0 - lr_t * 0.01);
        assert!((params.get("w").unwrap().data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr_over_one_plus_eps() {
        let mut params = one_param(1.0);
        params.get_mut("w").unwrap().grad_mut()[0] = 1.0;
        let mut state = OptimState::new(&params);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let lr_t = 0.001;
        adamw_step(&mut params, &mut state, &cfg, lr_t).unwrap();
        // mhat = vhat = 1 on the first step, so the move is lr/(1+eps).
        let want = 1.0 - lr_t / (1.0 + cfg.eps);
        assert!((params.get("w").unwrap().data()[0] - want).abs() < 1e-12);
        assert_eq!(params.get("w").unwrap().grad()[0], 0.0, "grads must clear");
    }

    #[test]
    fn adamw_rejects_non_finite_gradients_naming_the_tensor() {
        let mut params = one_param(1.0);
        params.get_mut("w").unwrap().grad_mut()[0] = f64::NAN;
        let mut state = OptimState::new(&params);
        let err = adamw_step(&mut params, &mut state, &TrainConfig::default(), 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains('w'), "{err}");
        // The aborted step must leave both value and counter untouched.
        assert_eq!(params.get("w").unwrap().data()[0], 1.0);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn lr_schedule_anchors() {
        let cfg = TrainConfig {
            lr: 0.4,
            warmup_fraction: 0.1,
            ..TrainConfig::default()
        };
        let total = 100;
        assert_eq!(lr_at(0, total, &cfg).unwrap(), 0.0);
        // Warmup covers steps 0..10; step 10 starts decay at exactly lr.
        assert_eq!(lr_at(10, total, &cfg).unwrap(), 0.4);
        assert!((lr_at(5, total, &cfg).unwrap() - 0.2).abs() < 1e-12);
        // Decay midpoint: (55 - 10) / 90 = 1/2, cos²(pi/4) = 1/2.
        assert!((lr_at(55, total, &cfg).unwrap() - 0.2).abs() < 1e-12);
        assert!(lr_at(99, total, &cfg).unwrap() > 0.0);
        assert!(lr_at(100, total, &cfg).is_err());
    }

    #[test]
    fn early_stop_walkthroughs() {
        assert!(!early_stop(&[1.0, 0.9, 0.8], 3, 1e-4));
        assert!(early_stop(&[1.0, 1.0, 1.0, 1.0], 3, 1e-4));
        // Third entry improves by only 5e-7, inside min_delta, so the
        // streak runs from epoch 3 through epoch 5.
        let h = [1.0, 0.9, 0.9000005, 0.91, 0.92];
        assert!(early_stop(&h, 3, 1e-4));
        assert!(!early_stop(&h[..4], 3, 1e-4));
        assert!(!early_stop(&[], 3, 1e-4));
    }

    fn quick_cfgs() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            image_size: 16,
            patch_size: 8,
            d_model: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 16,
            vocab_size: 64,
            max_caption_len: 16,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        (model, train)
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_fixture(dir.path(), 3, 21).unwrap();
        let (model, tcfg) = quick_cfgs();
        let a = train(&manifest, &model, &tcfg).unwrap();
        let b = train(&manifest, &model, &tcfg).unwrap();
        assert_eq!(a.history, b.history);
        for ((na, ta), (_, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(ta.data(), tb.data(), "{na} differs across identical runs");
        }
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|e| e.val_loss.is_none()));
    }

    #[test]
    fn zero_learning_rate_freezes_the_loss() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_fixture(dir.path(), 2, 9).unwrap();
        let (model, mut tcfg) = quick_cfgs();
        tcfg.lr = 0.0;
        let out = train(&manifest, &model, &tcfg).unwrap();
        let first = out.history[0].train_loss;
        for e in &out.history {
            assert!((e.train_loss - first).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_split_records_val_loss_and_can_stop_early() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_fixture(dir.path(), 4, 33).unwrap();
        let (model, mut tcfg) = quick_cfgs();
        tcfg.val_fraction = 0.25;
        tcfg.epochs = 30;
        tcfg.lr = 0.0; // constant val loss trips the patience rule
        tcfg.patience = 2;
        let out = train(&manifest, &model, &tcfg).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.history.len(), 3, "patience 2 stops after epoch 3");
        assert!(out.history.iter().all(|e| e.val_loss.is_some()));
    }

    #[test]
    fn training_needs_a_training_split() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_fixture(dir.path(), 1, 2).unwrap();
        let (model, mut tcfg) = quick_cfgs();
        tcfg.val_fraction = 0.9;
        assert!(train(&manifest, &model, &tcfg).is_err());
    }

    #[test]
    fn history_serializes_one_json_line_per_epoch() {
        let history = vec![
            EpochStats {
                epoch: 1,
                train_loss: 2.5,
                val_loss: None,
                lr: 0.1,
            },
            EpochStats {
                epoch: 2,
                train_loss: 2.0,
                val_loss: Some(2.25),
                lr: 0.05,
            },
        ];
        let text = history_jsonl(&history);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            "{\"epoch\":1,\"train_loss\":2.5,\"val_loss\":null,\"lr\":0.1}"
        );
        let back: EpochStats = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back, history[1]);
    }
}
