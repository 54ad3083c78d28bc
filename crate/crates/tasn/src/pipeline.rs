//! The full desk-scale training loop: a tiny convolutional backbone with an
//! auxiliary attention-branch classifier, trilinear attention, structure and
//! detail sampling, a part/master network pair with shared convolutional
//! weights, the three-loss objective, and master-net-only inference.
//!
//! Gradients never flow through the sampler: the attention branch learns
//! from its own classifier, and the sampled images enter the part and
//! master passes as constants.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{cross_entropy_on_tape, master_loss_on_tape, DistillConfig};
use crate::io::{self, FormatError};
use crate::num::Real;
use crate::sampler::{
    average_attention, bilinear_resize, resize_map, sample, attention_grid, warp, ImageBuffer,
    SampleMode, SamplerConfig,
};
use crate::synth::LabeledSet;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};
use crate::trilinear::{attention_on_tape, AttentionStack, AttentionVariant};

/// Architecture knobs for the two tiny networks.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub classes: usize,
    pub in_channels: usize,
    /// Channels after the backbone's first conv layer.
    pub backbone_hidden: usize,
    /// Attention channels (the backbone's output channels).
    pub attention_channels: usize,
    /// Channels of both part/master conv layers.
    pub net_hidden: usize,
    /// Share the fully connected head between part and master passes.
    pub share_fc: bool,
}

impl ModelConfig {
    pub fn new(classes: usize) -> Self {
        ModelConfig {
            classes,
            in_channels: 1,
            backbone_hidden: 4,
            attention_channels: 8,
            net_hidden: 8,
            share_fc: false,
        }
    }
}

/// All trainable parameters.
///
/// The part and master passes read `pm_conv1`/`pm_conv2` through the same
/// fields, so convolutional weight sharing holds by identity: an update (or a
/// test perturbation) through one pass is observed by the other.
#[derive(Debug, Clone)]
pub struct TasnModel<T> {
    pub cfg: ModelConfig,
    pub bb_conv1: Tensor<T>,
    pub bb_conv2: Tensor<T>,
    pub attn_fc_w: Tensor<T>,
    pub attn_fc_b: Tensor<T>,
    pub pm_conv1: Tensor<T>,
    pub pm_conv2: Tensor<T>,
    pub master_fc_w: Tensor<T>,
    pub master_fc_b: Tensor<T>,
    /// Absent when `share_fc` is set; the part pass then uses the master head.
    pub part_fc_w: Option<Tensor<T>>,
    pub part_fc_b: Option<Tensor<T>>,
}

fn uniform_init<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

impl<T: Real> TasnModel<T> {
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (ci, h1, c, p, n) = (
            cfg.in_channels,
            cfg.backbone_hidden,
            cfg.attention_channels,
            cfg.net_hidden,
            cfg.classes,
        );
        let (part_fc_w, part_fc_b) = if cfg.share_fc {
            (None, None)
        } else {
            (
                Some(uniform_init(vec![p, n], p, rng)),
                Some(Tensor::zeros(vec![1, n])),
            )
        };
        TasnModel {
            bb_conv1: uniform_init(vec![h1, ci, 3, 3], ci * 9, rng),
            bb_conv2: uniform_init(vec![c, h1, 3, 3], h1 * 9, rng),
            attn_fc_w: uniform_init(vec![c, n], c, rng),
            attn_fc_b: Tensor::zeros(vec![1, n]),
            pm_conv1: uniform_init(vec![p, ci, 3, 3], ci * 9, rng),
            pm_conv2: uniform_init(vec![p, p, 3, 3], p * 9, rng),
            master_fc_w: uniform_init(vec![p, n], p, rng),
            master_fc_b: Tensor::zeros(vec![1, n]),
            part_fc_w,
            part_fc_b,
            cfg,
        }
    }

    /// Parameters in checkpoint order.
    pub fn parameters(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            ("bb_conv1", &self.bb_conv1),
            ("bb_conv2", &self.bb_conv2),
            ("attn_fc_w", &self.attn_fc_w),
            ("attn_fc_b", &self.attn_fc_b),
            ("pm_conv1", &self.pm_conv1),
            ("pm_conv2", &self.pm_conv2),
            ("master_fc_w", &self.master_fc_w),
            ("master_fc_b", &self.master_fc_b),
        ];
        if let (Some(w), Some(b)) = (&self.part_fc_w, &self.part_fc_b) {
            out.push(("part_fc_w", w));
            out.push(("part_fc_b", b));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = vec![
            ("bb_conv1", &mut self.bb_conv1),
            ("bb_conv2", &mut self.bb_conv2),
            ("attn_fc_w", &mut self.attn_fc_w),
            ("attn_fc_b", &mut self.attn_fc_b),
            ("pm_conv1", &mut self.pm_conv1),
            ("pm_conv2", &mut self.pm_conv2),
            ("master_fc_w", &mut self.master_fc_w),
            ("master_fc_b", &mut self.master_fc_b),
        ];
        if let (Some(w), Some(b)) = (self.part_fc_w.as_mut(), self.part_fc_b.as_mut()) {
            out.push(("part_fc_w", w));
            out.push(("part_fc_b", b));
        }
        out
    }

    pub fn save(&self, path: &Path) -> std::result::Result<(), FormatError> {
        let params: Vec<(String, Tensor<T>)> = self
            .parameters()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        io::save_checkpoint(path, &params)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, FormatError> {
        let params = io::load_checkpoint::<T>(path)?;
        let get = |name: &str| -> std::result::Result<Tensor<T>, FormatError> {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| FormatError::Corrupt(format!("checkpoint missing {name}")))
        };
        let bb_conv1 = get("bb_conv1")?;
        let bb_conv2 = get("bb_conv2")?;
        let attn_fc_w = get("attn_fc_w")?;
        let pm_conv1 = get("pm_conv1")?;
        let share_fc = !params.iter().any(|(n, _)| n == "part_fc_w");
        let cfg = ModelConfig {
            classes: attn_fc_w.shape()[1],
            in_channels: bb_conv1.shape()[1],
            backbone_hidden: bb_conv1.shape()[0],
            attention_channels: bb_conv2.shape()[0],
            net_hidden: pm_conv1.shape()[0],
            share_fc,
        };
        Ok(TasnModel {
            bb_conv1,
            bb_conv2,
            attn_fc_w,
            attn_fc_b: get("attn_fc_b")?,
            pm_conv1,
            pm_conv2: get("pm_conv2")?,
            master_fc_w: get("master_fc_w")?,
            master_fc_b: get("master_fc_b")?,
            part_fc_w: if share_fc { None } else { Some(get("part_fc_w")?) },
            part_fc_b: if share_fc { None } else { Some(get("part_fc_b")?) },
            cfg,
        })
    }
}

/// Training hyperparameters. The seed fully determines the run.
#[derive(Debug, Clone)]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub learning_rate: T,
    pub batch_size: usize,
    pub distill: DistillConfig<T>,
    pub sampler: SamplerConfig<T>,
    pub variant: AttentionVariant,
    pub attention_loss_weight: T,
    /// Global-norm gradient clip applied to the averaged batch gradient;
    /// zero disables clipping.
    pub grad_clip: T,
    /// Disable to train the master branch alone (no part pass, no soft loss).
    pub detail_enabled: bool,
    pub seed: u64,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: T::from_f64_lossy(0.5),
            batch_size: 16,
            distill: DistillConfig::default(),
            sampler: SamplerConfig::new(16, 16),
            variant: AttentionVariant::SnRn,
            attention_loss_weight: T::one(),
            grad_clip: T::from_f64_lossy(5.0),
            detail_enabled: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

pub fn image_to_tensor<T: Real>(img: &ImageBuffer<T>) -> Tensor<T> {
    Tensor::new(
        vec![img.channels(), img.height(), img.width()],
        img.data().to_vec(),
    )
    .expect("image shape")
}

struct TapedModel {
    bb_conv1: Var,
    bb_conv2: Var,
    attn_fc_w: Var,
    attn_fc_b: Var,
    pm_conv1: Var,
    pm_conv2: Var,
    master_fc_w: Var,
    master_fc_b: Var,
    part_fc_w: Var,
    part_fc_b: Var,
}

fn register<T: Real>(tape: &Tape<T>, model: &TasnModel<T>) -> TapedModel {
    let master_fc_w = tape.leaf(model.master_fc_w.clone());
    let master_fc_b = tape.leaf(model.master_fc_b.clone());
    let (part_fc_w, part_fc_b) = match (&model.part_fc_w, &model.part_fc_b) {
        (Some(w), Some(b)) => (tape.leaf(w.clone()), tape.leaf(b.clone())),
        _ => (master_fc_w, master_fc_b),
    };
    TapedModel {
        bb_conv1: tape.leaf(model.bb_conv1.clone()),
        bb_conv2: tape.leaf(model.bb_conv2.clone()),
        attn_fc_w: tape.leaf(model.attn_fc_w.clone()),
        attn_fc_b: tape.leaf(model.attn_fc_b.clone()),
        pm_conv1: tape.leaf(model.pm_conv1.clone()),
        pm_conv2: tape.leaf(model.pm_conv2.clone()),
        master_fc_w,
        master_fc_b,
        part_fc_w,
        part_fc_b,
    }
}

impl TapedModel {
    fn grad_list<T: Real>(
        &self,
        grads: &crate::tape::Gradients<T>,
        share_fc: bool,
    ) -> Vec<Tensor<T>> {
        let mut vars = vec![
            self.bb_conv1,
            self.bb_conv2,
            self.attn_fc_w,
            self.attn_fc_b,
            self.pm_conv1,
            self.pm_conv2,
            self.master_fc_w,
            self.master_fc_b,
        ];
        if !share_fc {
            vars.push(self.part_fc_w);
            vars.push(self.part_fc_b);
        }
        vars.iter()
            .map(|&v| grads.get(v).expect("leaf gradient").clone())
            .collect()
    }
}

/// Backbone: conv(3x3, stride 1) + ReLU, conv(3x3, stride 2) + ReLU.
fn backbone_features<T: Real>(tape: &Tape<T>, p: &TapedModel, image: Var) -> Result<Var> {
    let h = tape.conv2d(image, p.bb_conv1, 1)?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, p.bb_conv2, 2)?;
    tape.relu(h)
}

/// Global average pool + linear head over `[c, h, w]` features.
fn classifier_head<T: Real>(tape: &Tape<T>, feats: Var, w: Var, b: Var) -> Result<Var> {
    let pooled = tape.global_avg_pool(feats)?;
    let c = tape.shape_of(pooled)[0];
    let row = tape.reshape(pooled, vec![1, c])?;
    let z = tape.matmul(row, w)?;
    tape.add(z, b)
}

/// Part/master network: two convs + ReLU + pooled linear head.
fn small_net_logits<T: Real>(
    tape: &Tape<T>,
    conv1: Var,
    conv2: Var,
    fc_w: Var,
    fc_b: Var,
    image: Var,
) -> Result<Var> {
    let h = tape.conv2d(image, conv1, 1)?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, conv2, 2)?;
    let h = tape.relu(h)?;
    classifier_head(tape, h, fc_w, fc_b)
}

/// Forward the backbone and attention off any training tape; used by
/// inference and by the sampling phase of training.
pub fn forward_attention<T: Real>(
    model: &TasnModel<T>,
    image: &ImageBuffer<T>,
    variant: AttentionVariant,
) -> Result<AttentionStack<T>> {
    let tape = Tape::new();
    let p = register(&tape, model);
    let img = tape.constant(image_to_tensor(image));
    let feats = backbone_features(&tape, &p, img)?;
    let shape = tape.shape_of(feats);
    let (c, fh, fw) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(feats, vec![c, fh * fw])?;
    let m = attention_on_tape(&tape, flat, variant)?;
    AttentionStack::new(tape.value(m).reshaped(vec![c, fh, fw])?)
}

/// Losses of one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub total: f64,
    pub master: f64,
    pub part: f64,
    pub attention: f64,
}

/// One SGD step over a batch. Per image: backbone features feed the
/// auxiliary attention classifier and the trilinear attention maps; the
/// sampler builds the structure- and detail-preserved images (no gradient
/// path); the part pass yields teacher logits and its own CE; the master
/// pass is trained with classification plus distillation loss. Batch
/// gradients are averaged in index order and applied as plain SGD.
pub fn train_step<T: Real>(
    model: &mut TasnModel<T>,
    images: &[&ImageBuffer<T>],
    labels: &[usize],
    cfg: &TrainConfig<T>,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    assert_eq!(images.len(), labels.len());
    let n = images.len();
    if n == 0 {
        return Err(TensorError::Usage("empty batch".into()));
    }
    let share_fc = model.cfg.share_fc;
    let inv = 1.0 / n as f64;
    let mut grad_acc: Option<Vec<Tensor<T>>> = None;
    let mut losses = StepLosses {
        total: 0.0,
        master: 0.0,
        part: 0.0,
        attention: 0.0,
    };

    for (img, &label) in images.iter().zip(labels) {
        let tape = Tape::new();
        let p = register(&tape, model);
        let img_var = tape.constant(image_to_tensor(img));
        let feats = backbone_features(&tape, &p, img_var)?;

        // auxiliary attention-branch classifier
        let attn_logits = classifier_head(&tape, feats, p.attn_fc_w, p.attn_fc_b)?;
        let attn_loss = cross_entropy_on_tape(&tape, attn_logits, label)?;

        // trilinear attention participates in the forward pass; the sampler
        // consumes its values only, so no gradient flows back through it
        let shape = tape.shape_of(feats);
        let (c, fh, fw) = (shape[0], shape[1], shape[2]);
        let flat = tape.reshape(feats, vec![c, fh * fw])?;
        let m = attention_on_tape(&tape, flat, cfg.variant)?;
        let stack = AttentionStack::new(tape.value(m).reshaped(vec![c, fh, fw])?)?;

        let (structure_img, _) = sample(img, &stack, SampleMode::Structure, &cfg.sampler, rng)?;
        let s_var = tape.constant(image_to_tensor(&structure_img));
        let z_s = small_net_logits(&tape, p.pm_conv1, p.pm_conv2, p.master_fc_w, p.master_fc_b, s_var)?;

        let (master_term, part_term) = if cfg.detail_enabled {
            let (detail_img, _) = sample(img, &stack, SampleMode::Detail, &cfg.sampler, rng)?;
            let d_var = tape.constant(image_to_tensor(&detail_img));
            let z_d =
                small_net_logits(&tape, p.pm_conv1, p.pm_conv2, p.part_fc_w, p.part_fc_b, d_var)?;
            let part_loss = cross_entropy_on_tape(&tape, z_d, label)?;
            let master = master_loss_on_tape(&tape, z_s, z_d, label, &cfg.distill)?;
            (master, Some(part_loss))
        } else {
            (cross_entropy_on_tape(&tape, z_s, label)?, None)
        };

        let weighted_attn = tape.scale(attn_loss, cfg.attention_loss_weight)?;
        let mut total = tape.add(master_term, weighted_attn)?;
        if let Some(part) = part_term {
            total = tape.add(total, part)?;
            losses.part += tape.value(part).item()?.to_f64_lossy() * inv;
        }
        losses.master += tape.value(master_term).item()?.to_f64_lossy() * inv;
        losses.attention += tape.value(attn_loss).item()?.to_f64_lossy() * inv;
        losses.total += tape.value(total).item()?.to_f64_lossy() * inv;

        let grads = tape.grad(total)?;
        let list = p.grad_list(&grads, share_fc);
        match &mut grad_acc {
            None => grad_acc = Some(list),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&list) {
                    for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }

    let grad_acc = grad_acc.expect("non-empty batch");
    let inv_n = T::one() / T::from_usize_lossy(n);
    // clip the averaged batch gradient by global norm; one bad batch must
    // not be able to destroy the run
    let mut sq = T::zero();
    for grad in &grad_acc {
        for &g in grad.data() {
            sq += (g * inv_n) * (g * inv_n);
        }
    }
    let norm = sq.sqrt();
    let clip = if cfg.grad_clip > T::zero() && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        T::one()
    };
    let scale = cfg.learning_rate * inv_n * clip;
    for ((_, param), grad) in model.parameters_mut().into_iter().zip(&grad_acc) {
        for (w, &g) in param.data_mut().iter_mut().zip(grad.data()) {
            *w -= scale * g;
        }
    }
    Ok(losses)
}

/// Master-net logits for one image that has already been sampled to the
/// network's input size.
fn master_logits<T: Real>(model: &TasnModel<T>, input: &ImageBuffer<T>) -> Result<Vec<T>> {
    let tape = Tape::new();
    let p = register(&tape, model);
    let v = tape.constant(image_to_tensor(input));
    let z = small_net_logits(&tape, p.pm_conv1, p.pm_conv2, p.master_fc_w, p.master_fc_b, v)?;
    Ok(tape.value(z).data().to_vec())
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Master-net-only inference: backbone, average attention, structure
/// sampling, master pass. The detail branch never runs and nothing draws
/// from any RNG, so evaluation is deterministic.
pub fn evaluate<T: Real>(
    model: &TasnModel<T>,
    set: &LabeledSet<T>,
    cfg: &TrainConfig<T>,
) -> Result<f64> {
    let mut correct = 0usize;
    for (img, &label) in set.images.iter().zip(&set.labels) {
        let stack = forward_attention(model, img, cfg.variant)?;
        let map = average_attention(&stack);
        let map = resize_map(&map, img.height(), img.width());
        let grid = attention_grid(&map, &cfg.sampler)?;
        let structure_img = warp(img, &grid)?;
        let z = master_logits(model, &structure_img)?;
        if argmax(&z) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Train a TASN model, reporting per-epoch metrics through `on_epoch`.
pub fn train<T: Real>(
    model: &mut TasnModel<T>,
    train_set: &LabeledSet<T>,
    test_set: &LabeledSet<T>,
    cfg: &TrainConfig<T>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&ImageBuffer<T>> =
                chunk.iter().map(|&i| &train_set.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let l = train_step(model, &images, &labels, cfg, &mut rng)?;
            loss_sum += l.total;
            batches += 1;
        }
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_accuracy: evaluate(model, test_set, cfg)?,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(metrics)
}

/// Fresh model + full training run, seeded end to end.
pub fn run_tasn<T: Real>(
    train_set: &LabeledSet<T>,
    test_set: &LabeledSet<T>,
    model_cfg: ModelConfig,
    cfg: &TrainConfig<T>,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(TasnModel<T>, Vec<EpochMetrics>)> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TasnModel::new(model_cfg, &mut init_rng);
    let metrics = train(&mut model, train_set, test_set, cfg, on_epoch)?;
    Ok((model, metrics))
}

/// The uniform-downsample control: the same part/master architecture trained
/// with plain cross entropy on bilinearly resized images. No attention, no
/// distillation.
#[derive(Debug, Clone)]
pub struct BaselineModel<T> {
    pub conv1: Tensor<T>,
    pub conv2: Tensor<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
}

impl<T: Real> BaselineModel<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (ci, p, n) = (cfg.in_channels, cfg.net_hidden, cfg.classes);
        BaselineModel {
            conv1: uniform_init(vec![p, ci, 3, 3], ci * 9, rng),
            conv2: uniform_init(vec![p, p, 3, 3], p * 9, rng),
            fc_w: uniform_init(vec![p, n], p, rng),
            fc_b: Tensor::zeros(vec![1, n]),
        }
    }

    pub fn logits(&self, input: &ImageBuffer<T>) -> Result<Vec<T>> {
        let tape = Tape::new();
        let c1 = tape.constant(self.conv1.clone());
        let c2 = tape.constant(self.conv2.clone());
        let w = tape.constant(self.fc_w.clone());
        let b = tape.constant(self.fc_b.clone());
        let v = tape.constant(image_to_tensor(input));
        let z = small_net_logits(&tape, c1, c2, w, b, v)?;
        Ok(tape.value(z).data().to_vec())
    }
}

/// Train the uniform-sampler baseline under the same budget (epochs, batch
/// size, learning rate, input size) as the TASN run.
pub fn run_baseline<T: Real>(
    train_set: &LabeledSet<T>,
    test_set: &LabeledSet<T>,
    model_cfg: ModelConfig,
    cfg: &TrainConfig<T>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(BaselineModel<T>, Vec<EpochMetrics>)> {
    let (oh, ow) = (cfg.sampler.out_h, cfg.sampler.out_w);
    let resize_all = |set: &LabeledSet<T>| -> Result<Vec<ImageBuffer<T>>> {
        set.images.iter().map(|i| bilinear_resize(i, oh, ow)).collect()
    };
    let train_small = resize_all(train_set)?;
    let test_small = resize_all(test_set)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = BaselineModel::new(&model_cfg, &mut init_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_small.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let c1 = tape.leaf(model.conv1.clone());
            let c2 = tape.leaf(model.conv2.clone());
            let w = tape.leaf(model.fc_w.clone());
            let b = tape.leaf(model.fc_b.clone());
            let mut total: Option<Var> = None;
            for &i in chunk {
                let v = tape.constant(image_to_tensor(&train_small[i]));
                let z = small_net_logits(&tape, c1, c2, w, b, v)?;
                let ce = cross_entropy_on_tape(&tape, z, train_set.labels[i])?;
                total = Some(match total {
                    None => ce,
                    Some(t) => tape.add(t, ce)?,
                });
            }
            let total = tape.scale(
                total.expect("non-empty batch"),
                T::one() / T::from_usize_lossy(chunk.len()),
            )?;
            loss_sum += tape.value(total).item()?.to_f64_lossy();
            batches += 1;
            let grads = tape.grad(total)?;
            let vars = [c1, c2, w, b];
            let mut sq = T::zero();
            for &v in &vars {
                for &g in grads.get(v).expect("leaf gradient").data() {
                    sq += g * g;
                }
            }
            let norm = sq.sqrt();
            let clip = if cfg.grad_clip > T::zero() && norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                T::one()
            };
            for (param, var) in [
                (&mut model.conv1, c1),
                (&mut model.conv2, c2),
                (&mut model.fc_w, w),
                (&mut model.fc_b, b),
            ] {
                let g = grads.get(var).expect("leaf gradient");
                for (x, &y) in param.data_mut().iter_mut().zip(g.data()) {
                    *x -= cfg.learning_rate * clip * y;
                }
            }
        }
        let mut correct = 0usize;
        for (img, &label) in test_small.iter().zip(&test_set.labels) {
            if argmax(&model.logits(img)?) == label {
                correct += 1;
            }
        }
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_accuracy: correct as f64 / test_small.len() as f64,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok((model, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthSpec};

    fn tiny_data(per_class: usize, test_per_class: usize) -> (LabeledSet<f64>, LabeledSet<f64>) {
        let spec = SynthSpec {
            classes: 4,
            image_size: 32,
            train_per_class: per_class,
            test_per_class,
            ..Default::default()
        };
        generate_dataset(&spec).unwrap()
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig<f64> {
        TrainConfig {
            epochs,
            ..Default::default()
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = TasnModel::<f64>::new(ModelConfig::new(4), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = TasnModel::<f64>::load(&path).unwrap();
        assert_eq!(back.cfg.classes, 4);
        assert!(!back.cfg.share_fc);
        let img = ImageBuffer::new(16, 16, 1, (0..256).map(|i| i as f64 / 255.0).collect()).unwrap();
        // checkpoint payloads are single precision, so logits agree to f32 accuracy
        for (a, b) in master_logits(&model, &img)
            .unwrap()
            .iter()
            .zip(master_logits(&back, &img).unwrap())
        {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn shared_fc_halves_the_head_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = ModelConfig::new(4);
        cfg.share_fc = true;
        let model = TasnModel::<f64>::new(cfg, &mut rng);
        assert_eq!(model.parameters().len(), 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        assert!(TasnModel::<f64>::load(&path).unwrap().cfg.share_fc);
    }

    #[test]
    fn conv_weight_sharing_holds_by_identity() {
        // perturbing the shared conv weights moves part and master logits
        // identically when fed the same input through either head path
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = ModelConfig::new(4);
        cfg.share_fc = true;
        let mut model = TasnModel::<f64>::new(cfg, &mut rng);
        let img = ImageBuffer::new(16, 16, 1, vec![0.5; 256]).unwrap();
        let before = master_logits(&model, &img).unwrap();
        model.pm_conv1.data_mut()[0] += 0.25;
        let after = master_logits(&model, &img).unwrap();
        assert_ne!(before, after);
        // with a shared head, the part pass is literally the master pass
        let tape = Tape::new();
        let p = register(&tape, &model);
        assert_eq!(p.part_fc_w, p.master_fc_w);
        assert_eq!(p.part_fc_b, p.master_fc_b);
    }

    #[test]
    fn untrained_model_is_chance_level() {
        let (_, test) = tiny_data(1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = TasnModel::<f64>::new(ModelConfig::new(4), &mut rng);
        let cfg = tiny_cfg(1);
        let acc = evaluate(&model, &test, &cfg).unwrap();
        assert!(acc <= 0.5, "untrained accuracy {acc} suspiciously high");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (_, test) = tiny_data(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = TasnModel::<f64>::new(ModelConfig::new(4), &mut rng);
        let cfg = tiny_cfg(1);
        let a = evaluate(&model, &test, &cfg).unwrap();
        let b = evaluate(&model, &test, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_step_is_bitwise_reproducible() {
        let (train, _) = tiny_data(2, 1);
        let cfg = tiny_cfg(1);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut model = TasnModel::<f64>::new(ModelConfig::new(4), &mut rng);
            let images: Vec<&ImageBuffer<f64>> = train.images.iter().take(4).collect();
            let mut step_rng = ChaCha8Rng::seed_from_u64(8);
            train_step(&mut model, &images, &train.labels[..4], &cfg, &mut step_rng).unwrap();
            model
        };
        let a = run();
        let b = run();
        for ((_, x), (_, y)) in a.parameters().into_iter().zip(b.parameters()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn training_memorizes_a_small_batch() {
        let (train, _) = tiny_data(2, 1);
        // plain CE objective: the soft loss has an irreducible teacher-entropy
        // floor that would mask the drop this test measures
        let mut cfg = tiny_cfg(1);
        cfg.distill.lambda = 0.0;
        cfg.learning_rate = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = TasnModel::<f64>::new(ModelConfig::new(4), &mut rng);
        let images: Vec<&ImageBuffer<f64>> = train.images.iter().collect();
        let mut step_rng = ChaCha8Rng::seed_from_u64(2);
        let first = train_step(&mut model, &images, &train.labels, &cfg, &mut step_rng).unwrap();
        let mut last = first;
        for _ in 0..299 {
            last = train_step(&mut model, &images, &train.labels, &cfg, &mut step_rng).unwrap();
        }
        assert!(
            last.total < 0.5 * first.total,
            "loss failed to halve: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn detail_disabled_trains_master_alone() {
        let (train, _) = tiny_data(1, 1);
        let mut cfg = tiny_cfg(1);
        cfg.detail_enabled = false;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = TasnModel::<f64>::new(ModelConfig::new(4), &mut rng);
        let images: Vec<&ImageBuffer<f64>> = train.images.iter().collect();
        let mut step_rng = ChaCha8Rng::seed_from_u64(2);
        let l = train_step(&mut model, &images, &train.labels, &cfg, &mut step_rng).unwrap();
        assert_eq!(l.part, 0.0);
        assert!(l.total.is_finite() && l.total > 0.0);
    }
}
