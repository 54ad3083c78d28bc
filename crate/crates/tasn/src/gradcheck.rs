//! Finite-difference verification of every gradient rule.
//!
//! Each check rebuilds the forward pass from scratch for every perturbed
//! input, so the central differences are independent of the backward-pass
//! code they validate. Runs in `f64`; the step is 1e-5 with a 1e-7 absolute
//! floor on the comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{master_loss_on_tape, DistillConfig};
use crate::pipeline::{self, ModelConfig, TasnModel, TrainConfig};
use crate::sampler::{sample, SampleMode};
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor};

const STEP: f64 = 1e-5;
const ABS_FLOOR: f64 = 1e-7;

/// Outcome of one finite-difference check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} (max rel err {:.2e}, tol {:.0e}, {} trials)",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.trials
        )
    }
}

/// Compare analytic gradients of `build` against central differences over
/// every element of every input.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&tape, &vars)?;
        tape.value(out).item()
    };

    // analytic
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars)?;
    let grads = tape.grad(out)?;

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ti]).expect("leaf gradient").clone();
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            let mut fd_at = |h: f64| -> Result<f64> {
                work[ti].data_mut()[ei] = orig + h;
                let plus = eval(&work)?;
                work[ti].data_mut()[ei] = orig - h;
                let minus = eval(&work)?;
                work[ti].data_mut()[ei] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let mut fd = fd_at(STEP)?;
            let a = analytic.data()[ei];
            let mut err = (a - fd).abs();
            let mut denom = a.abs().max(fd.abs());
            if err > ABS_FLOOR && err > 1e-5 * denom {
                // central differences are only valid where the objective is
                // smooth; a ReLU kink inside the step window shows up as the
                // half-step estimate disagreeing with the full-step one
                let fd_half = fd_at(STEP / 2.0)?;
                if (fd - fd_half).abs() > 1e-4 * fd.abs().max(fd_half.abs()) + ABS_FLOOR {
                    continue;
                }
                fd = fd_half;
                err = (a - fd).abs();
                denom = a.abs().max(fd.abs());
            }
            if err > ABS_FLOOR {
                max_rel = max_rel.max(if denom > 0.0 { err / denom } else { f64::INFINITY });
            }
        }
    }
    Ok(max_rel)
}

fn run_check(
    name: &str,
    trials: usize,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
    mut case: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> CheckResult {
    let mut max_rel = 0.0f64;
    let mut passed = true;
    for _ in 0..trials {
        match case(rng) {
            Ok(r) => max_rel = max_rel.max(r),
            Err(_) => {
                passed = false;
                break;
            }
        }
    }
    CheckResult {
        name: name.to_string(),
        trials,
        max_rel_err: max_rel,
        tolerance,
        passed: passed && max_rel < tolerance,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Scalarize an arbitrary output by a fixed random weighting so every output
/// element contributes to the checked gradient.
fn weighted_sum(tape: &Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.reduce_sum(prod)
}

/// The frozen-sampling three-loss objective: attention is recomputed on the
/// tape, but the sampled images are fixed constants (the sampler itself has
/// no gradient path by design).
fn full_objective_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model_cfg = ModelConfig {
        classes: 4,
        in_channels: 1,
        backbone_hidden: 2,
        attention_channels: 4,
        net_hidden: 4,
        share_fc: false,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let model = TasnModel::<f64>::new(model_cfg.clone(), &mut init_rng);
    let mut cfg = TrainConfig::<f64>::default();
    cfg.sampler.out_h = 8;
    cfg.sampler.out_w = 8;

    // two images, 8x8
    let batch: Vec<(crate::sampler::ImageBuffer<f64>, usize)> = (0..2)
        .map(|_| {
            let data = (0..64).map(|_| init_rng.gen::<f64>()).collect();
            (
                crate::sampler::ImageBuffer::new(8, 8, 1, data).unwrap(),
                init_rng.gen_range(0..4),
            )
        })
        .collect();

    // phase A: sample once and freeze the sampled images; also freeze the
    // teacher logits used for soft targets, because the tape detaches them
    // and finite differences must see the same function
    let mut frozen = Vec::new();
    for (img, label) in &batch {
        let stack = pipeline::forward_attention(&model, img, cfg.variant)?;
        let (s_img, _) = sample(img, &stack, SampleMode::Structure, &cfg.sampler, &mut init_rng)?;
        let (d_img, _) = sample(img, &stack, SampleMode::Detail, &cfg.sampler, &mut init_rng)?;
        let z_d_frozen = teacher_logits(&model, &d_img)?;
        frozen.push((img.clone(), s_img, d_img, z_d_frozen, *label));
    }

    let inputs: Vec<Tensor<f64>> = model
        .parameters()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let frozen_ref = &frozen;
    let cfg_ref = &cfg;
    let build = move |tape: &Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut total: Option<Var> = None;
        for (img, s_img, d_img, z_d_frozen, label) in frozen_ref {
            let loss =
                frozen_step_loss(tape, vars, img, s_img, d_img, z_d_frozen, *label, cfg_ref)?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss)?,
            });
        }
        tape.scale(total.unwrap(), 0.5)
    };
    check_gradients(&inputs, &build)
}

/// Teacher logits at the base parameters, used as frozen soft targets.
fn teacher_logits(model: &TasnModel<f64>, d_img: &crate::sampler::ImageBuffer<f64>) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let pm1 = tape.constant(model.pm_conv1.clone());
    let pm2 = tape.constant(model.pm_conv2.clone());
    let w = tape.constant(model.part_fc_w.clone().expect("separate part head"));
    let b = tape.constant(model.part_fc_b.clone().expect("separate part head"));
    let v = tape.constant(pipeline::image_to_tensor(d_img));
    let h = tape.conv2d(v, pm1, 1)?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, pm2, 2)?;
    let h = tape.relu(h)?;
    let pooled = tape.global_avg_pool(h)?;
    let c = tape.shape_of(pooled)[0];
    let row = tape.reshape(pooled, vec![1, c])?;
    let z = tape.matmul(row, w)?;
    let z = tape.add(z, b)?;
    Ok(tape.value(z).clone())
}

#[allow(clippy::too_many_arguments)]
fn frozen_step_loss(
    tape: &Tape<f64>,
    vars: &[Var],
    img: &crate::sampler::ImageBuffer<f64>,
    s_img: &crate::sampler::ImageBuffer<f64>,
    d_img: &crate::sampler::ImageBuffer<f64>,
    z_d_frozen: &Tensor<f64>,
    label: usize,
    cfg: &TrainConfig<f64>,
) -> Result<Var> {
    use crate::distill::cross_entropy_on_tape;
    use crate::trilinear::attention_on_tape;
    // vars order mirrors TasnModel::parameters()
    let (bb1, bb2, attn_w, attn_b) = (vars[0], vars[1], vars[2], vars[3]);
    let (pm1, pm2, master_w, master_b) = (vars[4], vars[5], vars[6], vars[7]);
    let (part_w, part_b) = (vars[8], vars[9]);

    let img_var = tape.constant(pipeline::image_to_tensor(img));
    let h = tape.conv2d(img_var, bb1, 1)?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, bb2, 2)?;
    let feats = tape.relu(h)?;

    let pooled = tape.global_avg_pool(feats)?;
    let c = tape.shape_of(pooled)[0];
    let row = tape.reshape(pooled, vec![1, c])?;
    let z = tape.matmul(row, attn_w)?;
    let attn_logits = tape.add(z, attn_b)?;
    let attn_loss = cross_entropy_on_tape(tape, attn_logits, label)?;

    let shape = tape.shape_of(feats);
    let flat = tape.reshape(feats, vec![shape[0], shape[1] * shape[2]])?;
    let _m = attention_on_tape(tape, flat, cfg.variant)?;

    let small = |input: &crate::sampler::ImageBuffer<f64>, w: Var, b: Var| -> Result<Var> {
        let v = tape.constant(pipeline::image_to_tensor(input));
        let h = tape.conv2d(v, pm1, 1)?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, pm2, 2)?;
        let h = tape.relu(h)?;
        let pooled = tape.global_avg_pool(h)?;
        let c = tape.shape_of(pooled)[0];
        let row = tape.reshape(pooled, vec![1, c])?;
        let z = tape.matmul(row, w)?;
        tape.add(z, b)
    };
    let z_s = small(s_img, master_w, master_b)?;
    let z_d = small(d_img, part_w, part_b)?;
    let part_loss = cross_entropy_on_tape(tape, z_d, label)?;
    // soft targets come from the frozen teacher logits: the live tape
    // detaches them, so the FD objective must hold them fixed too
    let z_d_const = tape.constant(z_d_frozen.clone());
    let master = master_loss_on_tape(tape, z_s, z_d_const, label, &cfg.distill)?;

    let weighted_attn = tape.scale(attn_loss, cfg.attention_loss_weight)?;
    let t = tape.add(master, weighted_attn)?;
    tape.add(t, part_loss)
}

/// Run the whole finite-difference suite. Elementwise operations are held to
/// relative error 1e-4, structured operations and losses to 1e-4, and the
/// full three-loss objective to 1e-3.
pub fn run_full_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let elementwise_tol = 1e-4;
    let op_tol = 1e-4;

    results.push(run_check("matmul", 100, op_tol, &mut rng, |rng| {
        let a = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
        let b = rand_tensor(rng, vec![4, 2], -2.0, 2.0);
        let w = rand_tensor(rng, vec![3, 2], -1.0, 1.0);
        check_gradients(&[a, b], &move |tape, vars| {
            let m = tape.matmul(vars[0], vars[1])?;
            weighted_sum(tape, m, &w)
        })
    }));

    results.push(run_check("transpose", 100, elementwise_tol, &mut rng, |rng| {
        let a = rand_tensor(rng, vec![3, 5], -2.0, 2.0);
        let w = rand_tensor(rng, vec![5, 3], -1.0, 1.0);
        check_gradients(&[a], &move |tape, vars| {
            let t = tape.transpose(vars[0])?;
            weighted_sum(tape, t, &w)
        })
    }));

    results.push(run_check("softmax_rows", 100, op_tol, &mut rng, |rng| {
        let temp = [0.5, 1.0, 10.0][rng.gen_range(0..3)];
        let a = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
        let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        check_gradients(&[a], &move |tape, vars| {
            let s = tape.softmax_rows(vars[0], temp)?;
            weighted_sum(tape, s, &w)
        })
    }));

    for stride in [1usize, 2] {
        results.push(run_check(
            &format!("conv2d_stride{stride}"),
            50,
            op_tol,
            &mut rng,
            |rng| {
                let input = rand_tensor(rng, vec![2, 5, 5], -1.0, 1.0);
                let kernels = rand_tensor(rng, vec![3, 2, 3, 3], -1.0, 1.0);
                let oh = (5 - 1) / stride + 1;
                let w = rand_tensor(rng, vec![3, oh, oh], -1.0, 1.0);
                check_gradients(&[input, kernels], &move |tape, vars| {
                    let c = tape.conv2d(vars[0], vars[1], stride)?;
                    weighted_sum(tape, c, &w)
                })
            },
        ));
    }

    results.push(run_check("relu", 100, elementwise_tol, &mut rng, |rng| {
        // keep inputs away from the kink at zero
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..2.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let a = Tensor::new(vec![3, 4], data).unwrap();
        let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        check_gradients(&[a], &move |tape, vars| {
            let r = tape.relu(vars[0])?;
            weighted_sum(tape, r, &w)
        })
    }));

    results.push(run_check("add_mul_scale", 100, elementwise_tol, &mut rng, |rng| {
        let a = rand_tensor(rng, vec![2, 3], -2.0, 2.0);
        let b = rand_tensor(rng, vec![2, 3], -2.0, 2.0);
        let w = rand_tensor(rng, vec![2, 3], -1.0, 1.0);
        check_gradients(&[a, b], &move |tape, vars| {
            let s = tape.add(vars[0], vars[1])?;
            let m = tape.mul(s, vars[0])?;
            let sc = tape.scale(m, 1.7)?;
            weighted_sum(tape, sc, &w)
        })
    }));

    results.push(run_check("log", 100, elementwise_tol, &mut rng, |rng| {
        let a = rand_tensor(rng, vec![2, 3], 0.2, 3.0);
        let w = rand_tensor(rng, vec![2, 3], -1.0, 1.0);
        check_gradients(&[a], &move |tape, vars| {
            let l = tape.log(vars[0])?;
            weighted_sum(tape, l, &w)
        })
    }));

    results.push(run_check(
        "global_avg_pool_reshape",
        100,
        elementwise_tol,
        &mut rng,
        |rng| {
            let a = rand_tensor(rng, vec![3, 2, 2], -2.0, 2.0);
            let w = rand_tensor(rng, vec![1, 3], -1.0, 1.0);
            check_gradients(&[a], &move |tape, vars| {
                let p = tape.global_avg_pool(vars[0])?;
                let r = tape.reshape(p, vec![1, 3])?;
                weighted_sum(tape, r, &w)
            })
        },
    ));

    // the teacher is detached on the tape, so only the student logits are
    // differentiable inputs here; the teacher enters as a constant
    results.push(run_check("soft_target_ce", 100, op_tol, &mut rng, |rng| {
        let z_s = rand_tensor(rng, vec![1, 5], -2.0, 2.0);
        let z_d = rand_tensor(rng, vec![1, 5], -2.0, 2.0);
        let cfg = DistillConfig::<f64>::default();
        let label = rng.gen_range(0..5);
        check_gradients(&[z_s], &move |tape, vars| {
            let teacher = tape.constant(z_d.clone());
            master_loss_on_tape(tape, vars[0], teacher, label, &cfg)
        })
    }));

    results.push(run_check("full_objective", 100, 1e-3, &mut rng, |rng| {
        full_objective_check(rng)
    }));

    results
}
