use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tasn::pipeline::{self, ModelConfig, TasnModel, TrainConfig};
use tasn::sampler::{sample, Decomposition, SampleMode, SamplerConfig, SelectionStrategy};
use tasn::synth::{self, SynthSpec};
use tasn::trilinear::{attention, AttentionStack, AttentionVariant, FeatureMaps};
use tasn::{gradcheck, io};

#[derive(Parser)]
#[command(
    name = "tasn",
    about = "Trilinear attention sampling: attention maps, non-uniform sampling, training",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute an attention stack from a saved feature-map tensor.
    Attend(AttendArgs),
    /// Warp an image through an attention-derived sampling grid.
    Sample(SampleArgs),
    /// Generate the synthetic fine-grained dataset.
    GenData(GenDataArgs),
    /// Train a model and write per-epoch metrics plus a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Run the finite-difference gradient verification suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct AttendArgs {
    /// Input feature maps, a 3-d tensor file.
    #[arg(long)]
    features: PathBuf,
    /// Attention variant: raw, tri, sn-tri, sn-sn, post-sn, rn, sn-rn.
    #[arg(long, default_value = "sn-rn")]
    variant: String,
    /// Output tensor file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Input image (PGM or PPM).
    #[arg(long)]
    image: PathBuf,
    /// Attention tensor file, 2-d or 3-d.
    #[arg(long)]
    attention: PathBuf,
    /// Sampling mode: structure (channel average) or detail (one channel).
    #[arg(long, default_value = "structure")]
    mode: String,
    /// Fix the detail channel instead of drawing it from the seed.
    #[arg(long)]
    index: Option<usize>,
    /// Output size as HxW, height first.
    #[arg(long, default_value = "16x16")]
    out_size: String,
    /// Marginal decomposition: max or sum.
    #[arg(long, default_value = "max")]
    decompose: String,
    /// Marginal floor as a fraction of the mean attention mass per bin.
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Seed for the detail-channel draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output image path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Training images per class.
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Test images per class.
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Dataset seed; regeneration is byte-identical.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; train/ and test/ subdirectories are created.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing train/ and test/ splits.
    #[arg(long)]
    data: PathBuf,
    /// Training epochs.
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// SGD learning rate.
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Weight of the soft distillation loss.
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    /// Distillation softmax temperature.
    #[arg(long, default_value_t = 10.0)]
    temperature: f64,
    /// Attention variant used throughout training.
    #[arg(long, default_value = "sn-rn")]
    variant: String,
    /// Sampled image size as HxW.
    #[arg(long, default_value = "16x16")]
    out_size: String,
    /// Training seed; fully determines the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output path.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint path.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory; the test/ split is evaluated.
    #[arg(long)]
    data: PathBuf,
    /// Attention variant, matching the one used for training.
    #[arg(long, default_value = "sn-rn")]
    variant: String,
    /// Sampled image size as HxW, matching training.
    #[arg(long, default_value = "16x16")]
    out_size: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the randomized trials.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Errors that should exit with code 2: bad flag values, unreadable or
/// malformed inputs.
struct UsageError(String);

impl<E: std::fmt::Display> From<E> for UsageError {
    fn from(e: E) -> Self {
        UsageError(e.to_string())
    }
}

fn parse_variant(s: &str) -> Result<AttentionVariant, UsageError> {
    AttentionVariant::parse(s)
        .ok_or_else(|| UsageError(format!("unknown attention variant: {s}")))
}

fn parse_out_size(s: &str) -> Result<(usize, usize), UsageError> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| UsageError(format!("out-size must be HxW, got: {s}")))?;
    let h: usize = h.parse().map_err(|_| UsageError(format!("bad height in out-size: {s}")))?;
    let w: usize = w.parse().map_err(|_| UsageError(format!("bad width in out-size: {s}")))?;
    if h < 2 || w < 2 {
        return Err(UsageError(format!("out-size must be at least 2x2, got: {s}")));
    }
    Ok((h, w))
}

fn cmd_attend(args: &AttendArgs) -> Result<(), UsageError> {
    let variant = parse_variant(&args.variant)?;
    let t = io::load_tensor::<f64>(&args.features)?;
    let x = FeatureMaps::new(t)?;
    let stack = attention(&x, variant)?;
    io::save_tensor(&args.out, stack.values())?;
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> Result<(), UsageError> {
    let mode = match args.mode.as_str() {
        "structure" => SampleMode::Structure,
        "detail" => SampleMode::Detail,
        other => return Err(UsageError(format!("mode must be structure or detail, got: {other}"))),
    };
    let decomposition = Decomposition::parse(&args.decompose)
        .ok_or_else(|| UsageError(format!("decompose must be max or sum, got: {}", args.decompose)))?;
    let (out_h, out_w) = parse_out_size(&args.out_size)?;
    if args.epsilon < 0.0 {
        return Err(UsageError(format!("epsilon must be non-negative, got: {}", args.epsilon)));
    }

    let image = io::load_image::<f64>(&args.image)?;
    let t = io::load_tensor::<f64>(&args.attention)?;
    let t = match t.shape().len() {
        2 => t.reshaped(vec![1, t.shape()[0], t.shape()[1]])?,
        3 => t,
        n => return Err(UsageError(format!("attention must be 2-d or 3-d, got {n}-d"))),
    };
    let stack = AttentionStack::new(t)?;

    let config = SamplerConfig {
        decomposition,
        epsilon: args.epsilon,
        out_h,
        out_w,
        strategy: match args.index {
            Some(i) => SelectionStrategy::Fixed(i),
            None => SelectionStrategy::Random,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (warped, index) = sample(&image, &stack, mode, &config, &mut rng)?;
    io::save_image(&args.out, &warped)?;
    if let Some(i) = index {
        println!("{i}");
    }
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), UsageError> {
    let spec = SynthSpec {
        classes: args.classes,
        image_size: args.image_size,
        glyph_size: 4,
        train_per_class: args.per_class,
        test_per_class: args.test_per_class,
        seed: args.seed,
    };
    let (train, test) = synth::generate_dataset::<f64>(&spec)?;
    synth::save_set(&args.out.join("train"), &train)?;
    synth::save_set(&args.out.join("test"), &test)?;
    eprintln!(
        "wrote {} train and {} test images across {} classes to {}",
        train.len(),
        test.len(),
        args.classes,
        args.out.display()
    );
    Ok(())
}

fn train_config(
    epochs: usize,
    lr: f64,
    lambda: f64,
    temperature: f64,
    variant: &str,
    out_size: &str,
    seed: u64,
) -> Result<TrainConfig<f64>, UsageError> {
    let variant = parse_variant(variant)?;
    let (out_h, out_w) = parse_out_size(out_size)?;
    let mut cfg = TrainConfig::<f64>::default();
    cfg.epochs = epochs;
    cfg.learning_rate = lr;
    cfg.distill.lambda = lambda;
    cfg.distill.temperature = temperature;
    cfg.distill.validate()?;
    cfg.sampler.out_h = out_h;
    cfg.sampler.out_w = out_w;
    cfg.variant = variant;
    cfg.seed = seed;
    if epochs == 0 {
        return Err(UsageError("epochs must be positive".into()));
    }
    if !(lr > 0.0) {
        return Err(UsageError(format!("lr must be positive, got: {lr}")));
    }
    Ok(cfg)
}

fn load_splits(data: &PathBuf) -> Result<(synth::LabeledSet<f64>, synth::LabeledSet<f64>), UsageError> {
    let train = synth::load_set::<f64>(&data.join("train"))?;
    let test = synth::load_set::<f64>(&data.join("test"))?;
    if train.is_empty() || test.is_empty() {
        return Err(UsageError("dataset split is empty".into()));
    }
    Ok((train, test))
}

fn cmd_train(args: &TrainArgs) -> Result<(), UsageError> {
    let cfg = train_config(
        args.epochs,
        args.lr,
        args.lambda,
        args.temperature,
        &args.variant,
        &args.out_size,
        args.seed,
    )?;
    let (train_set, test_set) = load_splits(&args.data)?;
    let classes = train_set.labels.iter().max().unwrap() + 1;
    let model_cfg = ModelConfig::new(classes);
    let (model, _) = pipeline::run_tasn(&train_set, &test_set, model_cfg, &cfg, |m| {
        println!("{}\t{:.6}\t{:.4}", m.epoch, m.train_loss, m.test_accuracy);
    })?;
    model.save(&args.model)?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), UsageError> {
    let cfg = train_config(1, 0.5, 2.0, 10.0, &args.variant, &args.out_size, 0)?;
    let model = TasnModel::<f64>::load(&args.model)?;
    let test = synth::load_set::<f64>(&args.data.join("test"))?;
    if test.is_empty() {
        return Err(UsageError("test split is empty".into()));
    }
    let acc = pipeline::evaluate(&model, &test, &cfg)?;
    println!("{acc:.4}");
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> bool {
    let results = gradcheck::run_full_suite(args.seed);
    let mut ok = true;
    for r in &results {
        println!("{r}");
        ok &= r.passed;
    }
    ok
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Attend(a) => cmd_attend(a),
        Command::Sample(a) => cmd_sample(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => {
            return if cmd_gradcheck(a) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(UsageError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
