//! Command-line surface: stage planning, inference, training, cost reports,
//! gradient checking, and subject-level voting.

use clap::{Args, Parser, Subcommand};
use hierform::analysis::{attention_weight_profile, model_flops};
use hierform::config::{PadPolicy, RunConfig};
use hierform::error::{HierformError, Result};
use hierform::features::{load_features, pad_or_truncate, FeatureSequence};
use hierform::hierarchy::{
    derive_stage_plan, infer_logits, ForwardOptions, ModelKind, ModelParams, StagePlan,
};
use hierform::training::{grad_check, majority_vote, metrics, train_epoch, Sample};
use hierform::weights::{load_weights, save_weights};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "hierform",
    version,
    about = "Hierarchical windowed-attention engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (flat key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set d=8 --set heads=2. Override the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for pair in &self.sets {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                HierformError::Config(format!("--set expects key=value, got {pair:?}"))
            })?;
            config.apply(key.trim(), value)?;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the stage plan for a config, hop and sequence length.
    Plan {
        #[command(flatten)]
        config: ConfigArgs,
        /// Frame hop in milliseconds.
        #[arg(long, default_value_t = 20.0)]
        hop_ms: f64,
        /// Sequence length in frames (defaults to the config max_frames).
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Run the model on one feature file and print logits and the class.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        /// Feature file (binary container or CSV).
        #[arg(long)]
        features: PathBuf,
        /// Weights file; freshly seeded weights when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Write the layer-1 attention profile to this CSV.
        #[arg(long)]
        record_attention: Option<PathBuf>,
    },
    /// Train on a directory of labeled feature files.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory of feature files with embedded labels.
        #[arg(long)]
        data: PathBuf,
        /// Training-log CSV destination.
        #[arg(long)]
        log: PathBuf,
        /// Weights destination.
        #[arg(long)]
        weights_out: PathBuf,
    },
    /// Analytic cost report for both model kinds.
    Flops {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 20.0)]
        hop_ms: f64,
        #[arg(long)]
        frames: Option<usize>,
        /// Also write the per-layer rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient verification per ablation combination.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 20.0)]
        hop_ms: f64,
        /// Fraction of parameters to sample (merging blocks and word tokens
        /// are always fully checked).
        #[arg(long, default_value_t = 0.05)]
        sample: f64,
    },
    /// Subject-level majority vote over per-utterance predictions.
    Vote {
        /// CSV with a subject,prediction header row.
        #[arg(long)]
        input: PathBuf,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan {
            config,
            hop_ms,
            frames,
        } => cmd_plan(&config, hop_ms, frames),
        Command::Infer {
            config,
            features,
            weights,
            record_attention,
        } => cmd_infer(
            &config,
            &features,
            weights.as_deref(),
            record_attention.as_deref(),
        ),
        Command::Train {
            config,
            data,
            log,
            weights_out,
        } => cmd_train(&config, &data, &log, &weights_out),
        Command::Flops {
            config,
            hop_ms,
            frames,
            csv,
        } => cmd_flops(&config, hop_ms, frames, csv.as_deref()),
        Command::Gradcheck {
            config,
            hop_ms,
            sample,
        } => cmd_gradcheck(&config, hop_ms, sample),
        Command::Vote { input, output } => cmd_vote(&input, output.as_deref()),
    }
}

fn plan_from(config: &RunConfig, hop_ms: f64, frames: usize) -> Result<StagePlan> {
    derive_stage_plan(
        &config.stats(),
        hop_ms,
        frames,
        config.layers,
        &config.plan_overrides(),
    )
}

fn print_plan(plan: &StagePlan) {
    println!("hop_ms = {}", plan.hop_ms);
    println!(
        "spans_ms = ({}, {}, {})",
        plan.spans_ms[0], plan.spans_ms[1], plan.spans_ms[2]
    );
    println!("t_w = ({}, {}, {})", plan.t_w[0], plan.t_w[1], plan.t_w[2]);
    println!("m = ({}, {}, {})", plan.m[0], plan.m[1], plan.m[2]);
    println!(
        "lengths = ({}, {}, {}, {})",
        plan.lengths[0], plan.lengths[1], plan.lengths[2], plan.lengths[3]
    );
    println!("t_z = {}", plan.t_z);
    println!(
        "layers = ({}, {}, {}, {})",
        plan.layers[0], plan.layers[1], plan.layers[2], plan.layers[3]
    );
    println!("utterance_tokens = {}", plan.utterance_tokens(true));
}

fn cmd_plan(config_args: &ConfigArgs, hop_ms: f64, frames: Option<usize>) -> Result<()> {
    let config = config_args.resolve()?;
    let plan = plan_from(&config, hop_ms, frames.unwrap_or(config.max_frames))?;
    print_plan(&plan);
    Ok(())
}

fn prepare_input(
    config: &RunConfig,
    seq: &FeatureSequence,
) -> Result<(FeatureSequence, Vec<bool>)> {
    match config.pad_policy {
        PadPolicy::PadTruncate => pad_or_truncate(seq, config.max_frames),
        PadPolicy::Strict => {
            if seq.frames() != config.max_frames {
                return Err(HierformError::Validation(format!(
                    "strict pad policy: sequence has {} frames, expected {}",
                    seq.frames(),
                    config.max_frames
                )));
            }
            Ok((seq.clone(), vec![true; seq.frames()]))
        }
    }
}

fn build_model(config: &RunConfig, plan: &StagePlan, input_dim: usize) -> Result<ModelParams> {
    ModelParams::init(plan, &config.dims(input_dim), config.kind, config.seed)
}

fn forward_options(config: &RunConfig, record_attention: bool) -> ForwardOptions {
    ForwardOptions {
        ablations: config.ablations(),
        record_attention,
        t_w_override: None,
    }
}

fn cmd_infer(
    config_args: &ConfigArgs,
    features: &Path,
    weights: Option<&Path>,
    record_attention: Option<&Path>,
) -> Result<()> {
    let config = config_args.resolve()?;
    let seq = load_features(features)?;
    let (seq, valid) = prepare_input(&config, &seq)?;
    let plan = plan_from(&config, seq.hop_ms, seq.frames())?;
    let mut params = build_model(&config, &plan, seq.width())?;
    if let Some(path) = weights {
        load_weights(path, &mut params)?;
    }
    let opts = forward_options(&config, record_attention.is_some());
    let (logits, records) = infer_logits(&params, &plan, &seq.values, &valid, &opts)?;
    let predicted = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    println!(
        "logits = [{}]",
        logits
            .iter()
            .map(|v| format!("{v:.9}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!("predicted = {predicted}");
    if let Some(path) = record_attention {
        let profile = attention_weight_profile(&records, 0)?;
        let mut csv = String::from("token,weight\n");
        for (i, w) in profile.iter().enumerate() {
            csv.push_str(&format!("{i},{w:.12}\n"));
        }
        fs::write(path, csv)?;
        println!("attention profile written to {}", path.display());
    }
    Ok(())
}

fn cmd_train(
    config_args: &ConfigArgs,
    data_dir: &Path,
    log_path: &Path,
    weights_out: &Path,
) -> Result<()> {
    let config = config_args.resolve()?;
    let mut paths: Vec<PathBuf> = fs::read_dir(data_dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HierformError::Usage(format!(
            "no feature files in {}",
            data_dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(paths.len());
    let mut input_dim = 0;
    let mut hop_ms = 0.0;
    for path in &paths {
        let seq = load_features(path)?;
        let label = seq.label.ok_or_else(|| {
            HierformError::Validation(format!("{} has no embedded label", path.display()))
        })? as usize;
        if label >= config.classes {
            return Err(HierformError::Validation(format!(
                "{}: label {label} out of range for {} classes",
                path.display(),
                config.classes
            )));
        }
        if input_dim == 0 {
            input_dim = seq.width();
            hop_ms = seq.hop_ms;
        } else if seq.width() != input_dim {
            return Err(HierformError::Validation(format!(
                "{}: width {} differs from {}",
                path.display(),
                seq.width(),
                input_dim
            )));
        }
        let (padded, valid) = prepare_input(&config, &seq)?;
        samples.push(Sample {
            features: padded.values,
            valid,
            label,
        });
    }
    let plan = plan_from(&config, hop_ms, config.max_frames)?;
    let mut params = build_model(&config, &plan, input_dim)?;
    let train_cfg = config.train_config();
    let opts = forward_options(&config, false);
    let mut velocity = Vec::new();
    let mut log = String::from("epoch,lr,loss,wa,ua,wf1,mf1\n");
    for epoch in 0..train_cfg.epochs {
        let stats = train_epoch(
            &mut params,
            &plan,
            &samples,
            &train_cfg,
            epoch,
            &opts,
            &mut velocity,
        )?;
        let m = metrics(&stats.confusion);
        log.push_str(&format!(
            "{},{:.8},{:.6},{:.4},{:.4},{:.4},{:.4}\n",
            epoch, stats.lr, stats.loss, m.wa, m.ua, m.wf1, m.mf1
        ));
        println!(
            "epoch {epoch}: lr {:.6} loss {:.4} wa {:.4} ua {:.4}",
            stats.lr, stats.loss, m.wa, m.ua
        );
    }
    fs::write(log_path, log)?;
    save_weights(weights_out, &params)?;
    println!("log written to {}", log_path.display());
    println!("weights written to {}", weights_out.display());
    Ok(())
}

fn cmd_flops(
    config_args: &ConfigArgs,
    hop_ms: f64,
    frames: Option<usize>,
    csv: Option<&Path>,
) -> Result<()> {
    let config = config_args.resolve()?;
    let frames = frames.unwrap_or(config.max_frames);
    let plan = plan_from(&config, hop_ms, frames)?;
    let dims = config.dims(config.d);
    let report = model_flops(&plan, &dims, &config.ablations());
    print!("{}", report.text_table());
    if let Some(path) = csv {
        fs::write(path, report.to_csv())?;
        println!("rows written to {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(config_args: &ConfigArgs, hop_ms: f64, sample: f64) -> Result<()> {
    use hierform::hierarchy::Ablations;
    use hierform::numerics::Matrix;
    use rand::SeedableRng;
    let config = config_args.resolve()?;
    let plan = plan_from(&config, hop_ms, config.max_frames)?;
    let dims = config.dims(config.d);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let input = Matrix::uniform(plan.lengths[0], dims.input_dim, 1.0, &mut rng);
    let valid = vec![true; plan.lengths[0]];
    let mut all_pass = true;
    for ablations in Ablations::all_combinations() {
        let params = ModelParams::init(&plan, &dims, ModelKind::Hierarchical, config.seed)?;
        let opts = ForwardOptions {
            ablations,
            record_attention: false,
            t_w_override: None,
        };
        let report = grad_check(
            &params,
            &plan,
            &input,
            &valid,
            0,
            &opts,
            1e-6,
            sample,
            config.seed,
        )?;
        let pass = report.max_rel_err < 1e-4;
        all_pass &= pass;
        println!(
            "unit={} word={} merge={}: max_rel_err {:.3e} over {} entries [{}]",
            ablations.unit_encoder,
            ablations.word_encoder,
            ablations.merging,
            report.max_rel_err,
            report.checked,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if !all_pass {
        return Err(HierformError::Validation("gradient check failed".into()));
    }
    Ok(())
}

fn cmd_vote(input: &Path, output: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(input)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| HierformError::Format("empty predictions CSV".into()))?;
    if header.trim().to_lowercase() != "subject,prediction" {
        return Err(HierformError::Format(format!(
            "expected subject,prediction header, got {header:?}"
        )));
    }
    let mut by_subject: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let (subject, pred) = line.split_once(',').ok_or_else(|| {
            HierformError::Format(format!("row {}: expected subject,prediction", i + 2))
        })?;
        let pred: usize = pred.trim().parse().map_err(|_| {
            HierformError::Format(format!("row {}: bad prediction {pred:?}", i + 2))
        })?;
        by_subject
            .entry(subject.trim().to_string())
            .or_default()
            .push(pred);
    }
    let mut out = String::from("subject,label\n");
    for (subject, preds) in &by_subject {
        out.push_str(&format!("{},{}\n", subject, majority_vote(preds)?));
    }
    match output {
        Some(path) => fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}
