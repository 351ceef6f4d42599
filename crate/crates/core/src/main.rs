//! Command-line front end: train a toy model, run the two-party protocol
//! over TCP or in process, attack captured frames, and drive the sweep
//! experiments.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use splitleak::attack::{attack_frame, direct_token_baseline, AttackConfig};
use splitleak::corpus;
use splitleak::defense::NoiseSpec;
use splitleak::harness::{
    read_csv, run_length_sweep_with, run_noise_sweep_with, summarize, ExperimentConfig,
};
use splitleak::metrics::MatchRecord;
use splitleak::model::{train_toy, ModelConfig, TrainOptions, TransformerModel};
use splitleak::protocol::tcp::{serve, TcpTransport};
use splitleak::protocol::{HiddenFrame, InProcess, Provider, UserParty};
use splitleak::tokenizer::Vocab;
use std::net::TcpListener;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "splitleak",
    version,
    about = "Split-inference privacy lab: train, serve, attack, sweep"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a toy model on periodic byte patterns and save a checkpoint.
    Train(TrainArgs),
    /// Run the provider side of the protocol on a TCP port.
    ServeTop(ServeArgs),
    /// Run split inference on a text input (in process or against a server).
    Query(QueryArgs),
    /// Reconstruct the input behind a captured hidden frame.
    Attack(AttackArgs),
    /// Noise sweep: attack accuracy and utility across noise levels.
    SweepNoise(SweepArgs),
    /// Length sweep: recovery quality and steps across input lengths.
    SweepLength(SweepArgs),
    /// Summarise an existing sweep CSV.
    Report(ReportArgs),
    /// Write a default experiment config as JSON.
    InitConfig(InitConfigArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint output path.
    #[arg(long, default_value = "model.slk")]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f32,
    /// Decoupled weight decay on projection matrices.
    #[arg(long, default_value_t = 0.1)]
    weight_decay: f32,
    /// Layer-wise learning-rate decay (block l of L trains at
    /// lr * decay^(L-1-l)); 1.0 disables.
    #[arg(long, default_value_t = 1.0)]
    layer_lr_decay: f32,
    /// Activation regularization weight on block-output norms; 0 disables.
    #[arg(long, default_value_t = 1.5e-2)]
    activation_reg: f32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of training sequences.
    #[arg(long, default_value_t = 1024)]
    sequences: usize,
    /// Length of each training sequence.
    #[arg(long, default_value_t = 48)]
    seq_len: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Layers the user keeps; the server owns the rest.
    #[arg(long)]
    split: usize,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 4000)]
    port: u16,
    /// Stop after this many frames (runs until killed if absent).
    #[arg(long)]
    max_requests: Option<usize>,
    /// Where to dump captured frames, one binary file per frame.
    #[arg(long)]
    capture_dir: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: usize,
    /// Input text (tokenised as raw bytes).
    #[arg(long)]
    text: String,
    /// Gaussian noise level applied to the hidden embeddings.
    #[arg(long, default_value_t = 0.0)]
    sigma: f32,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// Save the outgoing hidden frame (what the provider sees) here.
    #[arg(long)]
    save_frame: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Connect to a serve-top instance instead of running in process.
    #[arg(long)]
    port: Option<u16>,
    /// How many next-token candidates to print.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: usize,
    /// Captured hidden frame (binary, as written by query --save-frame).
    #[arg(long)]
    frame: PathBuf,
    #[arg(long, default_value_t = 1000)]
    max_steps: u32,
    #[arg(long, default_value_t = 0.98)]
    cosine_stop: f32,
    #[arg(long, default_value_t = 0.05)]
    step_size: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ground-truth text; enables token-accuracy reporting.
    #[arg(long)]
    truth: Option<String>,
    /// Also run the softmax-relaxed direct-token baseline.
    #[arg(long)]
    with_baseline: bool,
    /// Write a JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config JSON (see init-config).
    #[arg(long)]
    config: PathBuf,
    /// Override the checkpoint path from the config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override the CSV output path from the config.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Override the summary output path from the config.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Args)]
struct InitConfigArgs {
    /// Output path; prints to stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct AttackJson {
    recovered_ids: Vec<u32>,
    recovered_text: String,
    steps: u32,
    final_cosine: f64,
    wall_ms: u64,
    token_accuracy: Option<f64>,
    exact_match: Option<bool>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::ServeTop(a) => cmd_serve_top(a),
        Cmd::Query(a) => cmd_query(a),
        Cmd::Attack(a) => cmd_attack(a),
        Cmd::SweepNoise(a) => cmd_sweep(a, SweepKind::Noise),
        Cmd::SweepLength(a) => cmd_sweep(a, SweepKind::Length),
        Cmd::Report(a) => cmd_report(a),
        Cmd::InitConfig(a) => cmd_init_config(a),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = ModelConfig::desk();
    if a.seq_len == 0 || a.seq_len > config.max_seq_len {
        bail!("seq-len must be in 1..={}", config.max_seq_len);
    }
    let mut model = TransformerModel::init_random(config, a.seed)?;
    let train_set = corpus::pattern_corpus(a.sequences, a.seq_len, a.seed);
    let report = train_toy(
        &mut model,
        &train_set,
        &TrainOptions {
            epochs: a.epochs,
            lr: a.lr,
            weight_decay: a.weight_decay,
            layer_lr_decay: a.layer_lr_decay,
            activation_reg: a.activation_reg,
            seed: a.seed,
        },
    )?;
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        log::info!("epoch {:>2}: mean loss {loss:.4}", i + 1);
    }
    let held_out = corpus::held_out_patterns(8, a.seq_len, a.seed);
    let refs: Vec<&[u32]> = held_out.iter().map(|s| s.as_slice()).collect();
    let utility = model.utility_accuracy(&refs, 1, 0.0, a.seed, 1)?;
    println!(
        "trained {} params over {} steps; held-out next-token accuracy {:.3}",
        model.config.param_count(),
        report.steps,
        utility
    );
    model.save(&a.out).context("saving checkpoint")?;
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn cmd_serve_top(a: ServeArgs) -> Result<()> {
    let model = TransformerModel::load(&a.checkpoint).context("loading checkpoint")?;
    let listener = TcpListener::bind((a.host.as_str(), a.port))
        .with_context(|| format!("binding {}:{}", a.host, a.port))?;
    println!("serving top model (split {}) on {}", a.split, listener.local_addr()?);
    let captured = serve(&listener, &model, a.split, a.max_requests)?;
    println!("handled {} frames", captured.len());
    if let Some(dir) = a.capture_dir {
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        for (i, frame) in captured.iter().enumerate() {
            let path = dir.join(format!("frame-{i:04}.bin"));
            std::fs::write(&path, frame.to_bytes())
                .with_context(|| format!("writing {}", path.display()))?;
        }
        println!("captured frames dumped to {}", dir.display());
    }
    Ok(())
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let model = TransformerModel::load(&a.checkpoint).context("loading checkpoint")?;
    let vocab = Vocab::new();
    let ids = vocab.encode(a.text.as_bytes());
    if ids.is_empty() {
        bail!("text must not be empty");
    }
    let user = UserParty::new(&model, a.split)?;
    let noise = NoiseSpec {
        sigma: a.sigma,
        seed: a.noise_seed,
    };
    if let Some(path) = &a.save_frame {
        let frame = user.prepare_frame(&ids, &noise)?;
        std::fs::write(path, frame.to_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
        println!("hidden frame saved to {}", path.display());
    }
    let logits = match a.port {
        Some(port) => {
            let mut transport =
                TcpTransport::connect(&a.host, port).context("connecting to provider")?;
            user.infer(&mut transport, &ids, &noise)?
        }
        None => {
            let mut provider = Provider::new(&model, a.split)?;
            let mut transport = InProcess {
                provider: &mut provider,
            };
            user.infer(&mut transport, &ids, &noise)?
        }
    };
    let d = logits.cols();
    let last = &logits.data[(logits.rows() - 1) * d..];
    let mut ranked: Vec<usize> = (0..d).collect();
    ranked.sort_by(|&i, &j| last[j].partial_cmp(&last[i]).expect("finite logits"));
    println!("next-token candidates after {:?}:", a.text);
    for &id in ranked.iter().take(a.top_k.max(1)) {
        println!(
            "  {:>5.2}  id {:>3}  {}",
            last[id],
            id,
            vocab.decode_display(&[id as u32])
        );
    }
    Ok(())
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    let model = TransformerModel::load(&a.checkpoint).context("loading checkpoint")?;
    let bytes = std::fs::read(&a.frame).with_context(|| format!("reading {}", a.frame.display()))?;
    let frame = HiddenFrame::from_bytes(&bytes).context("parsing hidden frame")?;
    let bottom = model.bottom_view(a.split)?;
    let cfg = AttackConfig {
        max_steps: a.max_steps,
        cosine_stop: a.cosine_stop,
        step_size: a.step_size,
        seed: a.seed,
        ..AttackConfig::default()
    };
    let result = attack_frame(&bottom, &frame, &cfg)?;
    let vocab = Vocab::new();
    let text = vocab.decode_display(&result.recovered);
    println!(
        "recovered after {} steps (cosine {:.4}, {} ms):",
        result.steps, result.final_cosine, result.wall_ms
    );
    println!("  {text}");

    let truth_ids = a.truth.as_ref().map(|t| vocab.encode(t.as_bytes()));
    let mut token_accuracy = None;
    let mut exact_match = None;
    if let Some(truth) = &truth_ids {
        if truth.len() == result.recovered.len() {
            let record = MatchRecord::new(truth.clone(), result.recovered.clone())?;
            token_accuracy = Some(record.token_accuracy());
            exact_match = Some(record.is_exact());
            println!(
                "  vs truth: token accuracy {:.3}, exact match {}",
                record.token_accuracy(),
                record.is_exact()
            );
        } else {
            log::warn!(
                "truth has {} tokens but frame holds {}; skipping accuracy",
                truth.len(),
                result.recovered.len()
            );
        }
    }

    if a.with_baseline {
        let target = frame.to_tensor()?;
        let baseline = direct_token_baseline(&bottom, &target, &cfg)?;
        let btext = vocab.decode_display(&baseline.recovered);
        println!(
            "baseline (direct token relaxation) after {} steps (cosine {:.4}):",
            baseline.steps, baseline.final_cosine
        );
        println!("  {btext}");
        if let Some(truth) = &truth_ids {
            if truth.len() == baseline.recovered.len() {
                let record = MatchRecord::new(truth.clone(), baseline.recovered.clone())?;
                println!("  vs truth: token accuracy {:.3}", record.token_accuracy());
            }
        }
    }

    if let Some(out) = a.out {
        let report = AttackJson {
            recovered_ids: result.recovered,
            recovered_text: text,
            steps: result.steps,
            final_cosine: result.final_cosine,
            wall_ms: result.wall_ms,
            token_accuracy,
            exact_match,
        };
        std::fs::write(&out, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", out.display()))?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

enum SweepKind {
    Noise,
    Length,
}

fn cmd_sweep(a: SweepArgs, kind: SweepKind) -> Result<()> {
    let mut cfg = ExperimentConfig::from_json_file(&a.config)?;
    if let Some(c) = a.checkpoint {
        cfg.checkpoint = c;
    }
    if let Some(c) = a.csv {
        cfg.csv_path = c;
    }
    if let Some(s) = a.summary {
        cfg.summary_path = Some(s);
    }
    let model = TransformerModel::load(&cfg.checkpoint).context("loading checkpoint")?;
    let rows = match kind {
        SweepKind::Noise => run_noise_sweep_with(&model, &cfg)?,
        SweepKind::Length => run_length_sweep_with(&model, &cfg)?,
    };
    println!("{}", summarize(&rows));
    println!("csv written to {}", cfg.csv_path.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let rows = read_csv(&a.csv)?;
    print!("{}", summarize(&rows));
    Ok(())
}

fn cmd_init_config(a: InitConfigArgs) -> Result<()> {
    let cfg = ExperimentConfig::default();
    let json = serde_json::to_string_pretty(&cfg)?;
    match a.out {
        Some(path) => {
            std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
            println!("config written to {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}
