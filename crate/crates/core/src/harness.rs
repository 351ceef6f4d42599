//! Seeded experiment sweeps and CSV reporting.
//!
//! Two experiments share one row schema:
//!
//! - noise sweep: grid over split layer and noise level at a fixed input
//!   length, measuring attack accuracy and model utility side by side;
//! - length sweep: grid over split layer and input length at a fixed noise
//!   level, measuring recovery quality and steps to converge.
//!
//! Every trial derives its input, noise and attack seeds from the row seed
//! with a splitmix64 chain, so a run is fully reproducible from its config;
//! with `measure_wall_time` off, re-running a config yields a byte-identical
//! CSV. Rows are flushed after every grid cell, so an interrupted sweep
//! keeps all completed cells.

use crate::attack::{attack_frame, AttackConfig};
use crate::corpus;
use crate::defense::NoiseSpec;
use crate::metrics::{MatchRecord, MetricsError};
use crate::model::{CheckpointError, ModelError, TransformerModel};
use crate::protocol::{ProtocolError, UserParty};
use crate::attack::AttackError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable capping the harness worker count.
pub const WORKERS_ENV: &str = "SPLITLEAK_WORKERS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid experiment config: {0}")]
    BadConfig(String),
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

fn io_ctx(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Where sweep inputs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// Random windows of the embedded text sample.
    TextSample,
    /// Uniform random bytes.
    RandomBytes,
    /// Periodic lowercase patterns (the training distribution).
    Patterns,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub checkpoint: PathBuf,
    pub csv_path: PathBuf,
    pub summary_path: Option<PathBuf>,
    pub split_layers: Vec<usize>,
    pub sigmas: Vec<f32>,
    pub lengths: Vec<usize>,
    /// Input length used by the noise sweep.
    pub noise_sweep_length: usize,
    /// Noise level used by the length sweep.
    pub length_sweep_sigma: f32,
    pub trials: usize,
    pub base_seed: u64,
    pub input_source: InputSource,
    /// Held-out sequences for utility measurement.
    pub utility_sequences: usize,
    pub utility_seq_len: usize,
    /// Independent noise draws averaged into each utility number.
    pub utility_noise_draws: usize,
    pub attack: AttackConfig,
    /// With this off, the wall_ms column is written as 0 and sweep output
    /// is byte-reproducible.
    pub measure_wall_time: bool,
    /// Worker threads; `None` defers to SPLITLEAK_WORKERS, then to one
    /// worker per CPU.
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            checkpoint: PathBuf::from("model.slk"),
            csv_path: PathBuf::from("sweep.csv"),
            summary_path: None,
            split_layers: vec![1, 3],
            sigmas: vec![0.0, 0.5, 1.0, 2.0, 5.0, 15.0],
            lengths: vec![8, 16, 32, 64, 128],
            noise_sweep_length: 32,
            length_sweep_sigma: 0.0,
            trials: 5,
            base_seed: 42,
            input_source: InputSource::RandomBytes,
            utility_sequences: 8,
            utility_seq_len: 48,
            utility_noise_draws: 20,
            // The reference sweeps run against the desk checkpoint, whose
            // embedding rows are several times smaller than the unit-ish
            // norms the library-wide attack defaults assume; a finer step
            // and tighter stop make reconstruction reliable there.
            attack: AttackConfig {
                step_size: 0.02,
                cosine_stop: 0.99999,
                ..AttackConfig::default()
            },
            measure_wall_time: true,
            workers: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_ctx(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn resolve_workers(&self) -> usize {
        if let Some(w) = self.workers {
            return w.max(1);
        }
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            if let Ok(w) = v.parse::<usize>() {
                return w.max(1);
            }
        }
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// One CSV row: one attack trial.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub split_layer: usize,
    pub length: usize,
    pub sigma: f32,
    pub seed: u64,
    pub attack_acc: f64,
    pub exact_match: bool,
    pub steps: u32,
    pub final_cosine: f64,
    pub utility_acc: f64,
    pub wall_ms: u64,
}

pub const CSV_HEADER: &str =
    "split_layer,length,sigma,seed,attack_acc,exact_match,steps,final_cosine,utility_acc,wall_ms";

/// Formats with six significant digits, plain decimal where the magnitude
/// allows it. Parses back to the same f64 within one part in 1e6.
pub fn fmt_sig(x: f64) -> String {
    const SIG: i32 = 6;
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if mag + 1 > SIG {
        return format!("{:.*e}", (SIG - 1) as usize, x);
    }
    let decimals = (SIG - 1 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

impl SweepRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.split_layer,
            self.length,
            fmt_sig(self.sigma as f64),
            self.seed,
            fmt_sig(self.attack_acc),
            u8::from(self.exact_match),
            self.steps,
            fmt_sig(self.final_cosine),
            fmt_sig(self.utility_acc),
            self.wall_ms
        )
    }

    pub fn from_csv(line: &str, lineno: usize) -> Result<Self, HarnessError> {
        let err = |msg: String| HarnessError::Csv { line: lineno, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(err(format!("expected 10 fields, got {}", fields.len())));
        }
        fn parse<T: std::str::FromStr>(s: &str, what: &str, lineno: usize) -> Result<T, HarnessError> {
            s.parse().map_err(|_| HarnessError::Csv {
                line: lineno,
                msg: format!("bad {what}: {s:?}"),
            })
        }
        Ok(SweepRow {
            split_layer: parse(fields[0], "split_layer", lineno)?,
            length: parse(fields[1], "length", lineno)?,
            sigma: parse(fields[2], "sigma", lineno)?,
            seed: parse(fields[3], "seed", lineno)?,
            attack_acc: parse(fields[4], "attack_acc", lineno)?,
            exact_match: matches!(fields[5], "1"),
            steps: parse(fields[6], "steps", lineno)?,
            final_cosine: parse(fields[7], "final_cosine", lineno)?,
            utility_acc: parse(fields[8], "utility_acc", lineno)?,
            wall_ms: parse(fields[9], "wall_ms", lineno)?,
        })
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<SweepRow>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_ctx(path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        other => {
            return Err(HarnessError::Csv {
                line: 1,
                msg: format!("bad header: {:?}", other.map(|(_, h)| h)),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| SweepRow::from_csv(l, i + 1))
        .collect()
}

// ----- seed derivation ------------------------------------------------------

/// splitmix64 finaliser step.
pub fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically folds a list of tags into a base seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    s
}

fn sample_input(source: InputSource, len: usize, seed: u64) -> Vec<u32> {
    match source {
        InputSource::TextSample => corpus::text_window(len, seed),
        InputSource::RandomBytes => corpus::random_bytes(len, seed),
        InputSource::Patterns => corpus::pattern_corpus(1, len, seed).remove(0),
    }
}

// ----- sweep execution -------------------------------------------------------

#[derive(Clone, Copy)]
struct Cell {
    split: usize,
    sigma: f32,
    length: usize,
    /// Distinguishes the two sweeps in the seed chain.
    sweep_tag: u64,
}

fn run_trial(
    model: &TransformerModel,
    cfg: &ExperimentConfig,
    cell: Cell,
    trial: usize,
    utility_acc: f64,
) -> Result<SweepRow, HarnessError> {
    let row_seed = derive_seed(
        cfg.base_seed,
        &[
            cell.sweep_tag,
            cell.split as u64,
            cell.sigma.to_bits() as u64,
            cell.length as u64,
            trial as u64,
        ],
    );
    let input_seed = splitmix64(row_seed ^ 0x01);
    let noise_seed = splitmix64(row_seed ^ 0x02);
    let attack_seed = splitmix64(row_seed ^ 0x03);

    let ids = sample_input(cfg.input_source, cell.length, input_seed);
    let user = UserParty::new(model, cell.split)?;
    let frame = user.prepare_frame(
        &ids,
        &NoiseSpec {
            sigma: cell.sigma,
            seed: noise_seed,
        },
    )?;
    let bottom = model.bottom_view(cell.split)?;
    let attack_cfg = AttackConfig {
        seed: attack_seed,
        ..cfg.attack.clone()
    };
    let result = attack_frame(&bottom, &frame, &attack_cfg)?;
    let record = MatchRecord::new(ids, result.recovered)?;
    Ok(SweepRow {
        split_layer: cell.split,
        length: cell.length,
        sigma: cell.sigma,
        seed: row_seed,
        attack_acc: record.token_accuracy(),
        exact_match: record.is_exact(),
        steps: result.steps,
        final_cosine: result.final_cosine,
        utility_acc,
        wall_ms: if cfg.measure_wall_time {
            result.wall_ms
        } else {
            0
        },
    })
}

fn validate_common(model: &TransformerModel, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    if cfg.trials == 0 {
        return Err(HarnessError::BadConfig("trials must be >= 1".into()));
    }
    if cfg.split_layers.is_empty() {
        return Err(HarnessError::BadConfig("split_layers is empty".into()));
    }
    for &s in &cfg.split_layers {
        model.bottom_view(s)?; // validates the split against the model
    }
    for &sigma in &cfg.sigmas {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(HarnessError::BadConfig(format!("bad sigma {sigma}")));
        }
    }
    cfg.attack
        .validate()
        .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
    Ok(())
}

fn utility_for(
    model: &TransformerModel,
    cfg: &ExperimentConfig,
    split: usize,
    sigma: f32,
) -> Result<f64, HarnessError> {
    let held_out = corpus::held_out_patterns(
        cfg.utility_sequences,
        cfg.utility_seq_len.min(model.config.max_seq_len),
        cfg.base_seed,
    );
    let refs: Vec<&[u32]> = held_out.iter().map(|s| s.as_slice()).collect();
    let seed = derive_seed(
        cfg.base_seed,
        &[UTILITY_TAG, split as u64, sigma.to_bits() as u64],
    );
    Ok(model.utility_accuracy(
        &refs,
        split,
        sigma,
        seed,
        cfg.utility_noise_draws,
    )?)
}

/// Tag for utility seeds, kept distinct from the sweep tags.
const UTILITY_TAG: u64 = 0x7574_696c; // "util"

struct CsvWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl CsvWriter {
    /// Creates the output file up front so an unwritable path fails before
    /// any model work happens.
    fn create(path: &Path) -> Result<Self, HarnessError> {
        let file = std::fs::File::create(path).map_err(io_ctx(path))?;
        let mut w = CsvWriter {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.line(CSV_HEADER)?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<(), HarnessError> {
        writeln!(self.file, "{s}").map_err(io_ctx(&self.path))
    }

    fn flush(&mut self) -> Result<(), HarnessError> {
        self.file.flush().map_err(io_ctx(&self.path))
    }
}

fn run_cells(
    model: &TransformerModel,
    cfg: &ExperimentConfig,
    cells: &[Cell],
) -> Result<Vec<SweepRow>, HarnessError> {
    let mut writer = CsvWriter::create(&cfg.csv_path)?;
    let workers = cfg.resolve_workers();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::BadConfig(format!("worker pool: {e}")))?;

    let mut rows = Vec::with_capacity(cells.len() * cfg.trials);
    for &cell in cells {
        let utility = utility_for(model, cfg, cell.split, cell.sigma)?;
        // Trials are independent and fully self-seeded, so intra-cell
        // parallelism cannot change results, only wall time.
        let cell_rows: Result<Vec<SweepRow>, HarnessError> = pool.install(|| {
            (0..cfg.trials)
                .into_par_iter()
                .map(|trial| run_trial(model, cfg, cell, trial, utility))
                .collect()
        });
        let cell_rows = cell_rows?;
        for row in &cell_rows {
            writer.line(&row.to_csv())?;
        }
        writer.flush()?; // crash-safe: completed cells survive
        log::info!(
            "cell split={} sigma={} length={}: mean attack_acc {:.3}",
            cell.split,
            cell.sigma,
            cell.length,
            cell_rows.iter().map(|r| r.attack_acc).sum::<f64>() / cell_rows.len() as f64
        );
        rows.extend(cell_rows);
    }
    if let Some(summary_path) = &cfg.summary_path {
        let summary = summarize(&rows);
        std::fs::write(summary_path, summary).map_err(io_ctx(summary_path))?;
    }
    Ok(rows)
}

/// Noise sweep with an already-loaded model.
pub fn run_noise_sweep_with(
    model: &TransformerModel,
    cfg: &ExperimentConfig,
) -> Result<Vec<SweepRow>, HarnessError> {
    validate_common(model, cfg)?;
    if cfg.sigmas.is_empty() {
        return Err(HarnessError::BadConfig("sigmas is empty".into()));
    }
    if cfg.noise_sweep_length == 0 || cfg.noise_sweep_length > model.config.max_seq_len {
        return Err(HarnessError::BadConfig(format!(
            "noise_sweep_length {} outside 1..={}",
            cfg.noise_sweep_length, model.config.max_seq_len
        )));
    }
    let cells: Vec<Cell> = cfg
        .split_layers
        .iter()
        .flat_map(|&split| {
            cfg.sigmas.iter().map(move |&sigma| Cell {
                split,
                sigma,
                length: cfg.noise_sweep_length,
                sweep_tag: 1,
            })
        })
        .collect();
    run_cells(model, cfg, &cells)
}

/// Noise sweep, loading the checkpoint named in the config.
pub fn run_noise_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, HarnessError> {
    let model = TransformerModel::load(&cfg.checkpoint)?;
    run_noise_sweep_with(&model, cfg)
}

/// Length sweep with an already-loaded model.
pub fn run_length_sweep_with(
    model: &TransformerModel,
    cfg: &ExperimentConfig,
) -> Result<Vec<SweepRow>, HarnessError> {
    validate_common(model, cfg)?;
    if cfg.lengths.is_empty() {
        return Err(HarnessError::BadConfig("lengths is empty".into()));
    }
    for &len in &cfg.lengths {
        if len == 0 || len > model.config.max_seq_len {
            return Err(HarnessError::BadConfig(format!(
                "length {len} outside 1..={}",
                model.config.max_seq_len
            )));
        }
    }
    if !(cfg.length_sweep_sigma.is_finite() && cfg.length_sweep_sigma >= 0.0) {
        return Err(HarnessError::BadConfig(format!(
            "bad length_sweep_sigma {}",
            cfg.length_sweep_sigma
        )));
    }
    let cells: Vec<Cell> = cfg
        .split_layers
        .iter()
        .flat_map(|&split| {
            cfg.lengths.iter().map(move |&length| Cell {
                split,
                sigma: cfg.length_sweep_sigma,
                length,
                sweep_tag: 2,
            })
        })
        .collect();
    run_cells(model, cfg, &cells)
}

/// Length sweep, loading the checkpoint named in the config.
pub fn run_length_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, HarnessError> {
    let model = TransformerModel::load(&cfg.checkpoint)?;
    run_length_sweep_with(&model, cfg)
}

// ----- reporting -------------------------------------------------------------

/// Aggregates rows per (split, length, sigma) cell and renders a plain-text
/// summary, including the soft check for attack accuracy surviving a
/// utility collapse.
pub fn summarize(rows: &[SweepRow]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    if rows.is_empty() {
        out.push_str("no rows\n");
        return out;
    }
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.split_layer, a.length)
            .cmp(&(b.split_layer, b.length))
            .then(a.sigma.partial_cmp(&b.sigma).expect("finite sigma"))
    });

    struct Agg {
        split: usize,
        length: usize,
        sigma: f32,
        attack: f64,
        exact: f64,
        steps: f64,
        cosine: f64,
        utility: f64,
        n: usize,
    }
    let mut cells: Vec<Agg> = Vec::new();
    for row in sorted {
        let key = (row.split_layer, row.length, row.sigma);
        match cells.last_mut() {
            Some(c) if (c.split, c.length, c.sigma) == key => {
                c.attack += row.attack_acc;
                c.exact += f64::from(u8::from(row.exact_match));
                c.steps += row.steps as f64;
                c.cosine += row.final_cosine;
                c.utility += row.utility_acc;
                c.n += 1;
            }
            _ => cells.push(Agg {
                split: row.split_layer,
                length: row.length,
                sigma: row.sigma,
                attack: row.attack_acc,
                exact: f64::from(u8::from(row.exact_match)),
                steps: row.steps as f64,
                cosine: row.final_cosine,
                utility: row.utility_acc,
                n: 1,
            }),
        }
    }

    writeln!(out, "{} rows in {} cells", rows.len(), cells.len()).unwrap();
    for c in &cells {
        let n = c.n as f64;
        writeln!(
            out,
            "split {} len {:>3} sigma {:>8}: attack_acc {:.3} exact {:.2} steps {:>6.1} cosine {:.4} utility {:.3} (n={})",
            c.split,
            c.length,
            fmt_sig(c.sigma as f64),
            c.attack / n,
            c.exact / n,
            c.steps / n,
            c.cosine / n,
            c.utility / n,
            c.n
        )
        .unwrap();
    }

    // Soft check: does the attack stay useful at a noise level that has
    // already destroyed the model's prediction quality?
    let mut flags: Vec<String> = Vec::new();
    let splits: Vec<usize> = {
        let mut s: Vec<usize> = cells.iter().map(|c| c.split).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    for split in splits {
        let clean: Option<f64> = cells
            .iter()
            .find(|c| c.split == split && c.sigma == 0.0)
            .map(|c| c.utility / c.n as f64);
        let Some(clean) = clean else { continue };
        if clean <= 0.0 {
            continue;
        }
        for c in cells.iter().filter(|c| c.split == split && c.sigma > 0.0) {
            let n = c.n as f64;
            let utility = c.utility / n;
            let attack = c.attack / n;
            if utility < 0.1 * clean && attack > 0.3 {
                flags.push(format!(
                    "split {} sigma {}: attack_acc {:.3} with utility {:.3} (clean {:.3})",
                    c.split,
                    fmt_sig(c.sigma as f64),
                    attack,
                    utility,
                    clean
                ));
            }
        }
    }
    if flags.is_empty() {
        writeln!(out, "attack-above-0.3-despite-utility-collapse: none").unwrap();
    } else {
        writeln!(out, "attack-above-0.3-despite-utility-collapse:").unwrap();
        for f in flags {
            writeln!(out, "  {f}").unwrap();
        }
    }
    out
}
