//! Acceptance checks for the split-inference reconstruction laboratory.
//!
//! Each test covers one numbered criterion and prints a single
//! `criterion N: PASS — ...` line with the measured figures. For honest
//! wall-clock numbers run them serially:
//!
//! ```text
//! cargo test --release --test acceptance -- --test-threads=1 --nocapture
//! ```
//!
//! The trained reference model is built once per process with a fixed
//! recipe and shared across criteria, so the first test to need it pays
//! its training time.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use splitleak::attack::{
    attack_frame, direct_token_baseline, recover_tokens, reconstruct_embeddings, AttackConfig,
};
use splitleak::corpus;
use splitleak::defense::NoiseSpec;
use splitleak::harness::{
    self, read_csv, run_length_sweep_with, run_noise_sweep_with, ExperimentConfig, InputSource,
};
use splitleak::metrics::{attack_accuracy, MatchRecord};
use splitleak::model::{ModelConfig, TrainOptions, TransformerModel};
use splitleak::protocol::tcp::{serve, TcpTransport};
use splitleak::protocol::{HiddenFrame, InProcess, Provider, UserParty};
use splitleak::tensor::{grad_check, GradGraph, Tensor, TensorId};
use splitleak::tokenizer::Vocab;

// ---- shared fixtures --------------------------------------------------------

/// Reference training recipe for the desk-scale model (the `train` CLI
/// defaults). Derived once by a calibration sweep; both the trained-model
/// criteria and the README quote it.
const REF_SEQUENCES: usize = 1024;
const REF_SEQ_LEN: usize = 48;
const REF_SEED: u64 = 42;

/// Attack settings tuned for the desk scale. The library defaults
/// (step 0.05, stop 0.98) fit embedding tables with row norms around one;
/// this model's rows are roughly 8x smaller, so the attack uses a finer
/// step and a tighter stop.
fn desk_attack() -> AttackConfig {
    AttackConfig {
        step_size: 0.02,
        cosine_stop: 0.99999,
        ..AttackConfig::default()
    }
}

static TRAINED: OnceLock<TransformerModel> = OnceLock::new();
static RANDOM_DESK: OnceLock<TransformerModel> = OnceLock::new();

fn trained_model() -> &'static TransformerModel {
    TRAINED.get_or_init(|| {
        let t0 = Instant::now();
        let mut model = TransformerModel::init_random(ModelConfig::desk(), REF_SEED)
            .expect("desk config is valid");
        let corpus = corpus::pattern_corpus(REF_SEQUENCES, REF_SEQ_LEN, REF_SEED);
        let opts = TrainOptions::default();
        let report =
            splitleak::model::train_toy(&mut model, &corpus, &opts).expect("reference run trains");
        eprintln!(
            "(trained reference model: {} sequences x {} epochs in {:.0?})",
            REF_SEQUENCES,
            report.epoch_losses.len(),
            t0.elapsed()
        );
        model
    })
}

fn random_desk_model() -> &'static TransformerModel {
    RANDOM_DESK
        .get_or_init(|| TransformerModel::init_random(ModelConfig::desk(), 7).expect("valid"))
}

fn random_bytes(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..256u32)).collect()
}

fn rand_tensor(shape: Vec<usize>, seed: u64, lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Test points keep |x| in [0.5, 2] so finite differences stay
/// well-conditioned (no sign changes under the h = 1e-3 probe).
fn rand_point(shape: Vec<usize>, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.5f32..2.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Like [`rand_point`] but with signs alternating along each row, which
/// bounds every row's standard deviation away from zero. Layer norm divides
/// by the row deviation, so its curvature (and with it the finite-difference
/// truncation error) blows up on rows that happen to be nearly constant.
fn rand_spread_point(shape: Vec<usize>, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..n)
        .map(|i| {
            let mag = rng.random_range(0.5f32..2.0);
            if i % 2 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

// ---- criterion 1: gradient correctness --------------------------------------

/// Runs `grad_check` on a closure that maps the leaf through one primitive
/// and reduces to a scalar by squared distance from a fixed target, keeping
/// the check sensitive to every output coordinate.
fn check_primitive<F>(name: &str, point: &Tensor, f: F) -> f64
where
    F: Fn(&mut GradGraph, TensorId) -> Result<TensorId, splitleak::tensor::TensorError>,
{
    let err = grad_check(&f, point, 1e-3)
        .unwrap_or_else(|e| panic!("grad_check {name} failed to evaluate: {e}"));
    assert!(
        err < 1e-3,
        "criterion 1: FAIL — {name} max relative gradient error {err:.3e} >= 1e-3"
    );
    err
}

/// Builds a reduction `|out - (out0 +/- 0.1)|^2` against a precomputed
/// constant so the scalar loss has nonzero gradient through every entry.
fn offset_target(g: &mut GradGraph, out: TensorId) -> Tensor {
    let v = g.value(out);
    let data: Vec<f32> = v
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| if i % 2 == 0 { x + 0.1 } else { x - 0.1 })
        .collect();
    Tensor::new(v.shape.clone(), data).expect("same shape")
}

#[test]
fn criterion_01_gradient_correctness() {
    let t0 = Instant::now();
    let mut worst: (String, f64) = (String::new(), 0.0);
    let mut record = |name: &str, err: f64| {
        if err > worst.1 {
            worst = (name.to_string(), err);
        }
    };

    let a = rand_point(vec![3, 4], 11);
    let b = rand_point(vec![3, 4], 12);
    let m = rand_point(vec![4, 5], 13);
    let bias = rand_point(vec![4], 14);

    // Elementwise and scalar ops: reduce through a fixed offset target.
    macro_rules! reduced {
        ($name:expr, $point:expr, $build:expr) => {{
            let point = $point;
            // Precompute the target from the op value at the test point.
            let target = {
                let mut g = GradGraph::new();
                let leaf = g.leaf(point.clone().requires_grad(true));
                #[allow(clippy::redundant_closure_call)]
                let out = ($build)(&mut g, leaf).expect("builds");
                offset_target(&mut g, out)
            };
            let err = check_primitive($name, &point, |g, leaf| {
                #[allow(clippy::redundant_closure_call)]
                let out = ($build)(g, leaf)?;
                let t = g.constant(target.clone());
                let d = g.sub(out, t)?;
                g.squared_l2(d)
            });
            record($name, err);
        }};
    }

    let bc = b.clone();
    reduced!("add", a.clone(), |g: &mut GradGraph, leaf| {
        let c = g.constant(bc.clone());
        g.add(leaf, c)
    });
    let bc = b.clone();
    reduced!("sub", a.clone(), |g: &mut GradGraph, leaf| {
        let c = g.constant(bc.clone());
        g.sub(leaf, c)
    });
    let bc = b.clone();
    reduced!("mul", a.clone(), |g: &mut GradGraph, leaf| {
        let c = g.constant(bc.clone());
        g.mul(leaf, c)
    });
    reduced!("mul_scalar", a.clone(), |g: &mut GradGraph, leaf| g
        .mul_scalar(leaf, -1.7));
    let mc = m.clone();
    reduced!("matmul (lhs)", a.clone(), |g: &mut GradGraph, leaf| {
        let c = g.constant(mc.clone());
        g.matmul(leaf, c)
    });
    let ac = a.clone();
    reduced!("matmul (rhs)", m.clone(), |g: &mut GradGraph, leaf| {
        let c = g.constant(ac.clone());
        g.matmul(c, leaf)
    });
    let biasc = bias.clone();
    reduced!("add_bias (input)", a.clone(), |g: &mut GradGraph, leaf| {
        let c = g.constant(biasc.clone());
        g.add_bias(leaf, c)
    });
    let ac = a.clone();
    reduced!("add_bias (bias)", bias.clone(), |g: &mut GradGraph, leaf| {
        let c = g.constant(ac.clone());
        g.add_bias(c, leaf)
    });
    reduced!("transpose", a.clone(), |g: &mut GradGraph, leaf| g
        .transpose(leaf));
    reduced!("reshape", a.clone(), |g: &mut GradGraph, leaf| g
        .reshape(leaf, vec![4, 3]));
    reduced!("slice_cols", a.clone(), |g: &mut GradGraph, leaf| g
        .slice_cols(leaf, 1, 2));
    let bc = b.clone();
    reduced!("concat_cols", a.clone(), |g: &mut GradGraph, leaf| {
        let c = g.constant(bc.clone());
        g.concat_cols(&[leaf, c])
    });
    reduced!("gelu", a.clone(), |g: &mut GradGraph, leaf| g.gelu(leaf));

    // Softmax over a moderate spread stays away from saturated corners.
    let sm_point = rand_tensor(vec![3, 5], 15, -0.8, 0.8);
    reduced!("softmax_rows", sm_point, |g: &mut GradGraph, leaf| g
        .softmax_rows(leaf));

    // Causal mask composed with softmax, as used by attention.
    let sq = rand_tensor(vec![4, 4], 16, -0.8, 0.8);
    reduced!("causal_mask+softmax", sq, |g: &mut GradGraph, leaf| {
        let masked = g.causal_mask(leaf)?;
        g.softmax_rows(masked)
    });

    // Layer norm: input and both parameters.
    let ln_x = rand_spread_point(vec![3, 4], 17);
    let ln_g = rand_point(vec![4], 18);
    let ln_b = rand_point(vec![4], 19);
    let (gx, gg, gb) = (ln_x.clone(), ln_g.clone(), ln_b.clone());
    reduced!("layer_norm (input)", ln_x.clone(), |g: &mut GradGraph,
                                                  leaf| {
        let gamma = g.constant(gg.clone());
        let beta = g.constant(gb.clone());
        g.layer_norm(leaf, gamma, beta, 1e-5)
    });
    let (gg2, gb2) = (ln_g.clone(), ln_b.clone());
    reduced!("layer_norm (gain)", ln_g.clone(), |g: &mut GradGraph,
                                                 leaf| {
        let x = g.constant(gx.clone());
        let beta = g.constant(gb2.clone());
        g.layer_norm(x, leaf, beta, 1e-5)
    });
    let gx3 = gx.clone();
    reduced!("layer_norm (bias)", ln_b.clone(), |g: &mut GradGraph,
                                                 leaf| {
        let x = g.constant(gx3.clone());
        let gamma = g.constant(gg2.clone());
        g.layer_norm(x, gamma, leaf, 1e-5)
    });

    // Gather: the leaf is the table; repeated ids exercise accumulation.
    reduced!("gather", rand_point(vec![6, 4], 20), |g: &mut GradGraph,
                                                    leaf| {
        g.gather(leaf, &[0, 3, 3, 5])
    });

    // Scalar-output primitives need no reduction.
    let err = check_primitive("squared_l2", &a, |g, leaf| g.squared_l2(leaf));
    record("squared_l2", err);

    let logits = {
        // Target-peaked logits keep cross-entropy away from vanishing
        // gradients on the probed coordinates.
        let mut t = rand_tensor(vec![3, 6], 21, -0.8, 0.8);
        for (row, &target) in [0usize, 2, 5].iter().enumerate() {
            t.data[row * 6 + target] += 1.0;
        }
        t
    };
    let err = check_primitive("cross_entropy", &logits, |g, leaf| {
        g.cross_entropy(leaf, &[0, 2, 5])
    });
    record("cross_entropy", err);

    let bc = b.clone();
    reduced!("cosine_rows", a.clone(), |g: &mut GradGraph, leaf| {
        let c = g.constant(bc.clone());
        g.cosine_rows(leaf, c)
    });

    // Full bottom stack: d=16, L=2, len=4, loss through both blocks.
    let cfg = ModelConfig {
        vocab_size: 64,
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 8,
    };
    let model = TransformerModel::init_random(cfg, 23).expect("valid config");
    let bottom = model.bottom_view(2).expect("split 2 of 2 layers");
    let ids: Vec<u32> = vec![5, 40, 17, 63];
    let target = bottom.forward(&ids).expect("forward");
    // O(1)-scale probe rather than actual embedding rows: rows of the
    // 0.02-scale embedding table make the first layer norm's curvature
    // large enough to dominate the h = 1e-3 finite-difference estimate.
    let point = rand_spread_point(vec![4, 16], 24);
    let err = grad_check(
        |g, leaf| {
            let pred = bottom
                .build_from_embeddings_on(g, leaf)
                .map_err(|e| panic!("bottom stack build: {e}"))
                .unwrap();
            let t = g.constant(target.clone());
            let d = g.sub(pred, t)?;
            g.squared_l2(d)
        },
        &point,
        1e-3,
    )
    .expect("bottom stack grad_check evaluates");
    assert!(
        err < 1e-3,
        "criterion 1: FAIL — bottom stack max relative gradient error {err:.3e} >= 1e-3"
    );
    record("bottom stack d=16 L=2 len=4", err);

    let dt = t0.elapsed();
    assert!(
        dt.as_secs_f64() < 30.0,
        "criterion 1: FAIL — took {dt:.1?}, budget 30 s"
    );
    println!(
        "criterion 1: PASS — gradients match finite differences; worst {} at {:.2e} (< 1e-3) in {:.1?}",
        worst.0, worst.1, dt
    );
}

// ---- criterion 2: split soundness --------------------------------------------

#[test]
fn criterion_02_split_soundness() {
    let t0 = Instant::now();
    let model = random_desk_model();
    let mut rng = ChaCha12Rng::seed_from_u64(202);
    let mut checked = 0usize;
    for trial in 0..100 {
        let len = rng.random_range(1..=48usize);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..259u32)).collect();
        let full = model.forward_full(&ids).expect("full forward");
        for k in 1..=3usize {
            let bottom = model.bottom_view(k).expect("bottom");
            let top = model.top_view(k).expect("top");
            let h = bottom.forward(&ids).expect("bottom forward");
            let logits = top.forward(&h).expect("top forward");
            assert_eq!(
                full.shape, logits.shape,
                "criterion 2: FAIL — shape mismatch at k={k} trial={trial}"
            );
            for (i, (&a, &b)) in full.data.iter().zip(&logits.data).enumerate() {
                assert_eq!(
                    a.to_bits(),
                    b.to_bits(),
                    "criterion 2: FAIL — logit {i} differs at k={k} trial={trial}: {a} vs {b}"
                );
            }
            checked += 1;
        }
    }
    let dt = t0.elapsed();
    assert!(
        dt.as_secs_f64() < 10.0,
        "criterion 2: FAIL — took {dt:.1?}, budget 10 s"
    );
    println!(
        "criterion 2: PASS — top(bottom(x)) bit-identical to full(x) over {checked} split evaluations in {dt:.1?}"
    );
}

// ---- criterion 3: attack round-trip ------------------------------------------

#[test]
fn criterion_03_attack_roundtrip() {
    let model = trained_model();
    let split = 1usize;
    let user = UserParty::new(model, split).expect("user party");
    let bottom = model.bottom_view(split).expect("bottom");
    let quiet = NoiseSpec {
        sigma: 0.0,
        seed: 0,
    };

    let t0 = Instant::now();
    let mut records = Vec::with_capacity(100);
    let mut stop_rule_ok = true;
    for trial in 0..100u64 {
        let ids = random_bytes(32, 3000 + trial);
        let frame = user.prepare_frame(&ids, &quiet).expect("frame");
        let cfg = AttackConfig {
            seed: 9000 + trial,
            ..desk_attack()
        };
        let result = attack_frame(&bottom, &frame, &cfg).expect("attack runs");
        stop_rule_ok &= result.steps <= 1000 || result.final_cosine >= 0.98;
        records.push(MatchRecord::new(ids, result.recovered).expect("same length"));
    }
    let dt = t0.elapsed();

    let acc = attack_accuracy(&records).expect("non-empty");
    let exact = records.iter().filter(|r| r.is_exact()).count();
    assert!(
        stop_rule_ok,
        "criterion 3: FAIL — a run violated (steps <= 1000 OR cosine >= 0.98)"
    );
    assert!(
        acc >= 0.95,
        "criterion 3: FAIL — token-wise attack accuracy {acc:.4} < 0.95"
    );
    assert!(
        dt.as_secs_f64() < 600.0,
        "criterion 3: FAIL — 100 attacks took {dt:.1?}, budget 10 min"
    );
    println!(
        "criterion 3: PASS — trained model, k=1, sigma=0: accuracy {acc:.4} over 100 random 32-byte inputs ({exact} exact) in {dt:.1?}"
    );
}

// ---- criterion 4: token-recovery oracle --------------------------------------

#[test]
fn criterion_04_token_recovery_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    let mut checked = 0usize;
    for case in 0..1000usize {
        let vocab = rng.random_range(8..=48usize);
        let d = rng.random_range(4..=24usize);
        let table: Vec<f32> = (0..vocab * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let len = rng.random_range(1..=6usize);

        // A third of the queries are exact scaled rows (scale invariance),
        // the rest are perturbed rows or free random vectors.
        let mut query = Vec::with_capacity(len * d);
        for _ in 0..len {
            match case % 3 {
                0 => {
                    let row = rng.random_range(0..vocab);
                    let scale = *[0.25f32, 0.5, 2.0, 7.5].iter().nth(rng.random_range(0..4)).unwrap();
                    query.extend(table[row * d..(row + 1) * d].iter().map(|&v| v * scale));
                }
                1 => {
                    let row = rng.random_range(0..vocab);
                    query.extend(
                        table[row * d..(row + 1) * d]
                            .iter()
                            .map(|&v| v + rng.random_range(-0.05f32..0.05)),
                    );
                }
                _ => query.extend((0..d).map(|_| rng.random_range(-1.0f32..1.0))),
            }
        }
        let q = Tensor::new(vec![len, d], query.clone()).expect("shape");
        let got = recover_tokens(&q, &table, vocab);

        // Independent exhaustive scan with the same tie rule (lowest id wins).
        for (i, &g_tok) in got.iter().enumerate() {
            let qi = &query[i * d..(i + 1) * d];
            let qn: f32 = qi.iter().map(|v| v * v).sum::<f32>().sqrt();
            let mut best = (f32::NEG_INFINITY, 0u32);
            for row in 0..vocab {
                let r = &table[row * d..(row + 1) * d];
                let rn: f32 = r.iter().map(|v| v * v).sum::<f32>().sqrt();
                let dot: f32 = qi.iter().zip(r).map(|(a, b)| a * b).sum();
                let cos = if qn == 0.0 || rn == 0.0 {
                    f32::NEG_INFINITY
                } else {
                    dot / (qn * rn)
                };
                if cos > best.0 {
                    best = (cos, row as u32);
                }
            }
            assert_eq!(
                g_tok, best.1,
                "criterion 4: FAIL — case {case} position {i}: recover_tokens {g_tok} vs scan {}",
                best.1
            );
            checked += 1;
        }
    }
    let dt = t0.elapsed();
    assert!(
        dt.as_secs_f64() < 10.0,
        "criterion 4: FAIL — took {dt:.1?}, budget 10 s"
    );
    println!(
        "criterion 4: PASS — recover_tokens matches exhaustive cosine scan on 1000 tables ({checked} positions, scale-invariance included) in {dt:.1?}"
    );
}

// ---- criterion 5: attack-accuracy metric oracle ------------------------------

#[test]
fn criterion_05_metric_oracle() {
    // The three pinned examples.
    let r1 = MatchRecord::new(vec![1, 2, 3, 4], vec![1, 9, 2, 4]).unwrap(); // 2/4
    let r2 = MatchRecord::new(vec![7, 8], vec![7, 8]).unwrap(); // 2/2
    let two = attack_accuracy(&[r1, r2]).unwrap();
    assert_eq!(two, 0.75, "criterion 5: FAIL — mixed example: {two}");

    let all = attack_accuracy(&[MatchRecord::new(vec![1, 2], vec![1, 2]).unwrap()]).unwrap();
    assert_eq!(all, 1.0, "criterion 5: FAIL — all-match example: {all}");

    let none = attack_accuracy(&[MatchRecord::new(vec![1, 2], vec![3, 4]).unwrap()]).unwrap();
    assert_eq!(none, 0.0, "criterion 5: FAIL — none-match example: {none}");

    // 100 randomized cases, computed independently with integer counting.
    let mut rng = ChaCha12Rng::seed_from_u64(505);
    for case in 0..100 {
        let n = rng.random_range(1..=8usize);
        let mut records = Vec::with_capacity(n);
        let mut direct_sum = 0.0f64;
        for _ in 0..n {
            let len = rng.random_range(1..=12usize);
            let truth: Vec<u32> = (0..len).map(|_| rng.random_range(0..16u32)).collect();
            let recovered: Vec<u32> = truth
                .iter()
                .map(|&t| {
                    if rng.random_bool(0.6) {
                        t
                    } else {
                        rng.random_range(0..16u32)
                    }
                })
                .collect();
            let mut hits = 0usize;
            for (a, b) in truth.iter().zip(&recovered) {
                if a == b {
                    hits += 1;
                }
            }
            direct_sum += hits as f64 / len as f64;
            records.push(MatchRecord::new(truth, recovered).unwrap());
        }
        let direct = direct_sum / n as f64;
        let formula = attack_accuracy(&records).unwrap();
        assert_eq!(
            formula, direct,
            "criterion 5: FAIL — case {case}: formula {formula} vs direct {direct}"
        );
    }
    println!(
        "criterion 5: PASS — attack accuracy matches direct counting on 3 pinned + 100 randomized cases exactly"
    );
}

// ---- criterion 6: baseline comparison ----------------------------------------

#[test]
fn criterion_06_baseline_comparison() {
    let t0 = Instant::now();
    // Synthetic-vocab mode: large vocabulary, small stack.
    let cfg = ModelConfig {
        vocab_size: 4096,
        embed_dim: 64,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 32,
    };
    let model = TransformerModel::init_random(cfg, 606).expect("valid");
    let split = 1usize;
    let bottom = model.bottom_view(split).expect("bottom");

    // Identical budgets for both attacks.
    let budget = AttackConfig {
        max_steps: 300,
        cosine_stop: 0.9999,
        step_size: 0.02,
        filler_token: 0,
        ..AttackConfig::default()
    };

    let mut rng = ChaCha12Rng::seed_from_u64(660);
    let mut two_step = Vec::new();
    let mut baseline = Vec::new();
    for trial in 0..20u64 {
        let len = 8usize;
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..4096u32)).collect();
        let target = bottom.forward(&ids).expect("forward");
        let cfg_t = AttackConfig {
            seed: 7000 + trial,
            ..budget.clone()
        };

        let out = reconstruct_embeddings(&bottom, &target, &cfg_t).expect("two-step");
        let rec = recover_tokens(&out.embeddings, bottom.word_embeddings(), 4096);
        two_step.push(MatchRecord::new(ids.clone(), rec).unwrap());

        let direct = direct_token_baseline(&bottom, &target, &cfg_t).expect("baseline");
        baseline.push(MatchRecord::new(ids, direct.recovered).unwrap());
    }
    let acc_two = attack_accuracy(&two_step).unwrap();
    let acc_base = attack_accuracy(&baseline).unwrap();
    assert!(
        acc_two >= acc_base,
        "criterion 6: FAIL — two-step {acc_two:.4} < direct baseline {acc_base:.4}"
    );
    println!(
        "criterion 6: PASS — two-step {acc_two:.4} vs direct-token baseline {acc_base:.4} (gap {:+.4}) on D=4096 d=64, 20 paired targets, equal budgets, in {:.1?}",
        acc_two - acc_base,
        t0.elapsed()
    );
}

// ---- criterion 7: noise sweep -------------------------------------------------

fn sweep_config(dir: &std::path::Path, name: &str) -> ExperimentConfig {
    ExperimentConfig {
        csv_path: dir.join(format!("{name}.csv")),
        summary_path: None,
        split_layers: vec![1, 3],
        sigmas: vec![0.0, 0.5, 1.0, 2.0, 5.0, 15.0],
        lengths: vec![8, 16, 32, 64, 128],
        noise_sweep_length: 32,
        length_sweep_sigma: 0.0,
        trials: 4,
        base_seed: 42,
        input_source: InputSource::RandomBytes,
        utility_sequences: 8,
        utility_seq_len: 48,
        utility_noise_draws: 20,
        attack: desk_attack(),
        measure_wall_time: false,
        workers: Some(1),
        ..ExperimentConfig::default()
    }
}

/// Mean of `pick` over rows in the (split, sigma, length) cell.
fn cell_mean(
    rows: &[harness::SweepRow],
    split: usize,
    sigma: f32,
    length: usize,
    pick: impl Fn(&harness::SweepRow) -> f64,
) -> f64 {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.split_layer == split && r.sigma == sigma && r.length == length)
        .map(&pick)
        .collect();
    assert!(!vals.is_empty(), "no rows for cell ({split}, {sigma}, {length})");
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn criterion_07_noise_sweep() {
    let t0 = Instant::now();
    let model = trained_model();
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = sweep_config(dir.path(), "noise");
    let rows = run_noise_sweep_with(model, &cfg).expect("noise sweep");

    // Complete grid, written and reparsable.
    assert_eq!(
        rows.len(),
        2 * 6 * cfg.trials,
        "criterion 7: FAIL — expected a complete grid"
    );
    let reread = read_csv(&cfg.csv_path).expect("csv parses");
    assert_eq!(reread.len(), rows.len(), "criterion 7: FAIL — csv row count");

    let shallow_clean = cell_mean(&rows, 1, 0.0, 32, |r| r.attack_acc);
    assert!(
        shallow_clean >= 0.95,
        "criterion 7: FAIL — sigma=0 shallow attack accuracy {shallow_clean:.4} < 0.95"
    );

    // Utility non-increasing in sigma within +-0.05, per split.
    for &split in &[1usize, 3] {
        let mut prev = f64::INFINITY;
        for &sigma in &[0.0f32, 0.5, 1.0, 2.0, 5.0, 15.0] {
            let u = cell_mean(&rows, split, sigma, 32, |r| r.utility_acc);
            assert!(
                u <= prev + 0.05,
                "criterion 7: FAIL — utility rose at split {split} sigma {sigma}: {u:.3} after {prev:.3}"
            );
            prev = u;
        }
    }

    // Soft check: some sigma collapses utility (< 0.1 x clean) while the
    // attack still recovers > 0.3 of tokens. Reported, not asserted.
    let mut flagged = Vec::new();
    for &split in &[1usize, 3] {
        let clean = cell_mean(&rows, split, 0.0, 32, |r| r.utility_acc);
        for &sigma in &[0.5f32, 1.0, 2.0, 5.0, 15.0] {
            let u = cell_mean(&rows, split, sigma, 32, |r| r.utility_acc);
            let a = cell_mean(&rows, split, sigma, 32, |r| r.attack_acc);
            if u < 0.1 * clean && a > 0.3 {
                flagged.push(format!("split {split} sigma {sigma} (attack {a:.2}, utility {u:.3})"));
            }
        }
    }
    let flag_note = if flagged.is_empty() {
        "soft check: no sigma keeps attack > 0.3 after utility collapse".to_string()
    } else {
        format!("soft check flagged: {}", flagged.join("; "))
    };

    println!(
        "criterion 7: PASS — complete 2x6x{} noise sweep; sigma=0 shallow attack {shallow_clean:.4}; utility non-increasing; {flag_note}; in {:.1?}",
        cfg.trials,
        t0.elapsed()
    );
}

// ---- criterion 8: length sweep ------------------------------------------------

fn median(mut v: Vec<u32>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    }
}

#[test]
fn criterion_08_length_sweep() {
    let t0 = Instant::now();
    let model = trained_model();
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = sweep_config(dir.path(), "length");
    let rows = run_length_sweep_with(model, &cfg).expect("length sweep");

    assert_eq!(
        rows.len(),
        2 * 5 * cfg.trials,
        "criterion 8: FAIL — expected a complete grid"
    );
    assert!(
        rows.iter().all(|r| r.steps <= 1000),
        "criterion 8: FAIL — a row exceeded the 1000-step cap"
    );

    let mut lines = Vec::new();
    for &len in &[8usize, 16, 32, 64, 128] {
        let steps_of = |split: usize| -> Vec<u32> {
            rows.iter()
                .filter(|r| r.split_layer == split && r.length == len)
                .map(|r| r.steps)
                .collect()
        };
        let shallow = median(steps_of(1));
        let deep = median(steps_of(3));
        assert!(
            deep >= shallow,
            "criterion 8: FAIL — length {len}: deeper split median {deep} steps < shallower {shallow}"
        );
        lines.push(format!("len {len}: {shallow:.0}/{deep:.0}"));
    }
    println!(
        "criterion 8: PASS — complete 2x5x{} length sweep at sigma=0; median steps shallow/deep per length: {}; in {:.1?}",
        cfg.trials,
        lines.join(", "),
        t0.elapsed()
    );
}

// ---- criterion 9: wire protocol -------------------------------------------------

#[test]
fn criterion_09_wire_protocol() {
    let t0 = Instant::now();
    let model = random_desk_model();
    let split = 2usize;
    let user = UserParty::new(model, split).expect("user");
    let ids = random_bytes(24, 909);
    let noise = NoiseSpec {
        sigma: 0.5,
        seed: 99,
    };

    // Round trip is bit-exact.
    let frame = user.prepare_frame(&ids, &noise).expect("frame");
    let bytes = frame.to_bytes();
    let back = HiddenFrame::from_bytes(&bytes).expect("parses");
    assert_eq!(frame.split_layer, back.split_layer, "criterion 9: FAIL — split");
    assert_eq!(frame.seq_len, back.seq_len, "criterion 9: FAIL — len");
    assert_eq!(
        frame.sigma.to_bits(),
        back.sigma.to_bits(),
        "criterion 9: FAIL — sigma"
    );
    assert_eq!(
        frame.payload.len(),
        back.payload.len(),
        "criterion 9: FAIL — payload size"
    );
    for (a, b) in frame.payload.iter().zip(&back.payload) {
        assert_eq!(a.to_bits(), b.to_bits(), "criterion 9: FAIL — payload bits");
    }

    // Corruption at every byte offset is rejected.
    let mut rejected = 0usize;
    let stride = (bytes.len() / 97).max(1);
    for pos in (0..bytes.len()).step_by(stride) {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x5a;
        if HiddenFrame::from_bytes(&bad).is_err() {
            rejected += 1;
        } else {
            panic!("criterion 9: FAIL — corruption at byte {pos} accepted");
        }
    }

    // Loopback TCP inference equals in-process inference bit for bit.
    let in_process = {
        let mut provider = Provider::new(model, split).expect("provider");
        let mut t = InProcess {
            provider: &mut provider,
        };
        user.infer(&mut t, &ids, &noise).expect("in-process infer")
    };
    let listener = std::net::TcpListener::bind(("127.0.0.1", 0)).expect("bind");
    let port = listener.local_addr().expect("addr").port();
    let over_tcp = std::thread::scope(|s| {
        s.spawn(|| {
            serve(&listener, model, split, Some(1)).expect("serve one");
        });
        let mut t = TcpTransport::connect("127.0.0.1", port).expect("connect");
        user.infer(&mut t, &ids, &noise).expect("tcp infer")
    });
    assert_eq!(in_process.shape, over_tcp.shape, "criterion 9: FAIL — logits shape");
    for (a, b) in in_process.data.iter().zip(&over_tcp.data) {
        assert_eq!(
            a.to_bits(),
            b.to_bits(),
            "criterion 9: FAIL — TCP logits differ from in-process"
        );
    }
    println!(
        "criterion 9: PASS — frame round-trip bit-exact, {rejected} corrupted variants rejected, TCP loopback bit-equal to in-process, in {:.1?}",
        t0.elapsed()
    );
}

// ---- criterion 10: determinism --------------------------------------------------

#[test]
fn criterion_10_determinism() {
    let t0 = Instant::now();
    let model = random_desk_model();
    let dir = tempfile::tempdir().expect("tempdir");

    let small = |name: &str| ExperimentConfig {
        csv_path: dir.path().join(format!("{name}.csv")),
        split_layers: vec![1, 2],
        sigmas: vec![0.0, 1.0],
        noise_sweep_length: 16,
        trials: 2,
        utility_sequences: 4,
        utility_noise_draws: 4,
        ..sweep_config(dir.path(), name)
    };

    let cfg_a = small("run-a");
    let cfg_b = small("run-b");
    run_noise_sweep_with(model, &cfg_a).expect("first run");
    run_noise_sweep_with(model, &cfg_b).expect("second run");
    let a = std::fs::read(&cfg_a.csv_path).expect("read a");
    let b = std::fs::read(&cfg_b.csv_path).expect("read b");
    assert!(
        a == b,
        "criterion 10: FAIL — identical configs produced different CSV bytes"
    );
    assert!(!a.is_empty(), "criterion 10: FAIL — empty CSV");
    println!(
        "criterion 10: PASS — repeated sweep produced byte-identical CSV ({} bytes) in {:.1?}",
        a.len(),
        t0.elapsed()
    );
}

// ---- reference model quality ----------------------------------------------------

/// Not a numbered criterion: pins the reference recipe's held-out utility so
/// regressions in training or corpus generation surface here.
#[test]
fn reference_model_utility() {
    let model = trained_model();
    let held_out = corpus::held_out_patterns(16, 48, REF_SEED);
    let refs: Vec<&[u32]> = held_out.iter().map(|s| s.as_slice()).collect();
    let utility = model
        .utility_accuracy(&refs, 1, 0.0, REF_SEED, 1)
        .expect("utility evaluates");
    assert!(
        utility > 0.9,
        "reference model held-out next-token accuracy {utility:.3} <= 0.9"
    );
    println!("reference model: held-out next-token accuracy {utility:.3} (> 0.9)");

    // The reconstruction demo in the README decodes recognizably; check the
    // tokenizer round-trip used there.
    let v = Vocab::new();
    let text = "split inference leaks";
    let ids = v.encode(text.as_bytes());
    assert_eq!(v.decode_display(&ids), text);
}
