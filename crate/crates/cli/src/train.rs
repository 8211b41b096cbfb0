//! Training loop with per-epoch checkpoints, resumption and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use jacmatch::autodiff::{backward, Tape};
use jacmatch::data::{add_input_noise, generate, read_image_binary, subset_per_class, Dataset};
use jacmatch::losses::{composite_loss, match_attention_jacobians, tap_side, NetModel};
use jacmatch::nn::{read_tensors, Head, Network, Param};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::optim::{self, OptimizerState};

const NOISE_STREAM: u64 = 0x6e6f_6973_65;
const EVAL_BATCH: usize = 256;

/// Mean of one loss term over an epoch's batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermLog {
    pub name: String,
    pub weight: f64,
    pub raw: f64,
    pub weighted: f64,
    pub degenerate: usize,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub terms: Vec<TermLog>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub sigma: f64,
    pub accuracy: f64,
}

/// Attention-Jacobian loss at one tap pair before and after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianReduction {
    pub teacher_tap: usize,
    pub student_tap: usize,
    pub window: usize,
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
    /// `(initial - final) / initial * 100`.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    /// Percent correct on the clean test set, labelled head.
    pub test_accuracy: f64,
    pub robustness: Vec<RobustnessPoint>,
    pub jacobian_reduction: Vec<JacobianReduction>,
    /// Largest number of tape nodes recorded by differentiable backward
    /// passes in one step; nonzero when gradients of gradients were used.
    pub second_order_nodes: usize,
    /// SHA-256 of the final parameters.
    pub param_digest: String,
}

/// Progress saved after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    config_hash: String,
    seed: u64,
    epochs_done: usize,
    optimizer: OptimizerState,
    logs: Vec<EpochLog>,
    initial_jacobian: Vec<f64>,
    second_order_nodes: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from `state.json` in the run directory when present.
    pub resume: bool,
    /// Return after this many epochs in total, as if interrupted.
    pub stop_after: Option<usize>,
}

/// Datasets and networks for one seed, ready to train.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub teacher: Option<Network>,
    pub student: Network,
}

/// Normalized train and test splits (test uses the training statistics).
pub fn load_data(cfg: &ExperimentConfig) -> CliResult<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic { task, seed } => {
            let (mut train, mut test) = generate(task, *seed).map_err(|e| CliError::Config(e.to_string()))?;
            train.normalize()?;
            test.normalize_with(train.stats().expect("normalized"))?;
            Ok((train, test))
        }
        DataSource::Binary { train, test, layout } => {
            let mut train = read_image_binary(train, *layout)?;
            let mut test = read_image_binary(test, *layout)?;
            train.normalize()?;
            test.normalize_with(train.stats().expect("normalized"))?;
            Ok((train, test))
        }
    }
}

/// Teacher network restored from its checkpoint.
pub fn load_teacher(cfg: &ExperimentConfig, input_shape: &[usize]) -> CliResult<Option<Network>> {
    let Some(t) = &cfg.teacher else { return Ok(None) };
    let entries = read_tensors(&t.checkpoint)
        .map_err(|e| CliError::Config(format!("teacher checkpoint {}: {e}", t.checkpoint.display())))?;
    let k = entries
        .iter()
        .find(|(n, _)| n == "head.source.bias")
        .map(|(_, p)| p.data.len())
        .ok_or_else(|| CliError::Config("teacher checkpoint has no head.source.bias".into()))?;
    let net = t
        .architecture
        .build(input_shape, k, None, 0)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let net = net
        .with_named_params(&entries)
        .map_err(|e| CliError::Config(format!("teacher checkpoint: {e}")))?;
    Ok(Some(net))
}

/// Replaces parameters whose names appear in `entries`; others keep their
/// values. A name with a different shape is rejected.
pub fn partial_load(net: &Network, entries: &[(String, Param)]) -> CliResult<Network> {
    let mut merged = Vec::new();
    let mut hits = 0;
    for (name, p) in net.param_names().into_iter().zip(net.params()) {
        match entries.iter().find(|(n, _)| *n == name) {
            Some((_, q)) if q.shape == p.shape => {
                merged.push((name, q.clone()));
                hits += 1;
            }
            Some((_, q)) => {
                return Err(CliError::Config(format!(
                    "init checkpoint entry {name} has shape {:?}, student expects {:?}",
                    q.shape, p.shape
                )))
            }
            None => merged.push((name, p)),
        }
    }
    if hits == 0 {
        return Err(CliError::Config("init checkpoint shares no parameters with the student".into()));
    }
    Ok(net.with_named_params(&merged)?)
}

/// Builds data and networks for `seed` and checks that they fit together.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> CliResult<Prepared> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let train = match cfg.subset_per_class {
        Some(n) => subset_per_class(&train, n, seed).map_err(|e| CliError::Config(e.to_string()))?,
        None => train,
    };
    let shape = train.sample_shape().to_vec();
    let teacher = load_teacher(cfg, &shape)?;
    let classes = train.classes();
    let (k, target) = if cfg.student.two_headed {
        let t = teacher.as_ref().expect("validated");
        (t.outputs(Head::Source)?, Some(classes))
    } else {
        (classes, None)
    };
    let mut student = cfg
        .student
        .architecture
        .build(&shape, k, target, seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(p) = &cfg.student.init_from {
        let entries = read_tensors(p).map_err(|e| CliError::Config(format!("init checkpoint {}: {e}", p.display())))?;
        student = partial_load(&student, &entries)?;
    }
    if let Some(t) = &teacher {
        let to = t.outputs(Head::Source)?;
        let so = student.outputs(cfg.loss.match_head)?;
        if cfg.loss.needs_teacher() && to != so {
            return Err(CliError::Config(format!(
                "teacher has {to} outputs, student {} head has {so}",
                cfg.loss.match_head.name()
            )));
        }
        for &(ti, si) in &cfg.loss.tap_pairs {
            let ts = tap_shape(t, ti, "teacher")?;
            let ss = tap_shape(&student, si, "student")?;
            if ts[1..] != ss[1..] {
                return Err(CliError::Config(format!(
                    "tap pair ({ti}, {si}): teacher feature shape {ts:?} and student feature shape {ss:?} differ spatially"
                )));
            }
        }
    }
    Ok(Prepared {
        train,
        test,
        teacher,
        student,
    })
}

fn tap_shape(net: &Network, tap: usize, who: &str) -> CliResult<Vec<usize>> {
    let pos = net
        .feature_taps()
        .get(tap)
        .ok_or_else(|| CliError::Config(format!("{who} has no feature tap {tap}")))?;
    let shape = net.trunk_shape(*pos).expect("tap is a trunk position").to_vec();
    if shape.len() != 3 {
        return Err(CliError::Config(format!("{who} tap {tap} is not a feature map ({shape:?})")));
    }
    Ok(shape)
}

/// Percent of `ds` whose argmax logit on `head` equals the label.
pub fn accuracy(net: &Network, ds: &Dataset, head: Head) -> CliResult<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = ds.batch(chunk)?;
        let logits = net.forward(&x, head)?;
        let k = logits.shape()[1];
        for (row, &l) in logits.data().chunks(k).zip(&labels) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            if best.0 == l {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Attention-Jacobian loss at each configured tap pair on a fixed batch.
fn jacobian_losses(cfg: &ExperimentConfig, p: &Prepared, student: &Network) -> CliResult<Vec<(usize, f64)>> {
    let Some(teacher) = &p.teacher else { return Ok(Vec::new()) };
    let n = cfg.eval_examples.min(p.train.len());
    let (x, _) = p.train.batch(&(0..n).collect::<Vec<_>>())?;
    let mut out = Vec::new();
    for &(ti, si) in &cfg.loss.tap_pairs {
        let w = cfg.loss.jac_strategy.window(tap_side(teacher, ti)?)?;
        let tape = Tape::new();
        let tm = NetModel::frozen(teacher, Head::Source);
        let sm = NetModel::frozen(student, cfg.loss.match_head);
        let (v, _, _) = match_attention_jacobians(&tm, &sm, &x, &tape, (ti, si), w)?;
        out.push((w, v.item()));
    }
    Ok(out)
}

pub fn param_digest(net: &Network) -> String {
    let mut h = Sha256::new();
    for p in net.params() {
        for v in &p.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn noise_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ NOISE_STREAM ^ i as u64
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn run_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed-{seed}"))
}

/// Trains one seed in `dir`. Returns `None` when stopped early by
/// `opts.stop_after`.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path, opts: TrainOptions) -> CliResult<Option<RunResult>> {
    let started = Instant::now();
    let hash = cfg.hash()?;
    let prepared = prepare(cfg, seed)?;
    std::fs::create_dir_all(dir)?;
    let state_path = dir.join("state.json");
    let ckpt_path = dir.join("student.ckpt");
    let ospec = cfg.optimizer();

    let (mut student, mut state) = if opts.resume && state_path.exists() {
        let state: TrainState = serde_json::from_str(&std::fs::read_to_string(&state_path)?)?;
        if state.config_hash != hash || state.seed != seed {
            return Err(CliError::Config(format!(
                "checkpoint in {} belongs to another config or seed",
                dir.display()
            )));
        }
        (prepared.student.load(&ckpt_path)?, state)
    } else {
        let initial = jacobian_losses(cfg, &prepared, &prepared.student)?;
        let state = TrainState {
            config_hash: hash.clone(),
            seed,
            epochs_done: 0,
            optimizer: OptimizerState::new(&prepared.student.params()),
            logs: Vec::new(),
            initial_jacobian: initial.into_iter().map(|(_, v)| v).collect(),
            second_order_nodes: 0,
        };
        (prepared.student.clone(), state)
    };

    let teacher = prepared.teacher.as_ref();
    let n = prepared.train.len();
    for epoch in state.epochs_done..cfg.epochs {
        if opts.stop_after.is_some_and(|s| epoch >= s) {
            return Ok(None);
        }
        let order = epoch_order(n, seed, epoch);
        let mut sums: Vec<TermLog> = Vec::new();
        let mut total = 0.0;
        let mut warnings: Vec<String> = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = prepared.train.batch(chunk)?;
            let tape = Tape::new();
            let leaves = student.leaves(&tape);
            let loss = composite_loss(&cfg.loss, &x, &labels, &tape, teacher, &student, &leaves)
                .map_err(|source| CliError::Numeric { epoch, source })?;
            state.second_order_nodes = state.second_order_nodes.max(tape.backward_recorded_nodes());
            let grads = backward(&loss.total, &leaves.iter().collect::<Vec<_>>(), false)
                .map_err(|e| CliError::Numeric { epoch, source: e.into() })?;
            let grads: Vec<Vec<f64>> = grads.iter().map(|g| g.value.to_vec()).collect();
            if let Some(bad) = grads.iter().flatten().find(|v| !v.is_finite()) {
                return Err(CliError::Numeric {
                    epoch,
                    source: jacmatch::Error::NonFinite {
                        term: "gradient".into(),
                        value: *bad,
                    },
                });
            }
            let w = chunk.len() as f64 / n as f64;
            total += w * loss.total.item();
            for t in &loss.terms {
                match sums.iter_mut().find(|s| s.name == t.name) {
                    Some(s) => {
                        s.raw += w * t.raw;
                        s.weighted += w * t.weighted;
                        s.degenerate += t.degenerate;
                        s.clamped += t.clamped;
                    }
                    None => sums.push(TermLog {
                        name: t.name.clone(),
                        weight: t.weight,
                        raw: w * t.raw,
                        weighted: w * t.weighted,
                        degenerate: t.degenerate,
                        clamped: t.clamped,
                    }),
                }
                if let Some(msg) = &t.warning {
                    if !warnings.contains(msg) {
                        warnings.push(msg.clone());
                    }
                }
            }
            let mut params = student.params();
            optim::step(&ospec, &mut state.optimizer, &mut params, &grads, epoch);
            student = student.with_params(params)?;
        }
        state.logs.push(EpochLog {
            epoch,
            lr: ospec.lr_at(epoch),
            total,
            terms: sums,
            warnings,
        });
        state.epochs_done = epoch + 1;
        student.save(&ckpt_path)?;
        write_json(&state_path, &state)?;
    }

    let head = cfg.loss.ce_head;
    let test_accuracy = accuracy(&student, &prepared.test, head)?;
    let mut robustness = Vec::new();
    for (i, &sigma) in cfg.test_sigmas.iter().enumerate() {
        let acc = if sigma == 0.0 {
            test_accuracy
        } else {
            accuracy(&student, &add_input_noise(&prepared.test, sigma, noise_seed(seed, i))?, head)?
        };
        robustness.push(RobustnessPoint { sigma, accuracy: acc });
    }
    let finals = jacobian_losses(cfg, &prepared, &student)?;
    let jacobian_reduction = cfg
        .loss
        .tap_pairs
        .iter()
        .zip(finals)
        .zip(&state.initial_jacobian)
        .map(|((&(ti, si), (w, f)), &i)| JacobianReduction {
            teacher_tap: ti,
            student_tap: si,
            window: w,
            initial: i,
            final_value: f,
            percent: if i > 0.0 { (i - f) / i * 100.0 } else { 0.0 },
        })
        .collect();
    let result = RunResult {
        name: cfg.name.clone(),
        config_hash: hash,
        seed,
        epochs: state.logs.clone(),
        test_accuracy,
        robustness,
        jacobian_reduction,
        second_order_nodes: state.second_order_nodes,
        param_digest: param_digest(&student),
    };
    write_json(&dir.join("result.json"), &result)?;
    write_epoch_csv(&dir.join("epochs.csv"), &result.epochs)?;
    std::fs::write(
        dir.join("timing.txt"),
        format!("wall_clock_seconds {}\n", started.elapsed().as_secs_f64()),
    )?;
    Ok(Some(result))
}

fn write_epoch_csv(path: &Path, logs: &[EpochLog]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "term", "weight", "raw", "weighted", "degenerate", "clamped"])?;
    for log in logs {
        for t in &log.terms {
            w.write_record([
                log.epoch.to_string(),
                log.lr.to_string(),
                t.name.clone(),
                t.weight.to_string(),
                t.raw.to_string(),
                t.weighted.to_string(),
                t.degenerate.to_string(),
                t.clamped.to_string(),
            ])?;
        }
        w.write_record([
            log.epoch.to_string(),
            log.lr.to_string(),
            "total".into(),
            String::new(),
            String::new(),
            log.total.to_string(),
            String::new(),
            String::new(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every seed of `cfg` on a pool of `jobs` threads; results follow the
/// seed order.
pub fn train_all(cfg: &ExperimentConfig, out_dir: &Path, jobs: usize, opts: TrainOptions) -> CliResult<Vec<RunResult>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let runs: Vec<CliResult<Option<RunResult>>> = pool.install(|| {
        use rayon::prelude::*;
        cfg.seeds
            .par_iter()
            .map(|&s| train_seed(cfg, s, &run_dir(out_dir, s), opts))
            .collect()
    });
    let mut out = Vec::new();
    for r in runs {
        if let Some(r) = r? {
            out.push(r);
        }
    }
    Ok(out)
}
