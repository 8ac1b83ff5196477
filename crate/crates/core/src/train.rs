//! Training loop (Adam + reduce-on-plateau), evaluation metrics, and the
//! checkpoint glue that makes runs resumable bit-for-bit.
//!
//! The loss is MSE in normalized elevation space; all reported metrics are
//! meters after denormalization. Batches are processed sample-by-sample on
//! independent graphs and their gradients averaged in a fixed order, so
//! results are bitwise reproducible regardless of the worker thread count
//! (capped by `DEMSR_THREADS`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Archive, Record};
use crate::data::{normalize_pairs, Grid, NormStats, TilePair};
use crate::error::{Error, Result};
use crate::interp::{self, InterpMethod};
use crate::model::{Model, ModelConfig, Param, StageSpec, UpSpec};
use crate::ops;
use crate::tensor::{Element, Graph, Shape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub plateau_threshold: f64,
    pub min_lr: f64,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 4,
            max_epochs: 100,
            plateau_patience: 10,
            plateau_factor: 0.1,
            plateau_threshold: 1e-4,
            min_lr: 1e-6,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must be in (0, 1)".into()));
        }
        if self.plateau_patience < 1 {
            return Err(Error::Config("plateau_patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

// ── Adam ────────────────────────────────────────────────────────────────────

/// First/second moment buffers mirroring the parameter list, plus the shared
/// step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn for_params(params: &[Param<T>]) -> AdamState<T> {
        AdamState {
            m: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over all parameters. Gradients must be
/// populated; the step counter increments exactly once.
pub fn adam_step<T: Element>(
    params: &mut [Param<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam state tracks {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let b1 = T::from_f64(ADAM_BETA1);
    let b2 = T::from_f64(ADAM_BETA2);
    let one_m_b1 = T::from_f64(1.0 - ADAM_BETA1);
    let one_m_b2 = T::from_f64(1.0 - ADAM_BETA2);
    let inv_c1 = T::from_f64(1.0 / c1);
    let inv_c2 = T::from_f64(1.0 / c2);
    let eps = T::from_f64(ADAM_EPS);
    let lr_t = T::from_f64(lr);

    for (i, param) in params.iter_mut().enumerate() {
        let grad = param.grad.as_ref().ok_or_else(|| {
            Error::Contract(format!("adam_step: parameter '{}' has no gradient", param.name))
        })?;
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = param.value.data_mut();
        for (((p, g), mi), vi) in data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_m_b1 * *g;
            *vi = b2 * *vi + one_m_b2 * *g * *g;
            let m_hat = *mi * inv_c1;
            let v_hat = *vi * inv_c2;
            *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ── Plateau scheduler ───────────────────────────────────────────────────────

/// Reduce-on-plateau: an epoch improves when its loss beats the best by a
/// relative threshold; after more than `patience` consecutive non-improving
/// epochs the rate is multiplied by `factor` (floored at `min_lr`) and the
/// counter resets. The rate never increases.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    threshold: f64,
    min_lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> PlateauScheduler {
        PlateauScheduler {
            lr: cfg.learning_rate,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            threshold: cfg.plateau_threshold,
            min_lr: cfg.min_lr,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn restore(cfg: &TrainConfig, lr: f64, best: Option<f64>, bad_epochs: usize) -> Self {
        let mut s = PlateauScheduler::new(cfg);
        s.lr = lr;
        s.best = best;
        s.bad_epochs = bad_epochs;
        s
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    /// Feeds one epoch loss; returns the rate for the next epoch.
    pub fn step(&mut self, epoch_loss: f64) -> Result<f64> {
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch loss is {epoch_loss}; training aborted"
            )));
        }
        let improved = match self.best {
            None => true,
            Some(best) => epoch_loss < best * (1.0 - self.threshold),
        };
        if improved {
            self.best = Some(epoch_loss);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        Ok(self.lr)
    }
}

// ── Worker threads ──────────────────────────────────────────────────────────

/// Worker-thread cap from `DEMSR_THREADS` (default 1). Parallel sections
/// produce results identical to sequential execution, so this only affects
/// wall time.
pub fn thread_count() -> usize {
    std::env::var("DEMSR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map(|v| v.max(1))
        .unwrap_or(1)
}

fn par_map<I, R, F>(items: &[I], threads: usize, f: F) -> Result<Vec<R>>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> Result<R> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(|i| f(i)).collect();
    }
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("worker filled slot"))
        .collect()
}

// ── Fit ─────────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
}

pub fn format_history_row(row: &EpochRow) -> String {
    format!("{},{:.8e},{:.8e}", row.epoch, row.train_loss, row.lr)
}

/// Dynamic training state carried across a resume.
pub struct ResumePoint {
    pub adam: AdamState<f32>,
    pub scheduler_lr: f64,
    pub scheduler_best: Option<f64>,
    pub scheduler_bad_epochs: usize,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub best_loss: Option<f64>,
}

pub struct FitOptions<'a> {
    /// When set, history.csv and checkpoint_latest/best.ev2d land here.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<ResumePoint>,
    /// Per-epoch progress lines on stderr.
    pub progress: bool,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        FitOptions {
            out_dir: None,
            resume: None,
            progress: false,
        }
    }
}

pub struct FitResult {
    pub history: Vec<EpochRow>,
    pub best_loss: f64,
}

fn run_sample(
    model: &Model<f32>,
    lr: &Tensor<f32>,
    hr: &Tensor<f32>,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, lr)?;
    let target = g.constant(hr.detached());
    let loss = ops::mse_loss(&mut g, pass.output, target)?;
    g.backward(loss)?;
    let loss_val = g.value(loss).data()[0] as f64;
    let grads = pass
        .param_vars
        .iter()
        .enumerate()
        .map(|(i, v)| {
            g.grad(*v)
                .map(|s| s.to_vec())
                .ok_or_else(|| {
                    Error::Contract(format!(
                        "parameter '{}' received no gradient",
                        model.params()[i].name
                    ))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_val, grads))
}

/// Trains the model on shuffled minibatches of normalized tile pairs,
/// checkpointing every epoch. Identical seeds give bitwise-identical
/// histories; resuming from a checkpoint reproduces the uninterrupted run.
pub fn fit(
    model: &mut Model<f32>,
    pairs: &[TilePair],
    norm: &NormStats,
    cfg: &TrainConfig,
    opts: FitOptions<'_>,
) -> Result<FitResult> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Contract("fit: no training pairs".into()));
    }

    let normalized = normalize_pairs(pairs, norm);
    let tensors: Vec<(Tensor<f32>, Tensor<f32>)> = normalized
        .iter()
        .map(|p| (p.lr.to_tensor::<f32>(), p.hr.to_tensor::<f32>()))
        .collect();

    let (mut adam, mut scheduler, mut rng, start_epoch, mut best_loss) = match opts.resume {
        Some(r) => (
            r.adam,
            PlateauScheduler::restore(cfg, r.scheduler_lr, r.scheduler_best, r.scheduler_bad_epochs),
            r.rng,
            r.epoch,
            r.best_loss,
        ),
        None => (
            AdamState::for_params(model.params()),
            PlateauScheduler::new(cfg),
            ChaCha8Rng::seed_from_u64(cfg.seed),
            0,
            None,
        ),
    };

    let threads = if cfg.deterministic { 1 } else { thread_count() };
    let mut history_file = match opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = BufWriter::new(File::create(dir.join("history.csv"))?);
            writeln!(f, "epoch,train_loss,lr")?;
            Some(f)
        }
        None => None,
    };

    let mut history = Vec::new();
    let sample_count = tensors.len();

    for epoch in (start_epoch + 1)..=cfg.max_epochs {
        let lr_used = scheduler.lr();
        let mut order: Vec<usize> = (0..sample_count).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grads();
            let results = par_map(batch, threads, |&i| {
                run_sample(model, &tensors[i].0, &tensors[i].1)
            })?;
            let scale = 1.0 / batch.len() as f64;
            let scale_t = scale as f32;
            for (loss, grads) in &results {
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "batch loss is {loss} at epoch {epoch}; last-good checkpoint retained"
                    )));
                }
                loss_sum += *loss;
                for (param, g) in model.params_mut().iter_mut().zip(grads) {
                    match &mut param.grad {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(g) {
                                *a += *v * scale_t;
                            }
                        }
                        slot => *slot = Some(g.iter().map(|v| *v * scale_t).collect()),
                    }
                }
            }
            adam_step(model.params_mut(), &mut adam, lr_used)?;
        }
        model.zero_grads();

        let epoch_loss = loss_sum / sample_count as f64;
        let row = EpochRow {
            epoch,
            train_loss: epoch_loss,
            lr: lr_used,
        };
        history.push(row);
        if let Some(f) = &mut history_file {
            writeln!(f, "{}", format_history_row(&row))?;
            f.flush()?;
        }

        scheduler.step(epoch_loss)?;

        let improved = best_loss.map_or(true, |b| epoch_loss < b);
        if improved {
            best_loss = Some(epoch_loss);
        }
        if let Some(dir) = opts.out_dir {
            let snapshot = TrainSnapshot {
                model,
                adam: &adam,
                scheduler: &scheduler,
                rng: &rng,
                epoch,
                best_loss,
            };
            save_training_checkpoint(&dir.join("checkpoint_latest.ev2d"), &snapshot, norm)?;
            if improved {
                save_training_checkpoint(&dir.join("checkpoint_best.ev2d"), &snapshot, norm)?;
            }
        }
    }

    Ok(FitResult {
        history,
        best_loss: best_loss.unwrap_or(f64::INFINITY),
    })
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRow>> {
    let f = File::open(path)?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: idx + 1,
                message: "history rows are epoch,train_loss,lr".into(),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                message: format!("bad number '{s}'"),
            })
        };
        rows.push(EpochRow {
            epoch: parts[0].parse().map_err(|_| Error::Parse {
                line: idx + 1,
                message: format!("bad epoch '{}'", parts[0]),
            })?,
            train_loss: parse(parts[1])?,
            lr: parse(parts[2])?,
        });
    }
    Ok(rows)
}

// ── Checkpoint glue ─────────────────────────────────────────────────────────

fn interp_code(m: InterpMethod) -> u32 {
    match m {
        InterpMethod::Bilinear => 0,
        InterpMethod::Bicubic => 1,
    }
}

fn interp_from_code(c: u32) -> Result<InterpMethod> {
    match c {
        0 => Ok(InterpMethod::Bilinear),
        1 => Ok(InterpMethod::Bicubic),
        other => Err(Error::Format(format!("unknown interpolation code {other}"))),
    }
}

/// Architecture description stored alongside the parameters so a checkpoint
/// alone suffices to rebuild the network.
fn config_records(cfg: &ModelConfig) -> Vec<Record> {
    let stage_u32 = |f: fn(&StageSpec) -> u32| -> Vec<u32> { cfg.stages.iter().map(f).collect() };
    let n = cfg.stages.len() as u32;
    let mk = |name: &str, v: Vec<u32>| {
        Record::new(name, vec![v.len() as u32], crate::checkpoint::Payload::U32(v)).expect("config record")
    };
    vec![
        Record::scalar_u32("config.stem_channels", cfg.stem_channels as u32),
        mk("config.stage_channels", stage_u32(|s| s.out_channels as u32)),
        mk("config.stage_expansion", stage_u32(|s| s.expansion_ratio as u32)),
        mk("config.stage_layers", stage_u32(|s| s.num_layers as u32)),
        mk("config.stage_kernel", stage_u32(|s| s.kernel as u32)),
        Record::new(
            "config.stage_se_ratio",
            vec![n],
            crate::checkpoint::Payload::F64(cfg.stages.iter().map(|s| s.se_ratio).collect()),
        )
        .expect("config record"),
        mk(
            "config.up1",
            vec![
                cfg.up1.in_channels as u32,
                cfg.up1.out_channels as u32,
                cfg.up1.factor as u32,
            ],
        ),
        mk(
            "config.up2",
            vec![
                cfg.up2.in_channels as u32,
                cfg.up2.out_channels as u32,
                cfg.up2.factor as u32,
            ],
        ),
        Record::scalar_u32("config.skip_interpolation", interp_code(cfg.skip_interpolation)),
        Record::scalar_u32("config.final_kernel", cfg.final_kernel as u32),
        Record::scalar_f64("config.leaky_slope", cfg.leaky_slope),
        Record::scalar_u32("config.scale_factor", cfg.scale_factor as u32),
        Record::bytes("config.seed", cfg.seed.to_le_bytes().to_vec()),
    ]
}

fn config_from_records(records: &[Record]) -> Result<ModelConfig> {
    let u32s = |name: &str| -> Result<Vec<u32>> {
        Ok(Archive::find(records, name)?.as_u32_slice()?.to_vec())
    };
    let one_u32 = |name: &str| -> Result<u32> {
        let v = u32s(name)?;
        v.first().copied().ok_or_else(|| Error::Format(format!("empty record '{name}'")))
    };
    let channels = u32s("config.stage_channels")?;
    let expansion = u32s("config.stage_expansion")?;
    let layers = u32s("config.stage_layers")?;
    let kernels = u32s("config.stage_kernel")?;
    let se_ratio = Archive::find(records, "config.stage_se_ratio")?.as_f64_slice()?.to_vec();
    if [expansion.len(), layers.len(), kernels.len(), se_ratio.len()]
        .iter()
        .any(|&l| l != channels.len())
    {
        return Err(Error::Format("stage config arrays disagree on length".into()));
    }
    let stages = (0..channels.len())
        .map(|i| StageSpec {
            out_channels: channels[i] as usize,
            expansion_ratio: expansion[i] as usize,
            num_layers: layers[i] as usize,
            kernel: kernels[i] as usize,
            stride: 1,
            se_ratio: se_ratio[i],
        })
        .collect();
    let up = |name: &str| -> Result<UpSpec> {
        let v = u32s(name)?;
        if v.len() != 3 {
            return Err(Error::Format(format!("record '{name}' needs 3 values")));
        }
        Ok(UpSpec {
            in_channels: v[0] as usize,
            out_channels: v[1] as usize,
            factor: v[2] as usize,
        })
    };
    let seed_bytes = Archive::find(records, "config.seed")?.as_bytes()?;
    let seed = u64::from_le_bytes(
        seed_bytes
            .try_into()
            .map_err(|_| Error::Format("config.seed must be 8 bytes".into()))?,
    );
    Ok(ModelConfig {
        stem_channels: one_u32("config.stem_channels")? as usize,
        stages,
        up1: up("config.up1")?,
        up2: up("config.up2")?,
        skip_interpolation: interp_from_code(one_u32("config.skip_interpolation")?)?,
        final_kernel: one_u32("config.final_kernel")? as usize,
        leaky_slope: Archive::find(records, "config.leaky_slope")?.as_f64_slice()?[0],
        scale_factor: one_u32("config.scale_factor")? as usize,
        seed,
    })
}

fn model_records(model: &Model<f32>) -> Vec<Record> {
    let mut records = config_records(model.config());
    for p in model.params() {
        records.push(Record::from_tensor(&p.name, &p.value));
    }
    records
}

fn model_from_records(records: &[Record]) -> Result<Model<f32>> {
    let config = config_from_records(records)?;
    let mut model = Model::build(config)?;
    for p in records {
        if p.name.starts_with("config.") {
            continue;
        }
        let tensor: Tensor<f32> = p.to_tensor()?;
        model.set_param(&p.name, tensor).map_err(|e| {
            Error::Format(format!("checkpoint parameter mismatch: {e}"))
        })?;
    }
    // Every model parameter must have been present.
    for param in model.params() {
        if !records.iter().any(|r| r.name == param.name) {
            return Err(Error::Format(format!(
                "checkpoint is missing parameter '{}'",
                param.name
            )));
        }
    }
    Ok(model)
}

struct TrainSnapshot<'a> {
    model: &'a Model<f32>,
    adam: &'a AdamState<f32>,
    scheduler: &'a PlateauScheduler,
    rng: &'a ChaCha8Rng,
    epoch: usize,
    best_loss: Option<f64>,
}

fn rng_state_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(48);
    bytes.extend_from_slice(&rng.get_seed());
    bytes.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    bytes
}

fn rng_from_state(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 48 {
        return Err(Error::Format(format!(
            "rng.state must be 48 bytes, got {}",
            bytes.len()
        )));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[..32]);
    let mut pos = [0u8; 16];
    pos.copy_from_slice(&bytes[32..]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(u128::from_le_bytes(pos));
    Ok(rng)
}

fn save_training_checkpoint(path: &Path, snap: &TrainSnapshot<'_>, norm: &NormStats) -> Result<()> {
    let mut optimizer = Vec::new();
    for (i, p) in snap.model.params().iter().enumerate() {
        let s = p.value.shape();
        let dims = vec![s.n as u32, s.c as u32, s.h as u32, s.w as u32];
        optimizer.push(
            Record::new(
                format!("adam.m.{}", p.name),
                dims.clone(),
                crate::checkpoint::Payload::F32(snap.adam.m[i].clone()),
            )
            .expect("moment dims"),
        );
        optimizer.push(
            Record::new(
                format!("adam.v.{}", p.name),
                dims,
                crate::checkpoint::Payload::F32(snap.adam.v[i].clone()),
            )
            .expect("moment dims"),
        );
    }
    optimizer.push(Record::scalar_u32("adam.t", snap.adam.t as u32));
    optimizer.push(Record::scalar_f64("sched.lr", snap.scheduler.lr()));
    optimizer.push(Record::scalar_u32(
        "sched.has_best",
        snap.scheduler.best().is_some() as u32,
    ));
    optimizer.push(Record::scalar_f64(
        "sched.best",
        snap.scheduler.best().unwrap_or(0.0),
    ));
    optimizer.push(Record::scalar_u32(
        "sched.bad_epochs",
        snap.scheduler.bad_epochs() as u32,
    ));
    optimizer.push(Record::scalar_u32("train.epoch", snap.epoch as u32));
    optimizer.push(Record::scalar_u32(
        "train.has_best_loss",
        snap.best_loss.is_some() as u32,
    ));
    optimizer.push(Record::scalar_f64(
        "train.best_loss",
        snap.best_loss.unwrap_or(0.0),
    ));
    optimizer.push(Record::bytes("rng.state", rng_state_bytes(snap.rng)));

    let archive = Archive {
        params: model_records(snap.model),
        optimizer,
        norm: vec![
            Record::scalar_f64("norm.mean", norm.mean),
            Record::scalar_f64("norm.std", norm.std),
        ],
    };
    crate::checkpoint::write_archive(path, &archive)
}

/// Writes a checkpoint holding just the model and normalization constants
/// (no optimizer state), e.g. for distributing a trained network.
pub fn save_model_checkpoint(path: &Path, model: &Model<f32>, norm: &NormStats) -> Result<()> {
    let archive = Archive {
        params: model_records(model),
        optimizer: Vec::new(),
        norm: vec![
            Record::scalar_f64("norm.mean", norm.mean),
            Record::scalar_f64("norm.std", norm.std),
        ],
    };
    crate::checkpoint::write_archive(path, &archive)
}

fn norm_from_archive(archive: &Archive) -> Result<NormStats> {
    Ok(NormStats {
        mean: Archive::find(&archive.norm, "norm.mean")?.as_f64_slice()?[0],
        std: Archive::find(&archive.norm, "norm.std")?.as_f64_slice()?[0],
    })
}

/// Loads a model and its normalization constants for inference.
pub fn load_model(path: &Path) -> Result<(Model<f32>, NormStats)> {
    let archive = crate::checkpoint::read_archive(path)?;
    let model = model_from_records(&archive.params)?;
    let norm = norm_from_archive(&archive)?;
    Ok((model, norm))
}

/// Loads everything needed to continue training exactly where a run stopped.
pub fn load_training_checkpoint(path: &Path) -> Result<(Model<f32>, NormStats, ResumePoint)> {
    let archive = crate::checkpoint::read_archive(path)?;
    let model = model_from_records(&archive.params)?;
    let norm = norm_from_archive(&archive)?;

    let opt = &archive.optimizer;
    if opt.is_empty() {
        return Err(Error::Format(
            "checkpoint has no optimizer state; cannot resume".into(),
        ));
    }
    let mut m = Vec::with_capacity(model.params().len());
    let mut v = Vec::with_capacity(model.params().len());
    for p in model.params() {
        let mr = Archive::find(opt, &format!("adam.m.{}", p.name))?;
        let vr = Archive::find(opt, &format!("adam.v.{}", p.name))?;
        let take = |r: &Record| -> Result<Vec<f32>> {
            match &r.payload {
                crate::checkpoint::Payload::F32(data) => Ok(data.clone()),
                _ => Err(Error::Format(format!("record '{}' is not f32", r.name))),
            }
        };
        m.push(take(mr)?);
        v.push(take(vr)?);
    }
    let one_u32 = |name: &str| -> Result<u32> { Ok(Archive::find(opt, name)?.as_u32_slice()?[0]) };
    let one_f64 = |name: &str| -> Result<f64> { Ok(Archive::find(opt, name)?.as_f64_slice()?[0]) };
    let adam = AdamState {
        m,
        v,
        t: one_u32("adam.t")? as u64,
    };
    let rng = rng_from_state(Archive::find(opt, "rng.state")?.as_bytes()?)?;
    let resume = ResumePoint {
        adam,
        scheduler_lr: one_f64("sched.lr")?,
        scheduler_best: (one_u32("sched.has_best")? != 0).then(|| one_f64("sched.best"))
            .transpose()?,
        scheduler_bad_epochs: one_u32("sched.bad_epochs")? as usize,
        rng,
        epoch: one_u32("train.epoch")? as usize,
        best_loss: (one_u32("train.has_best_loss")? != 0)
            .then(|| one_f64("train.best_loss"))
            .transpose()?,
    };
    Ok((model, norm, resume))
}

// ── Evaluation ──────────────────────────────────────────────────────────────

pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

/// Error metrics in meters over a pair set, plus an error histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub err_mean: f64,
    pub err_median: f64,
    pub err_std: f64,
    pub within_one_std_frac: f64,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub pixel_count: usize,
}

/// What produces the high-resolution prediction.
pub enum Predictor<'a> {
    Network {
        model: &'a Model<f32>,
        norm: NormStats,
    },
    Baseline(InterpMethod),
}

fn predict_pair(predictor: &Predictor<'_>, pair: &TilePair) -> Result<Vec<f32>> {
    match predictor {
        Predictor::Baseline(method) => interp::resize(
            &pair.lr.values,
            pair.lr.nrows,
            pair.lr.ncols,
            pair.hr.nrows,
            pair.hr.ncols,
            *method,
        ),
        Predictor::Network { model, norm } => {
            let input = Tensor::<f32>::from_fn(
                Shape::new(1, 1, pair.lr.nrows, pair.lr.ncols),
                |i| norm.normalize(pair.lr.values[i] as f64) as f32,
            );
            let mut g = Graph::new();
            let pass = model.forward(&mut g, &input)?;
            let out = g.value(pass.output);
            if out.shape().h != pair.hr.nrows || out.shape().w != pair.hr.ncols {
                return Err(Error::Dimension(format!(
                    "model produced {}, target tile is {}x{}",
                    out.shape(),
                    pair.hr.nrows,
                    pair.hr.ncols
                )));
            }
            Ok(out
                .data()
                .iter()
                .map(|&v| norm.denormalize(v as f64) as f32)
                .collect())
        }
    }
}

/// Builds the report from per-pair predictions and targets (both meters).
pub fn report_from_predictions(
    predictions: &[Vec<f32>],
    targets: &[&[f32]],
    bins: usize,
) -> Result<EvalReport> {
    if predictions.is_empty() || bins == 0 {
        return Err(Error::Contract(
            "report needs at least one prediction and one bin".into(),
        ));
    }
    let mut sq_sum = 0.0f64;
    let mut errors: Vec<f64> = Vec::new();
    for (pred, target) in predictions.iter().zip(targets) {
        if pred.len() != target.len() {
            return Err(Error::Dimension(
                "prediction/target length mismatch".into(),
            ));
        }
        for (p, t) in pred.iter().zip(*target) {
            let d = *p as f64 - *t as f64;
            sq_sum += d * d;
            errors.push(d.abs());
        }
    }
    let count = errors.len();
    let mse = sq_sum / count as f64;
    let err_mean = errors.iter().sum::<f64>() / count as f64;
    let err_std = (errors.iter().map(|e| (e - err_mean) * (e - err_mean)).sum::<f64>()
        / count as f64)
        .sqrt();

    let mut sorted = errors.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let err_median = if count % 2 == 1 {
        sorted[count / 2]
    } else {
        0.5 * (sorted[count / 2 - 1] + sorted[count / 2])
    };

    let (lo, hi) = (err_mean - err_std, err_mean + err_std);
    let within = errors.iter().filter(|&&e| e >= lo && e <= hi).count();
    let within_one_std_frac = within as f64 / count as f64;

    let max_err = sorted.last().copied().unwrap_or(0.0).max(1e-300);
    let width = max_err / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for e in &errors {
        let idx = ((e / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    debug_assert_eq!(counts.iter().sum::<u64>() as usize, count);

    Ok(EvalReport {
        mse,
        err_mean,
        err_median,
        err_std,
        within_one_std_frac,
        bin_edges,
        counts,
        pixel_count: count,
    })
}

/// Evaluates a predictor over tile pairs. Predictions are denormalized to
/// meters before any metric is computed.
pub fn evaluate(predictor: &Predictor<'_>, pairs: &[TilePair], bins: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluate: no tile pairs".into()));
    }
    let predictions = par_map(pairs, thread_count(), |p| predict_pair(predictor, p))?;
    let targets: Vec<&[f32]> = pairs.iter().map(|p| p.hr.values.as_slice()).collect();
    report_from_predictions(&predictions, &targets, bins)
}

/// Runs a single grid through the network, emitting a grid 16x finer over
/// the same extent.
pub fn upscale_grid(model: &Model<f32>, norm: &NormStats, grid: &Grid) -> Result<Grid> {
    if grid.has_nodata() {
        return Err(Error::Contract(
            "input grid contains nodata cells; the network is undefined on gaps".into(),
        ));
    }
    let input = Tensor::<f32>::from_fn(Shape::new(1, 1, grid.nrows, grid.ncols), |i| {
        norm.normalize(grid.values[i] as f64) as f32
    });
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &input)?;
    let out = g.value(pass.output);
    let s = out.shape();
    let values: Vec<f32> = out
        .data()
        .iter()
        .map(|&v| norm.denormalize(v as f64) as f32)
        .collect();
    let factor = model.config().scale_factor as f64;
    let mut result = Grid::new(
        s.h,
        s.w,
        grid.cell_size / factor,
        grid.origin,
        grid.nodata,
        values,
    )?;
    result.cell_unit = grid.cell_unit;
    Ok(result)
}

// ── Report CSV ──────────────────────────────────────────────────────────────

/// Histogram rows then a scalar-metric footer, all with 9 significant
/// digits.
pub fn export_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "bin_lo,bin_hi,count")?;
    for (i, c) in report.counts.iter().enumerate() {
        writeln!(
            w,
            "{:.8e},{:.8e},{c}",
            report.bin_edges[i],
            report.bin_edges[i + 1]
        )?;
    }
    writeln!(w, "# mse,{:.8e}", report.mse)?;
    writeln!(w, "# err_mean,{:.8e}", report.err_mean)?;
    writeln!(w, "# err_median,{:.8e}", report.err_median)?;
    writeln!(w, "# err_std,{:.8e}", report.err_std)?;
    writeln!(w, "# within_one_std_frac,{:.8e}", report.within_one_std_frac)?;
    writeln!(w, "# pixel_count,{}", report.pixel_count)?;
    w.flush()?;
    Ok(())
}

pub fn parse_report(path: &Path) -> Result<EvalReport> {
    let f = File::open(path)?;
    let mut bin_edges: Vec<f64> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut scalars = std::collections::BTreeMap::new();
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            line: line_no,
            message: msg,
        };
        if let Some(rest) = line.strip_prefix("# ") {
            let (key, value) = rest
                .split_once(',')
                .ok_or_else(|| bad("footer lines are '# key,value'".into()))?;
            scalars.insert(
                key.to_string(),
                value.parse::<f64>().map_err(|_| bad(format!("bad number '{value}'")))?,
            );
        } else {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(bad("histogram rows are bin_lo,bin_hi,count".into()));
            }
            let lo: f64 = parts[0].parse().map_err(|_| bad("bad bin_lo".into()))?;
            let hi: f64 = parts[1].parse().map_err(|_| bad("bad bin_hi".into()))?;
            if bin_edges.is_empty() {
                bin_edges.push(lo);
            }
            bin_edges.push(hi);
            counts.push(parts[2].parse().map_err(|_| bad("bad count".into()))?);
        }
    }
    let get = |k: &str| -> Result<f64> {
        scalars
            .get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("report is missing footer '{k}'")))
    };
    Ok(EvalReport {
        mse: get("mse")?,
        err_mean: get("err_mean")?,
        err_median: get("err_median")?,
        err_std: get("err_std")?,
        within_one_std_frac: get("within_one_std_frac")?,
        bin_edges,
        counts,
        pixel_count: get("pixel_count")? as usize,
    })
}
