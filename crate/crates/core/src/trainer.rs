//! Adam optimization, the training loop, run ledgers, and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crashdata::{normalize_trajectory, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::model::{build, Backbone, ModelConfig, ModelGraph, OutputMode, PreparedSample};
use crate::numcore::mem::MemScope;
use crate::numcore::nn::ParamStore;
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;
use crate::temporal::{
    grid_times, kinematics_metrics, predict_oneshot, predict_time_conditional, rollout_ar,
    rollout_teacher_forcing, sequence_loss_node, DynamicsModel, KinematicsRecord, LossForm,
    ModelRunner, RolloutMode, StrategyKind, StrategyRollout, Trajectory, TrajectoryPrediction,
};

/// Experiment configuration: optimization hyperparameters plus the model
/// dimensions, read from a flat `key = value` file.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub strategy: StrategyKind,
    pub backbone: Backbone,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub loss_form: LossForm,
    pub tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub channels: usize,
    pub context_anchors: usize,
    pub scales: Vec<(f64, usize)>,
    /// Random target times per trajectory per epoch for time-conditional
    /// training (the full grid is used at evaluation).
    pub tc_train_queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: StrategyKind::OneShot,
            backbone: Backbone::GeoTransolverFlare,
            lr: 1e-3,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            grad_accum: 4,
            seed: 2024,
            eval_every: 10,
            loss_form: LossForm::L2Sum,
            tokens: 16,
            layers: 2,
            heads: 4,
            channels: 32,
            context_anchors: 8,
            scales: vec![(0.05, 8), (0.25, 32)],
            tc_train_queries: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "strategy" => cfg.strategy = StrategyKind::parse(v)?,
                "backbone" => cfg.backbone = Backbone::parse(v)?,
                "lr" => cfg.lr = parse_f64(k, v)?,
                "lr_min" => cfg.lr_min = parse_f64(k, v)?,
                "beta1" => cfg.beta1 = parse_f64(k, v)?,
                "beta2" => cfg.beta2 = parse_f64(k, v)?,
                "eps" => cfg.eps = parse_f64(k, v)?,
                "epochs" => cfg.epochs = parse_usize(k, v)?,
                "grad_accum" => cfg.grad_accum = parse_usize(k, v)?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad(k, v))?,
                "eval_every" => cfg.eval_every = parse_usize(k, v)?,
                "loss" => cfg.loss_form = LossForm::parse(v)?,
                "tokens" => cfg.tokens = parse_usize(k, v)?,
                "layers" => cfg.layers = parse_usize(k, v)?,
                "heads" => cfg.heads = parse_usize(k, v)?,
                "channels" => cfg.channels = parse_usize(k, v)?,
                "context_anchors" => cfg.context_anchors = parse_usize(k, v)?,
                "tc_queries" => cfg.tc_train_queries = parse_usize(k, v)?,
                "scales" => {
                    let mut scales = Vec::new();
                    for part in v.split(',') {
                        let (r, c) = part
                            .split_once(':')
                            .ok_or_else(|| Error::Format(format!("bad scale '{part}'")))?;
                        scales.push((
                            r.trim().parse().map_err(|_| bad(k, v))?,
                            c.trim().parse().map_err(|_| bad(k, v))?,
                        ));
                    }
                    cfg.scales = scales;
                }
                other => return Err(Error::Config(format!("unknown config key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model configuration implied by this run.
    pub fn model_config(&self, steps: usize, point_features: usize) -> ModelConfig {
        let output = match self.strategy {
            StrategyKind::Ar | StrategyKind::TeacherForcing => OutputMode::Acceleration,
            StrategyKind::OneShot => OutputMode::Displacements { steps },
            StrategyKind::TimeConditional => OutputMode::TimeQuery,
        };
        ModelConfig {
            backbone: self.backbone,
            tokens: self.tokens,
            layers: self.layers,
            heads: self.heads,
            channels: self.channels,
            scales: self.scales.clone(),
            context_anchors: self.context_anchors,
            point_features,
            globals_dim: 4,
            bc_dim: 3,
            output,
            seed: self.seed,
        }
    }
}

fn bad(k: &str, v: &str) -> Error {
    Error::Format(format!("bad value '{v}' for '{k}'"))
}

fn parse_f64(k: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad(k, v))
}

fn parse_usize(k: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(k, v))
}

/// Adam state: bias-corrected first/second moments per parameter.
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step_count: usize,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        let v = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m,
            v,
            step_count: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step_count
    }

    /// One update over the whole store. `grads[i]` pairs with parameter id
    /// `i`; missing entries are zero gradients (moments still decay).
    /// Non-finite gradients reject the step and leave all state untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for '{}'",
                        store.name(crate::numcore::ParamId(i))
                    )));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_real(self.beta1);
        let b2 = T::from_real(self.beta2);
        let one = T::one();
        let corr1 = T::from_real(1.0 - self.beta1.powi(t));
        let corr2 = T::from_real(1.0 - self.beta2.powi(t));
        let lr_t = T::from_real(lr);
        let eps = T::from_real(self.eps);
        for (i, id) in store.ids().enumerate().map(|(i, id)| (i, id)).collect::<Vec<_>>() {
            let zero_grad;
            let g: &Tensor<T> = match &grads[i] {
                Some(g) => g,
                None => {
                    zero_grad = Tensor::zeros(store.get(id).shape());
                    &zero_grad
                }
            };
            let m = &mut self.m[i];
            for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = b1 * *mv + (one - b1) * gv;
            }
            let v = &mut self.v[i];
            for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = b2 * *vv + (one - b2) * gv * gv;
            }
            let p = store.get_mut(id);
            for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(self.m[i].data()).zip(self.v[i].data())
            {
                let m_hat = mv / corr1;
                let v_hat = vv / corr2;
                *pv = *pv - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr` to `lr_min` across the epoch budget.
pub fn cosine_lr(lr: f64, lr_min: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr;
    }
    let frac = epoch as f64 / (epochs - 1) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EpochStatus {
    Ok,
    Unstable,
}

/// One ledger row. Wall time is informational and excluded from
/// reproducibility comparisons.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    pub peak_bytes: usize,
    pub model_calls: usize,
    pub status: EpochStatus,
    pub wall_ms: f64,
}

/// Append-only per-epoch observables.
#[derive(Default)]
pub struct RunLedger {
    pub records: Vec<EpochRecord>,
}

impl RunLedger {
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let val = r
                .val_metric
                .map(|v| format!("{v:.6e}"))
                .unwrap_or_else(|| "none".into());
            out.push_str(&format!(
                "epoch={} train_loss={:.6e} val_rel_l2={} peak_bytes={} model_calls={} status={} wall_ms={:.1}\n",
                r.epoch,
                r.train_loss,
                val,
                r.peak_bytes,
                r.model_calls,
                match r.status {
                    EpochStatus::Ok => "ok",
                    EpochStatus::Unstable => "unstable",
                },
                r.wall_ms
            ));
        }
        out
    }

    /// The deterministic portion of the ledger (everything but wall time).
    pub fn deterministic_lines(&self) -> String {
        self.to_lines()
            .lines()
            .map(|l| l.split(" wall_ms=").next().unwrap_or(l).to_string())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub ledger: RunLedger,
    pub model: ModelGraph<f32>,
    pub stats: NormStats,
    pub best_checkpoint: Option<PathBuf>,
    pub best_val: Option<f64>,
}

struct SampleBundle {
    norm: Trajectory<f32>,
    prepared: PreparedSample<f32>,
}

fn build_rollout<T: Scalar>(
    runner: &mut ModelRunner<'_, T>,
    traj: &Trajectory<T>,
    strategy: StrategyKind,
    rng: &mut ChaCha8Rng,
    tc_queries: usize,
) -> Result<(StrategyRollout<T>, Vec<usize>)> {
    match strategy {
        StrategyKind::Ar => Ok((
            rollout_ar(runner, traj, RolloutMode::TrainUnroll)?,
            (1..=traj.steps()).collect(),
        )),
        StrategyKind::TeacherForcing => Ok((
            rollout_teacher_forcing(runner, traj)?,
            (1..=traj.steps()).collect(),
        )),
        StrategyKind::OneShot => Ok((predict_oneshot(runner, traj)?, (1..=traj.steps()).collect())),
        StrategyKind::TimeConditional => {
            let steps = traj.steps();
            let count = tc_queries.min(steps);
            let mut picks: Vec<usize> = Vec::with_capacity(count);
            while picks.len() < count {
                let t = rng.random_range(1..=steps);
                if !picks.contains(&t) {
                    picks.push(t);
                }
            }
            picks.sort_unstable();
            let times: Vec<f64> = picks.iter().map(|&t| t as f64 * traj.dt).collect();
            Ok((predict_time_conditional(runner, traj, &times)?, picks))
        }
    }
}

/// Train a model on the training split. Divergent autoregressive unrolls and
/// rejected optimizer steps mark the epoch unstable instead of aborting.
pub fn train(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.samples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let stats = NormStats::from_train(train_ds);
    let model_cfg = cfg.model_config(train_ds.steps, train_ds.features);
    let mut model = build::<f32>(model_cfg)?;
    let mut adam = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.eps);

    let bundles: Vec<SampleBundle> = (0..train_ds.samples.len())
        .map(|i| {
            let phys = train_ds.trajectory::<f32>(i);
            let norm = normalize_trajectory(&phys, &stats);
            let cloud = crate::geo::PointCloud::new(norm.frames[0].clone(), norm.features.clone())?;
            let prepared = model.prepare(&cloud, &norm.globals, &norm.bc)?;
            Ok(SampleBundle { norm, prepared })
        })
        .collect::<Result<_>>()?;

    let mut ledger = RunLedger::default();
    let mut best_val: Option<f64> = None;
    let mut best_checkpoint = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let scope = MemScope::enter("epoch");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((epoch as u64) << 32) ^ 0x5eed);
        let mut order: Vec<usize> = (0..bundles.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let lr = cosine_lr(cfg.lr, cfg.lr_min, epoch, cfg.epochs);

        let mut status = EpochStatus::Ok;
        let mut epoch_loss = 0.0f64;
        let mut losses_counted = 0usize;
        let mut model_calls = 0usize;
        let mut accum: Vec<Option<Tensor<f32>>> = (0..model.store.len()).map(|_| None).collect();
        let mut batch = 0usize;

        for (k, &idx) in order.iter().enumerate() {
            let bundle = &bundles[idx];
            let outcome = {
                let mut runner =
                    ModelRunner::from_prepared(&model, clone_prepared(&bundle.prepared));
                build_rollout(&mut runner, &bundle.norm, cfg.strategy, &mut rng, cfg.tc_train_queries)
            };
            let (rollout, step_ids) = match outcome {
                Ok(r) => r,
                Err(Error::Divergence { .. }) => {
                    status = EpochStatus::Unstable;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut g = rollout.graph.expect("training rollouts keep their graph");
            let truth: Vec<Tensor<f32>> =
                step_ids.iter().map(|&t| bundle.norm.frames[t].clone()).collect();
            let loss = sequence_loss_node(&mut g, &rollout.step_nodes, &truth, cfg.loss_form)?;
            let loss_value = g.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                status = EpochStatus::Unstable;
                continue;
            }
            g.backward(loss)?;
            epoch_loss += loss_value;
            losses_counted += 1;
            model_calls += rollout.prediction.model_calls;
            for &(pid, nid) in g.param_nodes() {
                if let Some(grad) = g.grad(nid) {
                    match &mut accum[pid.0] {
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(grad.data()) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(grad.clone()),
                    }
                }
            }
            drop(g);
            batch += 1;
            if batch == cfg.grad_accum || k + 1 == order.len() {
                let inv = 1.0 / batch as f32;
                for acc in accum.iter_mut().flatten() {
                    for v in acc.data_mut() {
                        *v *= inv;
                    }
                }
                match adam.step(&mut model.store, &accum, lr) {
                    Ok(()) => {}
                    Err(Error::Numeric(_)) => status = EpochStatus::Unstable,
                    Err(e) => return Err(e),
                }
                accum = (0..model.store.len()).map(|_| None).collect();
                batch = 0;
            }
        }

        let val_metric = match val_ds {
            Some(val) if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs => {
                let report = evaluate_model(&model, val, &stats, cfg.strategy)?;
                Some(report.mean_aggregate_rel_l2)
            }
            _ => None,
        };
        if let Some(v) = val_metric {
            if best_val.map(|b| v < b).unwrap_or(true) {
                best_val = Some(v);
                if let Some(dir) = out_dir {
                    let path = dir.join("best.opck");
                    crate::model::save_checkpoint(&model, &path)?;
                    best_checkpoint = Some(path);
                }
            }
        }

        ledger.records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / losses_counted.max(1) as f64,
            val_metric,
            peak_bytes: scope.peak_bytes(),
            model_calls,
            status,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        drop(scope);
    }

    if let Some(dir) = out_dir {
        std::fs::write(dir.join("ledger.txt"), ledger.to_lines())?;
        std::fs::write(dir.join("norm.txt"), stats.to_kv())?;
        if best_checkpoint.is_none() {
            let path = dir.join("best.opck");
            crate::model::save_checkpoint(&model, &path)?;
            best_checkpoint = Some(path);
        }
    }

    Ok(TrainOutcome {
        ledger,
        model,
        stats,
        best_checkpoint,
        best_val,
    })
}

fn clone_prepared<T: Scalar>(p: &PreparedSample<T>) -> PreparedSample<T> {
    PreparedSample {
        static_feats: p.static_feats.clone(),
        anchor_rows: p.anchor_rows.clone(),
        globals: p.globals.clone(),
        bc: p.bc.clone(),
    }
}

/// Evaluation report over one split.
pub struct EvalReport {
    pub per_sample: Vec<KinematicsRecord>,
    pub mean_aggregate_rel_l2: f64,
    /// Mean per-step relative L2 across samples (plot-ready error curve).
    pub per_step_mean: Vec<f64>,
}

/// Inference-mode prediction for one normalized trajectory.
pub fn predict_sample<T: Scalar, M: DynamicsModel<T>>(
    model: &mut M,
    traj_norm: &Trajectory<T>,
    strategy: StrategyKind,
) -> Result<TrajectoryPrediction<T>> {
    let rollout = match strategy {
        StrategyKind::Ar | StrategyKind::TeacherForcing => {
            rollout_ar(model, traj_norm, RolloutMode::Inference)?
        }
        StrategyKind::OneShot => predict_oneshot(model, traj_norm)?,
        StrategyKind::TimeConditional => {
            let times = grid_times(traj_norm);
            predict_time_conditional(model, traj_norm, &times)?
        }
    };
    Ok(rollout.prediction)
}

/// Denormalize a prediction back to physical units.
pub fn denormalize_prediction<T: Scalar>(
    pred: &TrajectoryPrediction<T>,
    stats: &NormStats,
) -> TrajectoryPrediction<T> {
    TrajectoryPrediction {
        positions: pred.positions.iter().map(|p| stats.invert(p)).collect(),
        velocities: pred
            .velocities
            .as_ref()
            .map(|vs| vs.iter().map(|v| stats.invert_rate(v)).collect()),
        accelerations: pred
            .accelerations
            .as_ref()
            .map(|aa| aa.iter().map(|a| stats.invert_rate(a)).collect()),
        times: pred.times.clone(),
        per_step_rel_l2: pred.per_step_rel_l2.clone(),
        model_calls: pred.model_calls,
    }
}

/// Evaluate a trained model on a split: full-field relative L2 and probe
/// kinematics MSE in physical units.
pub fn evaluate_model(
    model: &ModelGraph<f32>,
    ds: &Dataset,
    stats: &NormStats,
    strategy: StrategyKind,
) -> Result<EvalReport> {
    let mut per_sample = Vec::with_capacity(ds.samples.len());
    for i in 0..ds.samples.len() {
        let phys = ds.trajectory::<f32>(i);
        let norm = normalize_trajectory(&phys, stats);
        let mut runner = ModelRunner::new(model, &norm)?;
        let pred_norm = predict_sample(&mut runner, &norm, strategy)?;
        let pred_phys = denormalize_prediction(&pred_norm, stats);
        let record = kinematics_metrics(
            &pred_phys,
            &phys.frames,
            phys.dt,
            &ds.samples[i].probe_ids,
        )?;
        per_sample.push(record);
    }
    let mean_aggregate_rel_l2 = per_sample
        .iter()
        .map(|r| r.aggregate_rel_l2)
        .sum::<f64>()
        / per_sample.len().max(1) as f64;
    let steps = per_sample.first().map(|r| r.per_step_rel_l2.len()).unwrap_or(0);
    let per_step_mean: Vec<f64> = (0..steps)
        .map(|t| {
            per_sample.iter().map(|r| r.per_step_rel_l2[t]).sum::<f64>()
                / per_sample.len().max(1) as f64
        })
        .collect();
    Ok(EvalReport {
        per_sample,
        mean_aggregate_rel_l2,
        per_step_mean,
    })
}
