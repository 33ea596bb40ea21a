//! Temporal dynamics prediction strategies: autoregressive rollout, teacher
//! forcing, one-shot, and time-conditional mapping, plus explicit Euler
//! integration, the sequence loss, and kinematics metrics.

use crate::error::{Error, Result};
use crate::geo::PointCloud;
use crate::model::{ModelGraph, PreparedSample};
use crate::numcore::graph::{Graph, NodeId};
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum StrategyKind {
    Ar,
    TeacherForcing,
    OneShot,
    TimeConditional,
}

impl StrategyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(StrategyKind::Ar),
            "teacher-forcing" | "tf" => Ok(StrategyKind::TeacherForcing),
            "one-shot" | "oneshot" => Ok(StrategyKind::OneShot),
            "time-conditional" | "time" => Ok(StrategyKind::TimeConditional),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            StrategyKind::Ar => "ar",
            StrategyKind::TeacherForcing => "teacher-forcing",
            StrategyKind::OneShot => "one-shot",
            StrategyKind::TimeConditional => "time-conditional",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LossForm {
    /// Sum over steps of the full-field L2 norm of the position error.
    L2Sum,
    /// Mean squared error over every coordinate of every step.
    Mse,
}

impl LossForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2-sum" | "l2" => Ok(LossForm::L2Sum),
            "mse" => Ok(LossForm::Mse),
            other => Err(Error::Config(format!("unknown loss form '{other}'"))),
        }
    }
}

/// One crash trajectory: `steps + 1` position frames at uniform spacing.
pub struct Trajectory<T: Scalar> {
    /// `[n x 3]` frames; `frames[0]` is the initial cloud.
    pub frames: Vec<Tensor<T>>,
    /// `[n x 3]` initial velocity.
    pub v0: Tensor<T>,
    /// Frame spacing in milliseconds.
    pub dt: f64,
    /// `[n x f]` per-point design features.
    pub features: Tensor<T>,
    pub globals: Vec<f64>,
    pub bc: Vec<f64>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn steps(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn points(&self) -> usize {
        self.frames[0].shape()[0]
    }
}

/// Predicted kinematics over the horizon plus the model-call counter.
pub struct TrajectoryPrediction<T: Scalar> {
    /// Positions including the initial frame at index 0.
    pub positions: Vec<Tensor<T>>,
    /// Velocities per frame (rollout strategies only).
    pub velocities: Option<Vec<Tensor<T>>>,
    /// Accelerations at steps `1..=T` (rollout strategies only).
    pub accelerations: Option<Vec<Tensor<T>>>,
    /// Time stamp of each positions entry.
    pub times: Vec<f64>,
    /// Per-step relative L2 vs the source trajectory, when grid-aligned.
    pub per_step_rel_l2: Vec<f64>,
    pub model_calls: usize,
}

/// A strategy driver's output: the prediction plus (for single-graph modes)
/// the live graph and per-step prediction nodes for loss construction.
pub struct StrategyRollout<T: Scalar> {
    pub prediction: TrajectoryPrediction<T>,
    pub graph: Option<Graph<T>>,
    pub step_nodes: Vec<NodeId>,
}

/// Model abstraction the drivers run against. Implemented by
/// [`ModelRunner`] for real networks and by lightweight mocks in tests.
pub trait DynamicsModel<T: Scalar> {
    /// Reset per-trajectory state (frozen context caches).
    fn begin_trajectory(&mut self);
    /// Context tokens for graph `g`. `live` builds the differentiable
    /// projector subgraph (training); otherwise a per-trajectory frozen
    /// tensor is computed once and injected as a constant leaf.
    fn context(&mut self, g: &mut Graph<T>, live: bool) -> Result<Option<NodeId>>;
    /// One model call with optional per-point dynamic input columns.
    fn step(
        &self,
        g: &mut Graph<T>,
        ctx: Option<NodeId>,
        dynamic: Option<NodeId>,
    ) -> Result<NodeId>;
}

/// Binds a built model to one sample's precomputed constants.
pub struct ModelRunner<'m, T: Scalar> {
    pub model: &'m ModelGraph<T>,
    pub prepared: PreparedSample<T>,
    frozen_ctx: Option<Tensor<T>>,
}

impl<'m, T: Scalar> ModelRunner<'m, T> {
    pub fn new(model: &'m ModelGraph<T>, traj: &Trajectory<T>) -> Result<Self> {
        let cloud = PointCloud::new(traj.frames[0].clone(), traj.features.clone())?;
        let prepared = model.prepare(&cloud, &traj.globals, &traj.bc)?;
        Ok(Self::from_prepared(model, prepared))
    }

    /// Reuse a sample's precomputed constants (they do not depend on the
    /// parameters, so they survive optimizer updates).
    pub fn from_prepared(model: &'m ModelGraph<T>, prepared: PreparedSample<T>) -> Self {
        ModelRunner {
            model,
            prepared,
            frozen_ctx: None,
        }
    }
}

impl<T: Scalar> DynamicsModel<T> for ModelRunner<'_, T> {
    fn begin_trajectory(&mut self) {
        self.frozen_ctx = None;
    }

    fn context(&mut self, g: &mut Graph<T>, live: bool) -> Result<Option<NodeId>> {
        if self.model.context.is_none() {
            return Ok(None);
        }
        if live {
            let bank = self.model.project_context(g, &self.prepared)?.expect("has projector");
            return Ok(Some(bank.tokens));
        }
        if self.frozen_ctx.is_none() {
            let mut scratch = Graph::new();
            let bank = self
                .model
                .project_context(&mut scratch, &self.prepared)?
                .expect("has projector");
            self.frozen_ctx = Some(scratch.value(bank.tokens).clone());
        }
        Ok(Some(g.leaf(self.frozen_ctx.clone().expect("just cached"))))
    }

    fn step(
        &self,
        g: &mut Graph<T>,
        ctx: Option<NodeId>,
        dynamic: Option<NodeId>,
    ) -> Result<NodeId> {
        self.model.forward(g, &self.prepared, ctx, dynamic)
    }
}

/// Semi-implicit Euler update: velocity first, position from the updated
/// velocity.
pub fn euler_step<T: Scalar>(
    g: &mut Graph<T>,
    x_prev: NodeId,
    v_prev: NodeId,
    a_pred: NodeId,
    dt: f64,
) -> Result<(NodeId, NodeId)> {
    let dv = g.scale(a_pred, dt);
    let v_next = g.add(v_prev, dv)?;
    let dx = g.scale(v_next, dt);
    let x_next = g.add(x_prev, dx)?;
    Ok((x_next, v_next))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RolloutMode {
    /// Single graph spanning the whole unroll; gradients flow through every
    /// step.
    TrainUnroll,
    /// Fresh graph per step; context frozen once per trajectory.
    Inference,
}

fn rel_l2<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let d = p.to_real() - t.to_real();
        num += d * d;
        den += t.to_real() * t.to_real();
    }
    (num / den.max(1e-30)).sqrt()
}

fn fill_per_step_rel_l2<T: Scalar>(pred: &mut TrajectoryPrediction<T>, traj: &Trajectory<T>) {
    if pred.positions.len() == traj.frames.len() {
        pred.per_step_rel_l2 = (1..pred.positions.len())
            .map(|t| rel_l2(&pred.positions[t], &traj.frames[t]))
            .collect();
    }
}

/// Autoregressive rollout: the model predicts acceleration from the two
/// previous (predicted) states; explicit Euler integrates. The first step
/// feeds the initial frame twice and starts from the dataset velocity.
///
/// Non-finite state aborts with [`Error::Divergence`] carrying the step.
pub fn rollout_ar<T: Scalar>(
    model: &mut impl DynamicsModel<T>,
    traj: &Trajectory<T>,
    mode: RolloutMode,
) -> Result<StrategyRollout<T>> {
    let steps = traj.steps();
    if steps < 1 {
        return Err(Error::Config("trajectory needs at least one step".into()));
    }
    model.begin_trajectory();
    match mode {
        RolloutMode::TrainUnroll => rollout_ar_unrolled(model, traj),
        RolloutMode::Inference => rollout_ar_inference(model, traj),
    }
}

fn rollout_ar_unrolled<T: Scalar>(
    model: &mut impl DynamicsModel<T>,
    traj: &Trajectory<T>,
) -> Result<StrategyRollout<T>> {
    let steps = traj.steps();
    let mut g = Graph::new();
    let ctx = model.context(&mut g, true)?;
    let x0 = g.leaf(traj.frames[0].clone());
    let v0 = g.leaf(traj.v0.clone());
    let mut x_prev = x0;
    let mut x_prev2 = x0;
    let mut v = v0;
    let mut step_nodes = Vec::with_capacity(steps);
    let mut positions = vec![traj.frames[0].clone()];
    let mut velocities = vec![traj.v0.clone()];
    let mut accelerations = Vec::with_capacity(steps);
    for t in 1..=steps {
        let dynamic = g.concat_cols(&[x_prev, x_prev2])?;
        let a = model.step(&mut g, ctx, Some(dynamic))?;
        let (x_next, v_next) = euler_step(&mut g, x_prev, v, a, traj.dt)?;
        if !g.value(x_next).is_finite() || !g.value(v_next).is_finite() {
            return Err(Error::Divergence { step: t });
        }
        positions.push(g.value(x_next).clone());
        velocities.push(g.value(v_next).clone());
        accelerations.push(g.value(a).clone());
        step_nodes.push(x_next);
        x_prev2 = x_prev;
        x_prev = x_next;
        v = v_next;
    }
    let mut prediction = TrajectoryPrediction {
        positions,
        velocities: Some(velocities),
        accelerations: Some(accelerations),
        times: (0..=steps).map(|t| t as f64 * traj.dt).collect(),
        per_step_rel_l2: Vec::new(),
        model_calls: steps,
    };
    fill_per_step_rel_l2(&mut prediction, traj);
    Ok(StrategyRollout {
        prediction,
        graph: Some(g),
        step_nodes,
    })
}

fn rollout_ar_inference<T: Scalar>(
    model: &mut impl DynamicsModel<T>,
    traj: &Trajectory<T>,
) -> Result<StrategyRollout<T>> {
    let steps = traj.steps();
    let mut x_prev = traj.frames[0].clone();
    let mut x_prev2 = traj.frames[0].clone();
    let mut v = traj.v0.clone();
    let mut positions = vec![traj.frames[0].clone()];
    let mut velocities = vec![traj.v0.clone()];
    let mut accelerations = Vec::with_capacity(steps);
    for t in 1..=steps {
        let mut g = Graph::new();
        let ctx = model.context(&mut g, false)?;
        let xp = g.leaf(x_prev.clone());
        let xp2 = g.leaf(x_prev2.clone());
        let vp = g.leaf(v.clone());
        let dynamic = g.concat_cols(&[xp, xp2])?;
        let a = model.step(&mut g, ctx, Some(dynamic))?;
        let (x_next, v_next) = euler_step(&mut g, xp, vp, a, traj.dt)?;
        let xn = g.value(x_next).clone();
        let vn = g.value(v_next).clone();
        let an = g.value(a).clone();
        if !xn.is_finite() || !vn.is_finite() {
            return Err(Error::Divergence { step: t });
        }
        positions.push(xn.clone());
        velocities.push(vn.clone());
        accelerations.push(an);
        x_prev2 = x_prev;
        x_prev = xn;
        v = vn;
    }
    let mut prediction = TrajectoryPrediction {
        positions,
        velocities: Some(velocities),
        accelerations: Some(accelerations),
        times: (0..=steps).map(|t| t as f64 * traj.dt).collect(),
        per_step_rel_l2: Vec::new(),
        model_calls: steps,
    };
    fill_per_step_rel_l2(&mut prediction, traj);
    Ok(StrategyRollout {
        prediction,
        graph: None,
        step_nodes: Vec::new(),
    })
}

/// Teacher forcing: like the autoregressive rollout but every step's inputs
/// are ground-truth states and the integrated velocity is anchored to the
/// data finite difference, so each step decouples from earlier predictions.
pub fn rollout_teacher_forcing<T: Scalar>(
    model: &mut impl DynamicsModel<T>,
    traj: &Trajectory<T>,
) -> Result<StrategyRollout<T>> {
    let steps = traj.steps();
    if steps < 1 {
        return Err(Error::Config("trajectory needs at least one step".into()));
    }
    model.begin_trajectory();
    let mut g = Graph::new();
    let ctx = model.context(&mut g, true)?;
    let mut step_nodes = Vec::with_capacity(steps);
    let mut positions = vec![traj.frames[0].clone()];
    let mut velocities = vec![traj.v0.clone()];
    let mut accelerations = Vec::with_capacity(steps);
    for t in 1..=steps {
        let x_prev = g.leaf(traj.frames[t - 1].clone());
        let x_prev2 = g.leaf(traj.frames[t.saturating_sub(2)].clone());
        // velocity entering step t: data finite difference, or v0 at the start
        let v_prev_t = if t == 1 {
            traj.v0.clone()
        } else {
            tensor_scaled_diff(&traj.frames[t - 1], &traj.frames[t - 2], 1.0 / traj.dt)
        };
        let v_prev = g.leaf(v_prev_t);
        let dynamic = g.concat_cols(&[x_prev, x_prev2])?;
        let a = model.step(&mut g, ctx, Some(dynamic))?;
        let (x_next, v_next) = euler_step(&mut g, x_prev, v_prev, a, traj.dt)?;
        if !g.value(x_next).is_finite() {
            return Err(Error::Divergence { step: t });
        }
        positions.push(g.value(x_next).clone());
        velocities.push(g.value(v_next).clone());
        accelerations.push(g.value(a).clone());
        step_nodes.push(x_next);
    }
    let mut prediction = TrajectoryPrediction {
        positions,
        velocities: Some(velocities),
        accelerations: Some(accelerations),
        times: (0..=steps).map(|t| t as f64 * traj.dt).collect(),
        per_step_rel_l2: Vec::new(),
        model_calls: steps,
    };
    fill_per_step_rel_l2(&mut prediction, traj);
    Ok(StrategyRollout {
        prediction,
        graph: Some(g),
        step_nodes,
    })
}

/// One-shot: a single model call emits displacements from the initial frame
/// for every step, concatenated along the feature axis.
pub fn predict_oneshot<T: Scalar>(
    model: &mut impl DynamicsModel<T>,
    traj: &Trajectory<T>,
) -> Result<StrategyRollout<T>> {
    let steps = traj.steps();
    model.begin_trajectory();
    let mut g = Graph::new();
    let ctx = model.context(&mut g, true)?;
    let out = model.step(&mut g, ctx, None)?;
    let (_, width) = g.value(out).dims2()?;
    if width != 3 * steps {
        return Err(Error::Shape(format!(
            "one-shot head width {width} does not match 3*T = {}",
            3 * steps
        )));
    }
    let x0 = g.leaf(traj.frames[0].clone());
    let mut step_nodes = Vec::with_capacity(steps);
    let mut positions = vec![traj.frames[0].clone()];
    for t in 1..=steps {
        let disp = g.slice_cols(out, 3 * (t - 1), 3)?;
        let x = g.add(x0, disp)?;
        positions.push(g.value(x).clone());
        step_nodes.push(x);
    }
    let mut prediction = TrajectoryPrediction {
        positions,
        velocities: None,
        accelerations: None,
        times: (0..=steps).map(|t| t as f64 * traj.dt).collect(),
        per_step_rel_l2: Vec::new(),
        model_calls: 1,
    };
    fill_per_step_rel_l2(&mut prediction, traj);
    Ok(StrategyRollout {
        prediction,
        graph: Some(g),
        step_nodes,
    })
}

/// Time-conditional mapping: each query time becomes a broadcast input
/// feature (normalized to the horizon) and one model call; the output is a
/// displacement from the initial frame.
pub fn predict_time_conditional<T: Scalar>(
    model: &mut impl DynamicsModel<T>,
    traj: &Trajectory<T>,
    query_times: &[f64],
) -> Result<StrategyRollout<T>> {
    let steps = traj.steps();
    let horizon = steps as f64 * traj.dt;
    for &t in query_times {
        if !(0.0..=horizon * (1.0 + 1e-12)).contains(&t) {
            return Err(Error::Config(format!(
                "query time {t} outside [0, {horizon}]"
            )));
        }
    }
    model.begin_trajectory();
    let n = traj.points();
    let mut g = Graph::new();
    let ctx = model.context(&mut g, true)?;
    let x0 = g.leaf(traj.frames[0].clone());
    let mut step_nodes = Vec::with_capacity(query_times.len());
    let mut positions = vec![traj.frames[0].clone()];
    let mut times = vec![0.0];
    for &tq in query_times {
        let feat = g.leaf(Tensor::full(&[n, 1], T::from_real(tq / horizon)));
        let out = model.step(&mut g, ctx, Some(feat))?;
        let x = g.add(x0, out)?;
        positions.push(g.value(x).clone());
        times.push(tq);
        step_nodes.push(x);
    }
    let mut prediction = TrajectoryPrediction {
        positions,
        velocities: None,
        accelerations: None,
        times,
        per_step_rel_l2: Vec::new(),
        model_calls: query_times.len(),
    };
    fill_per_step_rel_l2(&mut prediction, traj);
    Ok(StrategyRollout {
        prediction,
        graph: Some(g),
        step_nodes,
    })
}

/// Grid of all step times `dt..=T*dt`.
pub fn grid_times<T: Scalar>(traj: &Trajectory<T>) -> Vec<f64> {
    (1..=traj.steps()).map(|t| t as f64 * traj.dt).collect()
}

/// Sequence loss over per-step prediction nodes against truth frames
/// `1..=T`, built inside the rollout's graph.
pub fn sequence_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    step_nodes: &[NodeId],
    truth: &[Tensor<T>],
    form: LossForm,
) -> Result<NodeId> {
    if step_nodes.len() != truth.len() {
        return Err(Error::Shape(format!(
            "loss wants {} truth frames, got {}",
            step_nodes.len(),
            truth.len()
        )));
    }
    let mut acc: Option<NodeId> = None;
    let mut total_elems = 0usize;
    for (node, frame) in step_nodes.iter().zip(truth) {
        if g.value(*node).shape() != frame.shape() {
            return Err(Error::Shape("prediction/truth frame shapes differ".into()));
        }
        total_elems += frame.numel();
        let t = g.leaf(frame.clone());
        let d = g.sub(*node, t)?;
        let sq = g.mul(d, d)?;
        let s = g.sum_all(sq);
        let term = match form {
            LossForm::L2Sum => g.sqrt(s)?,
            LossForm::Mse => s,
        };
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let total = acc.ok_or_else(|| Error::Shape("empty sequence loss".into()))?;
    Ok(match form {
        LossForm::L2Sum => total,
        LossForm::Mse => g.scale(total, 1.0 / total_elems as f64),
    })
}

/// Finite-difference velocity series over a position series: central in the
/// interior, one-sided at the ends.
pub fn fd_velocity<T: Scalar>(frames: &[Tensor<T>], dt: f64) -> Vec<Tensor<T>> {
    let t_max = frames.len() - 1;
    (0..=t_max)
        .map(|t| {
            if t == 0 {
                tensor_scaled_diff(&frames[1], &frames[0], 1.0 / dt)
            } else if t == t_max {
                tensor_scaled_diff(&frames[t_max], &frames[t_max - 1], 1.0 / dt)
            } else {
                tensor_scaled_diff(&frames[t + 1], &frames[t - 1], 1.0 / (2.0 * dt))
            }
        })
        .collect()
}

/// Three-point finite-difference acceleration series, anchored inward at the
/// ends so quadratic trajectories are reproduced exactly.
pub fn fd_acceleration<T: Scalar>(frames: &[Tensor<T>], dt: f64) -> Vec<Tensor<T>> {
    let t_max = frames.len() - 1;
    let stencil = |c: usize| -> Tensor<T> {
        // (x_{c+1} - 2 x_c + x_{c-1}) / dt^2
        let mut out = frames[c + 1].clone();
        let inv = T::from_real(1.0 / (dt * dt));
        let two = T::from_real(2.0);
        for ((o, &mid), &lo) in out
            .data_mut()
            .iter_mut()
            .zip(frames[c].data())
            .zip(frames[c - 1].data())
        {
            *o = (*o - two * mid + lo) * inv;
        }
        out
    };
    (0..=t_max)
        .map(|t| {
            if t_max < 2 {
                Tensor::zeros(frames[0].shape())
            } else {
                stencil(t.clamp(1, t_max - 1))
            }
        })
        .collect()
}

/// Full-field and probe-point error metrics, in the units of the inputs.
#[derive(Clone, Debug)]
pub struct KinematicsRecord {
    pub per_step_rel_l2: Vec<f64>,
    pub aggregate_rel_l2: f64,
    pub probe_position_mse: f64,
    pub probe_velocity_mse: f64,
    pub probe_acceleration_mse: f64,
}

/// Compare predicted kinematics against truth.
///
/// Velocity and acceleration come from the prediction directly when the
/// strategy produced them (rollouts) and from position finite differences
/// otherwise; truth kinematics always come from finite differences.
pub fn kinematics_metrics<T: Scalar>(
    pred: &TrajectoryPrediction<T>,
    truth_frames: &[Tensor<T>],
    dt: f64,
    probe_ids: &[u32],
) -> Result<KinematicsRecord> {
    if pred.positions.len() != truth_frames.len() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, truth {}",
            pred.positions.len(),
            truth_frames.len()
        )));
    }
    let n = truth_frames[0].shape()[0];
    for &p in probe_ids {
        if p as usize >= n {
            return Err(Error::Config(format!("probe id {p} out of range")));
        }
    }
    let t_max = truth_frames.len() - 1;
    let per_step: Vec<f64> = (1..=t_max)
        .map(|t| rel_l2(&pred.positions[t], &truth_frames[t]))
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 1..=t_max {
        for (&p, &tr) in pred.positions[t].data().iter().zip(truth_frames[t].data()) {
            let d = p.to_real() - tr.to_real();
            num += d * d;
            den += tr.to_real() * tr.to_real();
        }
    }
    let aggregate = (num / den.max(1e-30)).sqrt();

    let pred_vel = match &pred.velocities {
        Some(v) => v.clone(),
        None => fd_velocity(&pred.positions, dt),
    };
    let pred_acc = match &pred.accelerations {
        Some(a) => {
            // accelerations run over steps 1..=T; pad the initial entry with
            // the first value so the series aligns with frames 0..=T
            let mut padded = Vec::with_capacity(t_max + 1);
            padded.push(a[0].clone());
            padded.extend(a.iter().cloned());
            padded
        }
        None => fd_acceleration(&pred.positions, dt),
    };
    let truth_vel = fd_velocity(truth_frames, dt);
    let truth_acc = fd_acceleration(truth_frames, dt);

    let probe_mse = |a: &[Tensor<T>], b: &[Tensor<T>]| -> f64 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for t in 0..a.len().min(b.len()) {
            for &p in probe_ids {
                for axis in 0..3 {
                    let d = a[t].at2(p as usize, axis).to_real() - b[t].at2(p as usize, axis).to_real();
                    acc += d * d;
                    count += 1;
                }
            }
        }
        acc / count.max(1) as f64
    };

    Ok(KinematicsRecord {
        per_step_rel_l2: per_step,
        aggregate_rel_l2: aggregate,
        probe_position_mse: probe_mse(&pred.positions, truth_frames),
        probe_velocity_mse: probe_mse(&pred_vel, &truth_vel),
        probe_acceleration_mse: probe_mse(&pred_acc, &truth_acc),
    })
}

fn tensor_scaled_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, scale: f64) -> Tensor<T> {
    let s = T::from_real(scale);
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = (*o - bv) * s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mock with no context whose step returns a constant acceleration.
    pub struct ConstAccel {
        pub value: f64,
        pub n: usize,
    }

    impl DynamicsModel<f64> for ConstAccel {
        fn begin_trajectory(&mut self) {}
        fn context(&mut self, _g: &mut Graph<f64>, _live: bool) -> Result<Option<NodeId>> {
            Ok(None)
        }
        fn step(
            &self,
            g: &mut Graph<f64>,
            _ctx: Option<NodeId>,
            _dynamic: Option<NodeId>,
        ) -> Result<NodeId> {
            Ok(g.leaf(Tensor::full(&[self.n, 3], self.value)))
        }
    }

    fn free_flight_traj(n: usize, steps: usize, dt: f64) -> Trajectory<f64> {
        let x0 = Tensor::from_vec(
            &[n, 3],
            (0..n * 3).map(|i| i as f64 * 0.1).collect::<Vec<_>>(),
        )
        .unwrap();
        let v0 = Tensor::full(&[n, 3], -1.0);
        let frames = (0..=steps)
            .map(|t| {
                let mut f = x0.clone();
                for v in f.data_mut() {
                    *v += -1.0 * t as f64 * dt;
                }
                f
            })
            .collect();
        Trajectory {
            frames,
            v0,
            dt,
            features: Tensor::zeros(&[n, 1]),
            globals: vec![],
            bc: vec![],
        }
    }

    #[test]
    fn zero_model_gives_free_flight() {
        let traj = free_flight_traj(3, 5, 0.5);
        let mut model = ConstAccel { value: 0.0, n: 3 };
        let out = rollout_ar(&mut model, &traj, RolloutMode::Inference).unwrap();
        for t in 0..=5 {
            assert!(
                out.prediction.positions[t].max_abs_diff(&traj.frames[t]) < 1e-12,
                "step {t}"
            );
        }
        assert_eq!(out.prediction.model_calls, 5);
    }

    #[test]
    fn constant_accel_matches_closed_form() {
        // from rest: after k steps v = k*dt*a, x = dt^2*a*k(k+1)/2
        let n = 2;
        let steps = 6;
        let dt = 0.25;
        let a = 2.0;
        let x0 = Tensor::zeros(&[n, 3]);
        let traj = Trajectory {
            frames: (0..=steps).map(|_| x0.clone()).collect(),
            v0: Tensor::zeros(&[n, 3]),
            dt,
            features: Tensor::zeros(&[n, 1]),
            globals: vec![],
            bc: vec![],
        };
        let mut model = ConstAccel { value: a, n };
        let out = rollout_ar(&mut model, &traj, RolloutMode::Inference).unwrap();
        for k in 1..=steps {
            let expect_v = k as f64 * dt * a;
            let expect_x = dt * dt * a * (k * (k + 1)) as f64 / 2.0;
            let v = out.prediction.velocities.as_ref().unwrap()[k].data()[0];
            let x = out.prediction.positions[k].data()[0];
            assert!((v - expect_v).abs() < 1e-12);
            assert!((x - expect_x).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_dt_freezes_state() {
        let traj = free_flight_traj(2, 1, 0.0);
        let mut model = ConstAccel { value: 7.0, n: 2 };
        let out = rollout_ar(&mut model, &traj, RolloutMode::Inference).unwrap();
        assert!(out.prediction.positions[1].max_abs_diff(&traj.frames[0]) < 1e-15);
    }

    #[test]
    fn oneshot_zero_output_returns_initial_frame() {
        struct ZeroWide {
            n: usize,
            steps: usize,
        }
        impl DynamicsModel<f64> for ZeroWide {
            fn begin_trajectory(&mut self) {}
            fn context(&mut self, _: &mut Graph<f64>, _: bool) -> Result<Option<NodeId>> {
                Ok(None)
            }
            fn step(
                &self,
                g: &mut Graph<f64>,
                _: Option<NodeId>,
                _: Option<NodeId>,
            ) -> Result<NodeId> {
                Ok(g.leaf(Tensor::zeros(&[self.n, 3 * self.steps])))
            }
        }
        let traj = free_flight_traj(3, 4, 0.5);
        let mut model = ZeroWide { n: 3, steps: 4 };
        let out = predict_oneshot(&mut model, &traj).unwrap();
        assert_eq!(out.prediction.model_calls, 1);
        for t in 1..=4 {
            assert!(out.prediction.positions[t].max_abs_diff(&traj.frames[0]) < 1e-15);
        }
    }

    #[test]
    fn diverging_model_reports_step_index() {
        struct Explode {
            n: usize,
        }
        impl DynamicsModel<f64> for Explode {
            fn begin_trajectory(&mut self) {}
            fn context(&mut self, _: &mut Graph<f64>, _: bool) -> Result<Option<NodeId>> {
                Ok(None)
            }
            fn step(
                &self,
                g: &mut Graph<f64>,
                _: Option<NodeId>,
                dynamic: Option<NodeId>,
            ) -> Result<NodeId> {
                // acceleration = huge multiple of the previous position
                let d = dynamic.expect("ar feeds states");
                let x_prev = g.slice_cols(d, 0, 3).unwrap();
                Ok(g.scale(x_prev, 1e200))
            }
            }
        let mut traj = free_flight_traj(2, 6, 1.0);
        for v in traj.frames[0].data_mut() {
            *v = 1e200;
        }
        let mut model = Explode { n: 2 };
        let _ = &model.n;
        match rollout_ar(&mut model, &traj, RolloutMode::Inference) {
            Err(Error::Divergence { step }) => assert_eq!(step, 1),
            Err(other) => panic!("expected divergence, got {other}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn quadratic_positions_have_exact_fd_acceleration() {
        let dt = 0.5;
        let a = 3.0;
        let frames: Vec<Tensor<f64>> = (0..=6)
            .map(|t| {
                let time = t as f64 * dt;
                Tensor::full(&[2, 3], 0.5 * a * time * time)
            })
            .collect();
        let acc = fd_acceleration(&frames, dt);
        for (t, at) in acc.iter().enumerate() {
            for &v in at.data() {
                assert!((v - a).abs() < 1e-9, "t={t} v={v}");
            }
        }
    }

    #[test]
    fn linear_positions_have_zero_fd_acceleration() {
        let dt = 0.5;
        let frames: Vec<Tensor<f64>> = (0..=5)
            .map(|t| Tensor::full(&[2, 3], 2.0 * t as f64 * dt))
            .collect();
        let acc = fd_acceleration(&frames, dt);
        for at in &acc {
            for &v in at.data() {
                assert!(v.abs() < 1e-10);
            }
        }
    }
}
