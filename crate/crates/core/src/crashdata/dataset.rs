//! Design-of-experiments sweep, binary dataset container, splits, and
//! normalization statistics.
//!
//! The desk-scale sweep is the full factorial of impact velocity, thickness
//! scale, and impactor offset (3 x 3 x 3 = 27 configurations by default);
//! geometric scaling stays at nominal. Files are self-describing and
//! round-trip bit-exactly (little-endian 32-bit floats).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::crashdata::sim::{
    build_lattice, probe_points, simulate, BeamLattice, DesignConfig, Resolution,
};
use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;
use crate::temporal::Trajectory;

/// Canonical factor levels, nominal-first so a 1-level sweep is the nominal
/// configuration.
pub const VELOCITY_LEVELS: [f64; 3] = [-3.0, -5.0, -7.0];
pub const THICKNESS_LEVELS: [f64; 3] = [1.0, 0.7, 1.3];
pub const OFFSET_LEVELS: [f64; 3] = [0.0, 120.0, 240.0];

/// Simulation defaults: 50 output frames at 0.2 ms, 100 substeps per frame.
pub const DEFAULT_FRAMES: usize = 50;
pub const DEFAULT_FRAME_DT: f64 = 0.2;
pub const DEFAULT_SUBSTEPS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split '{other}'"))),
        }
    }
}

/// One stored sample: configuration, initial velocity field, probe ids, and
/// the position trajectory.
pub struct Sample {
    pub config: DesignConfig,
    /// `[n x 3]` initial velocity.
    pub v0_field: Tensor<f32>,
    pub probe_ids: Vec<u32>,
    /// `steps + 1` frames of `[n x 3]` positions (mm).
    pub frames: Vec<Tensor<f32>>,
}

/// In-memory dataset: header metadata plus samples.
pub struct Dataset {
    pub split: Split,
    /// Points per sample.
    pub points: usize,
    /// Steps per trajectory (frames - 1).
    pub steps: usize,
    /// Frame spacing, ms.
    pub dt: f64,
    /// Per-point feature width.
    pub features: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// View one sample as a trajectory with synthesized per-point features
    /// (thickness scale broadcast) and global/bc vectors.
    pub fn trajectory<T: Scalar>(&self, idx: usize) -> Trajectory<T> {
        let s = &self.samples[idx];
        let frames = s.frames.iter().map(|f| f.cast::<T>()).collect();
        Trajectory {
            frames,
            v0: s.v0_field.cast::<T>(),
            dt: self.dt,
            features: Tensor::full(&[self.points, 1], T::from_real(s.config.thickness)),
            globals: global_vector(&s.config),
            bc: bc_vector(&s.config),
        }
    }
}

/// Global design parameters fed to the context projector.
pub fn global_vector(config: &DesignConfig) -> Vec<f64> {
    vec![
        config.scale[0],
        config.scale[1],
        config.scale[2],
        config.thickness,
    ]
}

/// Boundary/impact conditions fed to the context projector.
pub fn bc_vector(config: &DesignConfig) -> Vec<f64> {
    vec![config.v0, config.offset / 100.0, 1.0]
}

/// Full-factorial sweep over level counts into the canonical lists.
pub fn doe_configs(levels: (usize, usize, usize), seed: u64) -> Result<Vec<DesignConfig>> {
    let (lv, lt, lo) = levels;
    if lv == 0 || lt == 0 || lo == 0 || lv > 3 || lt > 3 || lo > 3 {
        return Err(Error::Config("level counts must be in 1..=3".into()));
    }
    let mut configs = Vec::with_capacity(lv * lt * lo);
    for &v in &VELOCITY_LEVELS[..lv] {
        for &t in &THICKNESS_LEVELS[..lt] {
            for &o in &OFFSET_LEVELS[..lo] {
                configs.push(DesignConfig {
                    scale: [1.0, 1.0, 1.0],
                    v0: v,
                    thickness: t,
                    offset: o,
                    seed,
                });
            }
        }
    }
    Ok(configs)
}

/// FNV-1a over the canonical byte encoding of a configuration; stable across
/// platforms, used for the deterministic split assignment.
pub fn config_hash(config: &DesignConfig) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for s in config.scale {
        eat(&s.to_le_bytes());
    }
    eat(&config.v0.to_le_bytes());
    eat(&config.thickness.to_le_bytes());
    eat(&config.offset.to_le_bytes());
    eat(&config.seed.to_le_bytes());
    h
}

/// 80/10/10 split sizes with largest-remainder rounding.
pub fn split_counts(total: usize) -> (usize, usize, usize) {
    let fracs = [0.8, 0.1, 0.1];
    let exact: Vec<f64> = fracs.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    for k in 0..(total - assigned) {
        counts[order[k % 3]] += 1;
    }
    (counts[0], counts[1], counts[2])
}

/// Assign configs to splits: order by config hash, then slice by the
/// largest-remainder counts.
pub fn assign_splits(configs: &[DesignConfig]) -> Vec<Split> {
    let (n_train, n_val, _) = split_counts(configs.len());
    let mut order: Vec<usize> = (0..configs.len()).collect();
    order.sort_by_key(|&i| (config_hash(&configs[i]), i));
    let mut splits = vec![Split::Test; configs.len()];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Simulate one configuration into a stored sample.
pub fn generate_sample(
    config: &DesignConfig,
    res: Resolution,
    frames: usize,
    frame_dt: f64,
    substeps: usize,
) -> Result<(Sample, BeamLattice)> {
    let lattice = build_lattice(config, res)?;
    let dt_sim = frame_dt / substeps as f64;
    let sim = simulate(&lattice, config.v0, dt_sim, frames, substeps)?;
    let n = lattice.positions.len();
    let to_tensor = |frame: &Vec<[f64; 3]>| -> Tensor<f32> {
        let flat: Vec<f32> = frame.iter().flatten().map(|&v| v as f32).collect();
        Tensor::from_vec(&[n, 3], flat).expect("frame sized")
    };
    let mut v0_field = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        v0_field.set2(i, 0, config.v0 as f32);
    }
    Ok((
        Sample {
            config: *config,
            v0_field,
            probe_ids: probe_points(&lattice).to_vec(),
            frames: sim.frames.iter().map(to_tensor).collect(),
        },
        lattice,
    ))
}

/// Generate the full DoE into per-split datasets (train, val, test order).
pub fn generate_doe(
    levels: (usize, usize, usize),
    res: Resolution,
    frames: usize,
    frame_dt: f64,
    substeps: usize,
    seed: u64,
) -> Result<[Dataset; 3]> {
    let configs = doe_configs(levels, seed)?;
    let splits = assign_splits(&configs);
    let mut buckets: [Vec<Sample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut points = 0;
    for (config, split) in configs.iter().zip(&splits) {
        let (sample, lattice) = generate_sample(config, res, frames, frame_dt, substeps)?;
        points = lattice.positions.len();
        let slot = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        buckets[slot].push(sample);
    }
    let [train, val, test] = buckets;
    let mk = |split: Split, samples: Vec<Sample>| Dataset {
        split,
        points,
        steps: frames,
        dt: frame_dt,
        features: 1,
        samples,
    };
    Ok([
        mk(Split::Train, train),
        mk(Split::Val, val),
        mk(Split::Test, test),
    ])
}

const DATASET_MAGIC: &[u8; 4] = b"OPDS";
const DATASET_VERSION: u32 = 1;

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f32(w: &mut impl Write, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn r_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Write a dataset file: magic, version, counts, frame spacing, split tag,
/// then per-sample records.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w_u32(&mut w, DATASET_VERSION)?;
    w_u32(&mut w, ds.samples.len() as u32)?;
    w_u32(&mut w, ds.points as u32)?;
    w_u32(&mut w, ds.steps as u32)?;
    w_u32(&mut w, 3)?; // spatial dimension
    w_u32(&mut w, ds.features as u32)?;
    w_f64(&mut w, ds.dt)?;
    let tag = ds.split.tag().as_bytes();
    w_u32(&mut w, tag.len() as u32)?;
    w.write_all(tag)?;
    for s in &ds.samples {
        for v in s.config.scale {
            w_f64(&mut w, v)?;
        }
        w_f64(&mut w, s.config.v0)?;
        w_f64(&mut w, s.config.thickness)?;
        w_f64(&mut w, s.config.offset)?;
        w.write_all(&s.config.seed.to_le_bytes())?;
        for &v in s.v0_field.data() {
            w_f32(&mut w, v)?;
        }
        w_u32(&mut w, s.probe_ids.len() as u32)?;
        for &p in &s.probe_ids {
            w_u32(&mut w, p)?;
        }
        w_u32(&mut w, s.frames.len() as u32)?;
        for frame in &s.frames {
            for &v in frame.data() {
                w_f32(&mut w, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = r_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n_samples = r_u32(&mut r)? as usize;
    let points = r_u32(&mut r)? as usize;
    let steps = r_u32(&mut r)? as usize;
    let dim = r_u32(&mut r)? as usize;
    if dim != 3 {
        return Err(Error::Format(format!("expected 3-D data, got {dim}")));
    }
    let features = r_u32(&mut r)? as usize;
    let dt = r_f64(&mut r)?;
    let tag_len = r_u32(&mut r)? as usize;
    let mut tag = vec![0u8; tag_len];
    r.read_exact(&mut tag)?;
    let split = Split::parse(
        std::str::from_utf8(&tag).map_err(|_| Error::Format("split tag not utf-8".into()))?,
    )?;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut scale = [0.0; 3];
        for s in &mut scale {
            *s = r_f64(&mut r)?;
        }
        let v0 = r_f64(&mut r)?;
        let thickness = r_f64(&mut r)?;
        let offset = r_f64(&mut r)?;
        let mut seed_b = [0u8; 8];
        r.read_exact(&mut seed_b)?;
        let config = DesignConfig {
            scale,
            v0,
            thickness,
            offset,
            seed: u64::from_le_bytes(seed_b),
        };
        let mut v0_field = Tensor::zeros(&[points, 3]);
        for v in v0_field.data_mut() {
            *v = r_f32(&mut r)?;
        }
        let n_probes = r_u32(&mut r)? as usize;
        let mut probe_ids = Vec::with_capacity(n_probes);
        for _ in 0..n_probes {
            probe_ids.push(r_u32(&mut r)?);
        }
        let n_frames = r_u32(&mut r)? as usize;
        if n_frames != steps + 1 {
            return Err(Error::Format(format!(
                "sample has {n_frames} frames, header wants {}",
                steps + 1
            )));
        }
        let mut frames = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            let mut t = Tensor::zeros(&[points, 3]);
            for v in t.data_mut() {
                *v = r_f32(&mut r)?;
            }
            frames.push(t);
        }
        samples.push(Sample {
            config,
            v0_field,
            probe_ids,
            frames,
        });
    }
    Ok(Dataset {
        split,
        points,
        steps,
        dt,
        features,
        samples,
    })
}

/// Per-axis position statistics over a training split, used to z-score model
/// inputs and targets. Zero-variance channels clamp their deviation to one.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub pos_mean: [f64; 3],
    pub pos_std: [f64; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            pos_mean: [0.0; 3],
            pos_std: [1.0; 3],
        }
    }

    /// Two-pass mean/std over every frame of every sample.
    pub fn from_train(ds: &Dataset) -> Self {
        let mut sum = [0.0f64; 3];
        let mut count = 0usize;
        for s in &ds.samples {
            for f in &s.frames {
                let n = f.shape()[0];
                for i in 0..n {
                    for a in 0..3 {
                        sum[a] += f.at2(i, a) as f64;
                    }
                }
                count += n;
            }
        }
        let mean = [
            sum[0] / count.max(1) as f64,
            sum[1] / count.max(1) as f64,
            sum[2] / count.max(1) as f64,
        ];
        let mut var = [0.0f64; 3];
        for s in &ds.samples {
            for f in &s.frames {
                let n = f.shape()[0];
                for i in 0..n {
                    for a in 0..3 {
                        let d = f.at2(i, a) as f64 - mean[a];
                        var[a] += d * d;
                    }
                }
            }
        }
        let std = [
            (var[0] / count.max(1) as f64).sqrt(),
            (var[1] / count.max(1) as f64).sqrt(),
            (var[2] / count.max(1) as f64).sqrt(),
        ];
        NormStats {
            pos_mean: mean,
            pos_std: [clamp_std(std[0]), clamp_std(std[1]), clamp_std(std[2])],
        }
    }

    /// z-score positions.
    pub fn apply<T: Scalar>(&self, positions: &Tensor<T>) -> Tensor<T> {
        let mut out = positions.clone();
        let n = positions.shape()[0];
        for i in 0..n {
            for a in 0..3 {
                let v = (positions.at2(i, a).to_real() - self.pos_mean[a]) / self.pos_std[a];
                out.set2(i, a, T::from_real(v));
            }
        }
        out
    }

    /// Invert z-scoring.
    pub fn invert<T: Scalar>(&self, positions: &Tensor<T>) -> Tensor<T> {
        let mut out = positions.clone();
        let n = positions.shape()[0];
        for i in 0..n {
            for a in 0..3 {
                let v = positions.at2(i, a).to_real() * self.pos_std[a] + self.pos_mean[a];
                out.set2(i, a, T::from_real(v));
            }
        }
        out
    }

    /// Scale a velocity-like field (no mean shift).
    pub fn apply_rate<T: Scalar>(&self, rate: &Tensor<T>) -> Tensor<T> {
        let mut out = rate.clone();
        let n = rate.shape()[0];
        for i in 0..n {
            for a in 0..3 {
                out.set2(i, a, T::from_real(rate.at2(i, a).to_real() / self.pos_std[a]));
            }
        }
        out
    }

    /// Undo [`NormStats::apply_rate`].
    pub fn invert_rate<T: Scalar>(&self, rate: &Tensor<T>) -> Tensor<T> {
        let mut out = rate.clone();
        let n = rate.shape()[0];
        for i in 0..n {
            for a in 0..3 {
                out.set2(i, a, T::from_real(rate.at2(i, a).to_real() * self.pos_std[a]));
            }
        }
        out
    }

    pub fn to_kv(&self) -> String {
        format!(
            "pos_mean={},{},{}\npos_std={},{},{}\n",
            self.pos_mean[0],
            self.pos_mean[1],
            self.pos_mean[2],
            self.pos_std[0],
            self.pos_std[1],
            self.pos_std[2]
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut mean = None;
        let mut std = None;
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("pos_mean=") {
                mean = Some(parse_triple(v)?);
            }
            if let Some(v) = line.strip_prefix("pos_std=") {
                std = Some(parse_triple(v)?);
            }
        }
        Ok(NormStats {
            pos_mean: mean.ok_or_else(|| Error::Format("missing pos_mean".into()))?,
            pos_std: std.ok_or_else(|| Error::Format("missing pos_std".into()))?,
        })
    }
}

fn parse_triple(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Format("bad float".into())))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Format("need 3 comma-separated values".into()));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn clamp_std(s: f64) -> f64 {
    if s < 1e-12 {
        1.0
    } else {
        s
    }
}

/// Normalize a whole trajectory (positions z-scored, velocity scaled).
pub fn normalize_trajectory<T: Scalar>(traj: &Trajectory<T>, stats: &NormStats) -> Trajectory<T> {
    Trajectory {
        frames: traj.frames.iter().map(|f| stats.apply(f)).collect(),
        v0: stats.apply_rate(&traj.v0),
        dt: traj.dt,
        features: traj.features.clone(),
        globals: traj.globals.clone(),
        bc: traj.bc.clone(),
    }
}
