//! Network assembly: Transolver (TS), GeoTransolver (GeoTS), and
//! GeoTransolver-with-FLARE (GeoTS-FLARE) backbones, plus checkpoint I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::attn::{component_rng, GaleBlock, SelfAttnKind};
use crate::error::{Error, Result};
use crate::geo::{
    augmented_width, farthest_point_anchors, gather_rows, multiscale_features, unit_box_positions,
    ContextBank, ContextProjector, PointCloud,
};
use crate::numcore::graph::{Graph, NodeId};
use crate::numcore::nn::{Mlp, ParamStore};
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Backbone {
    Transolver,
    GeoTransolver,
    GeoTransolverFlare,
}

impl Backbone {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ts" | "transolver" => Ok(Backbone::Transolver),
            "geots" | "geotransolver" => Ok(Backbone::GeoTransolver),
            "geots-flare" | "geotransolver-flare" => Ok(Backbone::GeoTransolverFlare),
            other => Err(Error::Config(format!("unknown backbone '{other}'"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Backbone::Transolver => "ts",
            Backbone::GeoTransolver => "geots",
            Backbone::GeoTransolverFlare => "geots-flare",
        }
    }

    pub fn uses_context(&self) -> bool {
        !matches!(self, Backbone::Transolver)
    }

    fn self_attn_kind(&self) -> SelfAttnKind {
        match self {
            Backbone::GeoTransolverFlare => SelfAttnKind::Flare,
            _ => SelfAttnKind::Physics,
        }
    }
}

/// What the output head predicts per point.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OutputMode {
    /// Instantaneous acceleration (width 3); input carries the two previous states.
    Acceleration,
    /// Displacements from the initial frame for all steps (width 3 * steps).
    Displacements { steps: usize },
    /// Displacement at one queried time (width 3); input carries the
    /// normalized time as an extra feature.
    TimeQuery,
}

impl OutputMode {
    pub fn output_width(&self) -> usize {
        match self {
            OutputMode::Acceleration => 3,
            OutputMode::Displacements { steps } => 3 * steps,
            OutputMode::TimeQuery => 3,
        }
    }

    /// Per-point dynamic input channels in front of the static features.
    pub fn dynamic_width(&self) -> usize {
        match self {
            OutputMode::Acceleration => 6,
            OutputMode::Displacements { .. } => 0,
            OutputMode::TimeQuery => 1,
        }
    }

    fn tag(&self) -> String {
        match self {
            OutputMode::Acceleration => "accel".into(),
            OutputMode::Displacements { steps } => format!("disp:{steps}"),
            OutputMode::TimeQuery => "time".into(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        if s == "accel" {
            return Ok(OutputMode::Acceleration);
        }
        if s == "time" {
            return Ok(OutputMode::TimeQuery);
        }
        if let Some(steps) = s.strip_prefix("disp:") {
            let steps = steps
                .parse()
                .map_err(|_| Error::Config(format!("bad output mode '{s}'")))?;
            return Ok(OutputMode::Displacements { steps });
        }
        Err(Error::Config(format!("unknown output mode '{s}'")))
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Slice tokens / latent queries per block.
    pub tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub channels: usize,
    /// Ball-query scales as (radius, neighbor cap) pairs.
    pub scales: Vec<(f64, usize)>,
    /// Geometry anchor tokens in the context bank (+2 for globals/bc).
    pub context_anchors: usize,
    pub point_features: usize,
    pub globals_dim: usize,
    pub bc_dim: usize,
    pub output: OutputMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("need at least one layer".into()));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.tokens < 1 {
            return Err(Error::Config("need at least one token".into()));
        }
        if self.backbone.uses_context() && (self.scales.is_empty() || self.context_anchors < 1) {
            return Err(Error::Config(
                "geometry backbones need scales and context anchors".into(),
            ));
        }
        Ok(())
    }

    /// Width of the per-point static feature block.
    pub fn static_width(&self) -> usize {
        match self.backbone {
            Backbone::Transolver => 3 + self.point_features,
            _ => augmented_width(self.point_features, self.scales.len()),
        }
    }

    pub fn input_width(&self) -> usize {
        self.output.dynamic_width() + self.static_width()
    }

    fn to_kv(&self) -> String {
        let scales = self
            .scales
            .iter()
            .map(|(r, c)| format!("{r}:{c}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "backbone={}\ntokens={}\nlayers={}\nheads={}\nchannels={}\nscales={}\ncontext_anchors={}\npoint_features={}\nglobals_dim={}\nbc_dim={}\noutput={}\nseed={}\n",
            self.backbone.tag(),
            self.tokens,
            self.layers,
            self.heads,
            self.channels,
            scales,
            self.context_anchors,
            self.point_features,
            self.globals_dim,
            self.bc_dim,
            self.output.tag(),
            self.seed
        )
    }

    fn from_kv(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line '{line}'")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing config key '{k}'")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad usize for '{k}'")))
        };
        let scales_raw = get("scales")?;
        let mut scales = Vec::new();
        if !scales_raw.is_empty() {
            for part in scales_raw.split(',') {
                let (r, c) = part
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("bad scale '{part}'")))?;
                scales.push((
                    r.parse().map_err(|_| Error::Format("bad radius".into()))?,
                    c.parse().map_err(|_| Error::Format("bad cap".into()))?,
                ));
            }
        }
        Ok(ModelConfig {
            backbone: Backbone::parse(&get("backbone")?)?,
            tokens: parse_usize("tokens")?,
            layers: parse_usize("layers")?,
            heads: parse_usize("heads")?,
            channels: parse_usize("channels")?,
            scales,
            context_anchors: parse_usize("context_anchors")?,
            point_features: parse_usize("point_features")?,
            globals_dim: parse_usize("globals_dim")?,
            bc_dim: parse_usize("bc_dim")?,
            output: OutputMode::parse(&get("output")?)?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Format("bad seed".into()))?,
        })
    }
}

/// Per-sample constants precomputed once and reused by every model call.
pub struct PreparedSample<T: Scalar> {
    pub static_feats: Tensor<T>,
    pub anchor_rows: Option<Tensor<T>>,
    pub globals: Tensor<T>,
    pub bc: Tensor<T>,
}

/// A parameterized network: embedding, attention blocks, head, and (for the
/// geometry backbones) the context projector.
pub struct ModelGraph<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embed: Mlp,
    pub blocks: Vec<GaleBlock>,
    pub head: Mlp,
    pub context: Option<ContextProjector>,
}

/// Build a model from its configuration; parameter init is a pure function
/// of the seed.
pub fn build<T: Scalar>(config: ModelConfig) -> Result<ModelGraph<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng: ChaCha8Rng = component_rng(config.seed, 1);
    let c = config.channels;

    let context = if config.backbone.uses_context() {
        Some(ContextProjector::new(
            &mut store,
            "context",
            augmented_width(config.point_features, config.scales.len()),
            config.globals_dim,
            config.bc_dim,
            c,
            config.context_anchors,
            &mut rng,
        )?)
    } else {
        None
    };

    let embed = Mlp::new(&mut store, "embed", &[config.input_width(), c, c], &mut rng);
    let mut blocks = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        blocks.push(GaleBlock::new(
            &mut store,
            &format!("block{l}"),
            config.backbone.self_attn_kind(),
            config.backbone.uses_context(),
            c,
            config.heads,
            config.tokens,
            &mut rng,
        )?);
    }
    let head = Mlp::new(
        &mut store,
        "head",
        &[c, 2 * c, config.output.output_width()],
        &mut rng,
    );

    Ok(ModelGraph {
        config,
        store,
        embed,
        blocks,
        head,
        context,
    })
}

impl<T: Scalar> ModelGraph<T> {
    /// Precompute per-sample constants: static features (augmented for the
    /// geometry backbones, raw position+features for Transolver) and the
    /// anchor rows feeding the context projector.
    pub fn prepare(
        &self,
        cloud: &PointCloud<T>,
        globals: &[f64],
        bc: &[f64],
    ) -> Result<PreparedSample<T>> {
        if globals.len() != self.config.globals_dim || bc.len() != self.config.bc_dim {
            return Err(Error::Shape(format!(
                "globals/bc dims {}/{} do not match config {}/{}",
                globals.len(),
                bc.len(),
                self.config.globals_dim,
                self.config.bc_dim
            )));
        }
        let (static_feats, anchor_rows) = match self.config.backbone {
            Backbone::Transolver => {
                let n = cloud.len();
                let f = cloud.feature_width();
                let mut raw = Tensor::zeros(&[n, 3 + f]);
                for i in 0..n {
                    for a in 0..3 {
                        raw.set2(i, a, cloud.positions.at2(i, a));
                    }
                    for j in 0..f {
                        raw.set2(i, 3 + j, cloud.features.at2(i, j));
                    }
                }
                (raw, None)
            }
            _ => {
                let aug = multiscale_features(cloud, &self.config.scales)?;
                let unit = unit_box_positions(&cloud.positions);
                let anchors = farthest_point_anchors(&unit, self.config.context_anchors);
                let rows = gather_rows(&aug, &anchors);
                (aug, Some(rows))
            }
        };
        let globals_t = Tensor::from_vec(
            &[1, globals.len()],
            globals.iter().map(|&v| T::from_real(v)).collect(),
        )?;
        let bc_t = Tensor::from_vec(&[1, bc.len()], bc.iter().map(|&v| T::from_real(v)).collect())?;
        Ok(PreparedSample {
            static_feats,
            anchor_rows,
            globals: globals_t,
            bc: bc_t,
        })
    }

    /// Build the context bank inside `g` (once per trajectory pass).
    pub fn project_context(
        &self,
        g: &mut Graph<T>,
        prepared: &PreparedSample<T>,
    ) -> Result<Option<ContextBank>> {
        match &self.context {
            Some(proj) => {
                let rows = prepared
                    .anchor_rows
                    .as_ref()
                    .ok_or_else(|| Error::Config("prepared sample lacks anchors".into()))?;
                Ok(Some(proj.project(
                    g,
                    &self.store,
                    rows,
                    &prepared.globals,
                    &prepared.bc,
                )?))
            }
            None => Ok(None),
        }
    }

    /// One model call: embed `[dynamic | static]` features, run the blocks
    /// against the shared context tokens, and apply the head.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        prepared: &PreparedSample<T>,
        context: Option<NodeId>,
        dynamic: Option<NodeId>,
    ) -> Result<NodeId> {
        if self.context.is_some() != context.is_some() {
            return Err(Error::Config(
                "context bank must be projected for geometry backbones".into(),
            ));
        }
        let static_leaf = g.leaf(prepared.static_feats.clone());
        let input = match dynamic {
            Some(d) => g.concat_cols(&[d, static_leaf])?,
            None => static_leaf,
        };
        let mut x = self.embed.apply(g, &self.store, input)?;
        for block in &self.blocks {
            x = block.forward(g, &self.store, x, context)?;
        }
        self.head.apply(g, &self.store, x)
    }

    pub fn param_count(&self) -> usize {
        self.store.total_params()
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"OPCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Save a checkpoint: magic, version, config record, then named parameter
/// blobs as little-endian 32-bit floats. Round-trips bit-exactly.
pub fn save_checkpoint<T: Scalar>(model: &ModelGraph<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = model.config.to_kv();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    w.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for id in model.store.ids() {
        let name = model.store.name(id).as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let t = model.store.get(id);
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.to_real() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Load a checkpoint into a freshly built model of scalar type `T`.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelGraph<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config = ModelConfig::from_kv(
        std::str::from_utf8(&cfg_bytes).map_err(|_| Error::Format("config not utf-8".into()))?,
    )?;
    let mut model = build::<T>(config)?;
    let count = read_u32(&mut r)? as usize;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} params, model wants {}",
            model.store.len()
        )));
    }
    for id in (0..count).map(crate::numcore::ParamId) {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name not utf-8".into()))?;
        if name != model.store.name(id) {
            return Err(Error::Format(format!(
                "checkpoint param '{name}' does not match model param '{}'",
                model.store.name(id)
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        if shape != model.store.get(id).shape() {
            return Err(Error::Format(format!("shape mismatch for '{name}'")));
        }
        let t = model.store.get_mut(id);
        let mut buf = [0u8; 4];
        for v in t.data_mut() {
            r.read_exact(&mut buf)?;
            *v = T::from_real(f32::from_le_bytes(buf) as f64);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn tiny_config(backbone: Backbone) -> ModelConfig {
        ModelConfig {
            backbone,
            tokens: 4,
            layers: 2,
            heads: 2,
            channels: 8,
            scales: vec![(0.3, 4), (0.6, 8)],
            context_anchors: 3,
            point_features: 1,
            globals_dim: 4,
            bc_dim: 3,
            output: OutputMode::Displacements { steps: 5 },
            seed: 11,
        }
    }

    #[test]
    fn builds_are_bit_identical_for_equal_seed() {
        let a = build::<f32>(tiny_config(Backbone::GeoTransolverFlare)).unwrap();
        let b = build::<f32>(tiny_config(Backbone::GeoTransolverFlare)).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for id in a.store.ids() {
            assert_eq!(a.store.get(id).data(), b.store.get(id).data());
        }
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = tiny_config(Backbone::GeoTransolver);
        let parsed = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(parsed.backbone, cfg.backbone);
        assert_eq!(parsed.scales, cfg.scales);
        assert_eq!(parsed.output, cfg.output);
        assert_eq!(parsed.seed, cfg.seed);
    }

    #[test]
    fn unknown_backbone_is_a_config_error() {
        assert!(Backbone::parse("vit").is_err());
    }
}
