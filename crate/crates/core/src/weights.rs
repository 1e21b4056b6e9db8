//! Model hyperparameters, the full parameter set, seeded initialization and
//! the `TFW1` weight container.
//!
//! `TFW1` layout (little-endian): magic `TFW1`, then records until EOF, each
//! `u32 name_len, name (UTF-8), u32 rank, rank × u32 dims, row-major f64`.
//! The seed travels as a rank-1 record `meta.seed` holding its high and low
//! 32-bit halves.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::Linear;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"TFW1";
const SEED_RECORD: &str = "meta.seed";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WeightError {
    #[error("bad magic, expected TFW1")]
    BadMagic,
    #[error("truncated weight container: {0}")]
    Truncated(String),
    #[error("tensor `{0}` missing from container")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}` in container")]
    UnknownTensor(String),
    #[error("tensor `{name}` has shape {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Hyperparameters shared by the fusion network and the refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Token embedding width.
    pub d: usize,
    /// Patch size of both tokenizers (pixels).
    pub patch: usize,
    /// Chebyshev neighborhood radius of the local cross-attention (tokens).
    pub radius: usize,
    /// Event tensor sub-windows.
    pub bins: usize,
    pub image_channels: usize,
    /// Channel widths of the stride-8/4/2 pyramid levels.
    pub pyramid_channels: [usize; 3],
    /// Refinement window length.
    pub window: usize,
    /// Patch radius of the correlation sampler.
    pub corr_radius: usize,
    /// Default number of refinement iterations.
    pub iterations: usize,
    pub corr_embed: usize,
    pub tracker_width: usize,
    pub motion_freqs: usize,
    pub tracker_blocks: usize,
    /// Visibility logit assigned to a fresh query.
    pub initial_visibility_logit: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            patch: 8,
            radius: 1,
            bins: crate::repr::DEFAULT_SUB_WINDOWS,
            image_channels: 3,
            pyramid_channels: [64, 32, 16],
            window: 16,
            corr_radius: 3,
            iterations: 3,
            corr_embed: 32,
            tracker_width: 64,
            motion_freqs: 32,
            tracker_blocks: 2,
            initial_visibility_logit: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), WeightError> {
        let bad = |m: &str| Err(WeightError::InvalidConfig(m.into()));
        if self.d == 0 || self.patch == 0 || self.bins == 0 || self.image_channels == 0 {
            return bad("d, patch, bins and image_channels must be positive");
        }
        if self.pyramid_channels.contains(&0) {
            return bad("pyramid channel widths must be positive");
        }
        if self.window < 2 {
            return bad("window must hold at least 2 steps");
        }
        if self.tracker_width == 0 || self.corr_embed == 0 {
            return bad("tracker widths must be positive");
        }
        Ok(())
    }

    pub fn neighborhood_size(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    pub fn corr_taps(&self) -> usize {
        (2 * self.corr_radius + 1).pow(2)
    }

    /// Width of the refiner's per-step input feature.
    pub fn tracker_input_width(&self) -> usize {
        3 * self.corr_embed + 4 * self.motion_freqs + 1
    }
}

/// How residual-branch outputs and locality tables start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Residual output projections and the prediction heads are zero, so the
    /// untrained model is an identity map on the state and an identity
    /// tracker. Locality tables start at zero.
    ZeroResidual,
    /// Every tensor is random; used to exercise all code paths.
    Dense,
}

/// Locality-biased cross-attention from event tokens onto image tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// Relative-offset bias, `(2r+1)²` entries in row-major `(dy, dx)` order.
    pub locality_bias: Array1<f64>,
}

/// Pre-norm residual cross-attention updater: state tokens query event tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdaterWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub locality_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttentionWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    /// `mix[0]: d→C0`, `mix[1]: C0→C1`, `mix[2]: C1→C2`.
    pub mix: Vec<Linear>,
    /// Projections of pooled encoder inputs onto each level's channels.
    pub skip: Vec<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub image_embed: Linear,
    pub event_embed: Linear,
    pub clwf: LocalAttention,
    pub updater: UpdaterWeights,
    pub temporal: TemporalAttentionWeights,
    pub decoder: DecoderWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationEncoder {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerBlock {
    pub attention: TemporalAttentionWeights,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerWeights {
    pub corr: Vec<CorrelationEncoder>,
    pub input: Linear,
    pub blocks: Vec<TrackerBlock>,
    pub delta_position: Linear,
    pub delta_visibility: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub config: ModelConfig,
    pub seed: u64,
    pub fusion: FusionWeights,
    pub tracker: TrackerWeights,
}

pub enum Param<'a> {
    Linear(&'a mut Linear),
    Table(&'a mut Array1<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Standard,
    ResidualOutput,
}

type Visitor<'v> = dyn FnMut(&str, Param<'_>, Role) + 'v;

fn temporal_zeros(w: usize) -> TemporalAttentionWeights {
    TemporalAttentionWeights {
        query: Linear::zeros(w, w),
        key: Linear::zeros(w, w),
        value: Linear::zeros(w, w),
        output: Linear::zeros(w, w),
    }
}

fn visit_temporal(prefix: &str, t: &mut TemporalAttentionWeights, f: &mut Visitor<'_>) {
    f(&format!("{prefix}.query"), Param::Linear(&mut t.query), Role::Standard);
    f(&format!("{prefix}.key"), Param::Linear(&mut t.key), Role::Standard);
    f(&format!("{prefix}.value"), Param::Linear(&mut t.value), Role::Standard);
    f(
        &format!("{prefix}.output"),
        Param::Linear(&mut t.output),
        Role::ResidualOutput,
    );
}

impl WeightBundle {
    /// All-zero parameters with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Result<Self, WeightError> {
        config.validate()?;
        let c = config;
        let d = c.d;
        let nb = c.neighborhood_size();
        let [c0, c1, c2] = c.pyramid_channels;
        let skip_in = c.image_channels + c.bins;
        let tw = c.tracker_width;
        let fusion = FusionWeights {
            image_embed: Linear::zeros(c.patch * c.patch * c.image_channels, d),
            event_embed: Linear::zeros(c.patch * c.patch * c.bins, d),
            clwf: LocalAttention {
                query: Linear::zeros(d, d),
                key: Linear::zeros(d, d),
                value: Linear::zeros(d, d),
                locality_bias: Array1::zeros(nb),
            },
            updater: UpdaterWeights {
                query: Linear::zeros(d, d),
                key: Linear::zeros(d, d),
                value: Linear::zeros(d, d),
                output: Linear::zeros(d, d),
                locality_bias: Array1::zeros(nb),
            },
            temporal: temporal_zeros(d),
            decoder: DecoderWeights {
                mix: vec![Linear::zeros(d, c0), Linear::zeros(c0, c1), Linear::zeros(c1, c2)],
                skip: vec![
                    Linear::zeros(skip_in, c0),
                    Linear::zeros(skip_in, c1),
                    Linear::zeros(skip_in, c2),
                ],
            },
        };
        let taps = c.corr_taps();
        let tracker = TrackerWeights {
            corr: (0..3)
                .map(|_| CorrelationEncoder {
                    hidden: Linear::zeros(taps * taps, c.corr_embed),
                    out: Linear::zeros(c.corr_embed, c.corr_embed),
                })
                .collect(),
            input: Linear::zeros(c.tracker_input_width(), tw),
            blocks: (0..c.tracker_blocks)
                .map(|_| TrackerBlock {
                    attention: temporal_zeros(tw),
                    mlp_in: Linear::zeros(tw, 2 * tw),
                    mlp_out: Linear::zeros(2 * tw, tw),
                })
                .collect(),
            delta_position: Linear::zeros(tw, 2),
            delta_visibility: Linear::zeros(tw, 1),
        };
        Ok(Self {
            config: config.clone(),
            seed: 0,
            fusion,
            tracker,
        })
    }

    /// Deterministic initialization from `seed`.
    ///
    /// Every linear layer draws `uniform(-1/√fan_in, 1/√fan_in)` in a fixed
    /// traversal order; see [`InitScheme`] for what is zeroed.
    pub fn init(config: &ModelConfig, seed: u64, scheme: InitScheme) -> Result<Self, WeightError> {
        let mut bundle = Self::zeros(config)?;
        bundle.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        bundle.visit(&mut |_, param, role| match (param, role, scheme) {
            (Param::Linear(l), Role::ResidualOutput, InitScheme::ZeroResidual) => l.zero(),
            (Param::Linear(l), _, _) => l.fill_uniform(&mut rng),
            (Param::Table(t), _, InitScheme::ZeroResidual) => t.fill(0.0),
            (Param::Table(t), _, InitScheme::Dense) => t.mapv_inplace(|_| rng.random_range(-0.5..=0.5)),
        });
        Ok(bundle)
    }

    /// Visits every parameter in a fixed order with its dotted name.
    pub fn visit(&mut self, f: &mut Visitor<'_>) {
        let fu = &mut self.fusion;
        f("fusion.image_embed", Param::Linear(&mut fu.image_embed), Role::Standard);
        f("fusion.event_embed", Param::Linear(&mut fu.event_embed), Role::Standard);
        f("fusion.clwf.query", Param::Linear(&mut fu.clwf.query), Role::Standard);
        f("fusion.clwf.key", Param::Linear(&mut fu.clwf.key), Role::Standard);
        f("fusion.clwf.value", Param::Linear(&mut fu.clwf.value), Role::Standard);
        f(
            "fusion.clwf.locality_bias",
            Param::Table(&mut fu.clwf.locality_bias),
            Role::Standard,
        );
        f(
            "fusion.updater.query",
            Param::Linear(&mut fu.updater.query),
            Role::Standard,
        );
        f("fusion.updater.key", Param::Linear(&mut fu.updater.key), Role::Standard);
        f(
            "fusion.updater.value",
            Param::Linear(&mut fu.updater.value),
            Role::Standard,
        );
        f(
            "fusion.updater.output",
            Param::Linear(&mut fu.updater.output),
            Role::ResidualOutput,
        );
        f(
            "fusion.updater.locality_bias",
            Param::Table(&mut fu.updater.locality_bias),
            Role::Standard,
        );
        visit_temporal("fusion.temporal", &mut fu.temporal, f);
        for (i, l) in fu.decoder.mix.iter_mut().enumerate() {
            f(&format!("fusion.decoder.mix{i}"), Param::Linear(l), Role::Standard);
        }
        for (i, l) in fu.decoder.skip.iter_mut().enumerate() {
            f(&format!("fusion.decoder.skip{i}"), Param::Linear(l), Role::Standard);
        }
        let tr = &mut self.tracker;
        for (i, enc) in tr.corr.iter_mut().enumerate() {
            f(
                &format!("tracker.corr{i}.hidden"),
                Param::Linear(&mut enc.hidden),
                Role::Standard,
            );
            f(
                &format!("tracker.corr{i}.out"),
                Param::Linear(&mut enc.out),
                Role::Standard,
            );
        }
        f("tracker.input", Param::Linear(&mut tr.input), Role::Standard);
        for (i, b) in tr.blocks.iter_mut().enumerate() {
            visit_temporal(&format!("tracker.block{i}.attention"), &mut b.attention, f);
            f(
                &format!("tracker.block{i}.mlp_in"),
                Param::Linear(&mut b.mlp_in),
                Role::Standard,
            );
            f(
                &format!("tracker.block{i}.mlp_out"),
                Param::Linear(&mut b.mlp_out),
                Role::ResidualOutput,
            );
        }
        f(
            "tracker.delta_position",
            Param::Linear(&mut tr.delta_position),
            Role::ResidualOutput,
        );
        f(
            "tracker.delta_visibility",
            Param::Linear(&mut tr.delta_visibility),
            Role::ResidualOutput,
        );
    }

    /// Flattened `(name, tensor)` list in traversal order.
    pub fn named_tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.clone().visit(&mut |name, param, _| match param {
            Param::Linear(l) => {
                out.push((format!("{name}.weight"), l.weight.clone().into_dyn()));
                out.push((format!("{name}.bias"), l.bias.clone().into_dyn()));
            }
            Param::Table(t) => out.push((name.to_string(), t.clone().into_dyn())),
        });
        out
    }

    /// Whether every residual-branch output is exactly zero.
    pub fn has_zero_residuals(&self) -> bool {
        let mut all = true;
        self.clone().visit(&mut |_, param, role| {
            if let (Param::Linear(l), Role::ResidualOutput) = (param, role) {
                all &= l.is_zero();
            }
        });
        all
    }

    pub fn to_tfw1(&self) -> Vec<u8> {
        let mut out = WEIGHTS_MAGIC.to_vec();
        let seed = ArrayD::from_shape_vec(
            IxDyn(&[2]),
            vec![(self.seed >> 32) as f64, (self.seed & 0xffff_ffff) as f64],
        )
        .expect("two values");
        let mut records = vec![(SEED_RECORD.to_string(), seed)];
        records.extend(self.named_tensors());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Loads a `TFW1` container, validating every tensor against `config`.
    pub fn from_tfw1(bytes: &[u8], config: &ModelConfig) -> Result<Self, WeightError> {
        let mut records = read_records(bytes)?;
        let mut bundle = Self::zeros(config)?;
        if let Some(seed) = records.remove(SEED_RECORD) {
            if seed.len() == 2 {
                bundle.seed = ((seed[0] as u64) << 32) | seed[1] as u64;
            }
        }
        let mut failure = None;
        let mut take = |name: String, target: &mut [f64], shape: &[usize]| {
            if failure.is_some() {
                return;
            }
            match records.remove(&name) {
                None => failure = Some(WeightError::MissingTensor(name)),
                Some(t) if t.shape() != shape => {
                    failure = Some(WeightError::ShapeMismatch {
                        name,
                        expected: shape.to_vec(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(t) => target.iter_mut().zip(t.iter()).for_each(|(dst, src)| *dst = *src),
            }
        };
        bundle.visit(&mut |name, param, _| match param {
            Param::Linear(l) => {
                let ws = l.weight.shape().to_vec();
                let bs = l.bias.shape().to_vec();
                take(
                    format!("{name}.weight"),
                    l.weight.as_slice_mut().expect("standard layout"),
                    &ws,
                );
                take(
                    format!("{name}.bias"),
                    l.bias.as_slice_mut().expect("standard layout"),
                    &bs,
                );
            }
            Param::Table(t) => {
                let s = t.shape().to_vec();
                take(name.to_string(), t.as_slice_mut().expect("standard layout"), &s);
            }
        });
        if let Some(err) = failure {
            return Err(err);
        }
        if let Some(name) = records.keys().next() {
            return Err(WeightError::UnknownTensor(name.clone()));
        }
        Ok(bundle)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| WeightError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, WeightError> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize)
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_records(bytes: &[u8]) -> Result<BTreeMap<String, ArrayD<f64>>, WeightError> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(WeightError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let mut out = BTreeMap::new();
    while !cur.at_end() {
        let name_len = cur.u32("name length")?;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
            .map_err(|_| WeightError::Truncated("name is not UTF-8".into()))?;
        let rank = cur.u32("rank")?;
        let dims = (0..rank).map(|_| cur.u32("dims")).collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let payload = cur.take(8 * n, &format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.insert(
            name,
            ArrayD::from_shape_vec(IxDyn(&dims), data).expect("size matches dims"),
        );
    }
    Ok(out)
}
