//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, keys are dotted
//! (`scene.fps = 48`). Every key has a default; unknown keys are rejected
//! with their line number.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

use tapfuse::synth::{ObjectShape, SceneConfig, SceneObject};
use tapfuse::tracker::QueryPoint;
use tapfuse::{InitScheme, ModelConfig, StreamFormat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { key: String, line: usize },
    #[error("line {line}: invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, line: usize, reason: String },
    #[error("{0}")]
    Inconsistent(String),
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuerySource {
    /// One query per scene object at its position at time 0.
    Objects,
    Explicit(Vec<QueryPoint>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub contrast_threshold: f64,
    pub frame_rate: f64,
    pub exposure_us: u64,
    pub model: ModelConfig,
    pub init: InitScheme,
    pub queries: QuerySource,
    pub format: StreamFormat,
    pub fa_threshold: f64,
    /// Spike cutoff applied to the reference before evaluation; `None` skips it.
    pub smooth_cutoff: Option<f64>,
    pub xi_points: usize,
    pub bench_events: usize,
    pub repr_kind: tapfuse::TensorKind,
    pub repr_step: usize,
}

const RANDOM_OBJECTS: usize = 3;
const MAX_SPEED: f64 = 10.0;

impl Default for RunConfig {
    fn default() -> Self {
        Self::build(&Raw::default(), 0).expect("defaults are valid")
    }
}

/// Parsed but uninterpreted assignments: key → (value, line).
#[derive(Debug, Default, Clone)]
struct Raw(BTreeMap<String, (String, usize)>);

impl Raw {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or(ConfigError::Syntax { line: line_no })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax { line: line_no });
            }
            if map.insert(k.to_string(), (v.to_string(), line_no)).is_some() {
                return Err(ConfigError::DuplicateKey {
                    key: k.into(),
                    line: line_no,
                });
            }
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
                key: key.into(),
                line: *line,
                reason: e.to_string(),
            }),
        }
    }

    fn line(&self, key: &str) -> usize {
        self.0.get(key).map(|(_, l)| *l).unwrap_or(0)
    }

    fn invalid(&self, key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::InvalidValue {
            key: key.into(),
            line: self.line(key),
            reason: reason.into(),
        }
    }
}

const SCALAR_KEYS: &[&str] = &[
    "seed",
    "scene.width",
    "scene.height",
    "scene.duration_us",
    "scene.fps",
    "scene.background",
    "scene.random_objects",
    "scene.max_speed",
    "sim.contrast_threshold",
    "timeline.frame_rate",
    "timeline.exposure_us",
    "model.d",
    "model.patch",
    "model.radius",
    "model.bins",
    "model.window",
    "model.corr_radius",
    "model.iterations",
    "model.corr_embed",
    "model.tracker_width",
    "model.motion_freqs",
    "model.tracker_blocks",
    "model.pyramid_channels",
    "model.initial_visibility_logit",
    "model.init",
    "track.queries",
    "io.format",
    "eval.fa_threshold",
    "eval.smooth_cutoff",
    "eval.xi_points",
    "bench.events",
    "repr.kind",
    "repr.step",
];

const OBJECT_FIELDS: &[&str] = &["shape", "x", "y", "vx", "vy", "size", "peak"];

fn parse_init(s: &str) -> Result<InitScheme, String> {
    match s {
        "zero_residual" => Ok(InitScheme::ZeroResidual),
        "dense" => Ok(InitScheme::Dense),
        other => Err(format!("`{other}` is not zero_residual or dense")),
    }
}

/// `t_us:x:y` entries separated by `;`, or `objects`.
fn parse_queries(s: &str) -> Result<QuerySource, String> {
    if s == "objects" {
        return Ok(QuerySource::Objects);
    }
    s.split(';')
        .map(str::trim)
        .filter(|q| !q.is_empty())
        .map(|q| {
            let parts: Vec<&str> = q.split(':').map(str::trim).collect();
            match parts.as_slice() {
                [t, x, y] => Ok(QueryPoint {
                    t_q: t.parse().map_err(|e| format!("query `{q}`: {e}"))?,
                    x: x.parse().map_err(|e| format!("query `{q}`: {e}"))?,
                    y: y.parse().map_err(|e| format!("query `{q}`: {e}"))?,
                }),
                _ => Err(format!("query `{q}` is not t_us:x:y")),
            }
        })
        .collect::<Result<Vec<_>, _>>()
        .map(QuerySource::Explicit)
}

fn parse_channels(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| "expected three comma-separated widths".to_string())
}

impl RunConfig {
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self, ConfigError> {
        let raw = Raw::parse(text)?;
        let seed = match seed_override {
            Some(s) => s,
            None => raw.get("seed", 0u64)?,
        };
        Self::build(&raw, seed)
    }

    fn build(raw: &Raw, seed: u64) -> Result<Self, ConfigError> {
        let mut objects: BTreeMap<usize, BTreeMap<&str, (&str, usize)>> = BTreeMap::new();
        for (key, (value, line)) in &raw.0 {
            if SCALAR_KEYS.contains(&key.as_str()) {
                continue;
            }
            let unknown = || ConfigError::UnknownKey {
                key: key.clone(),
                line: *line,
            };
            let rest = key.strip_prefix("scene.object.").ok_or_else(unknown)?;
            let (idx, field) = rest.split_once('.').ok_or_else(unknown)?;
            let idx: usize = idx.parse().map_err(|_| unknown())?;
            let field = OBJECT_FIELDS.iter().find(|f| **f == field).ok_or_else(unknown)?;
            objects.entry(idx).or_default().insert(field, (value.as_str(), *line));
        }

        let width: usize = raw.get("scene.width", 64)?;
        let height: usize = raw.get("scene.height", 64)?;
        let duration_us: u64 = raw.get("scene.duration_us", 2_000_000)?;
        let fps: f64 = raw.get("scene.fps", 48.0)?;
        let mut scene = SceneConfig::random(
            seed,
            width,
            height,
            duration_us,
            fps,
            raw.get("scene.random_objects", RANDOM_OBJECTS)?,
            raw.get("scene.max_speed", MAX_SPEED)?,
        );
        if raw.0.contains_key("scene.background") {
            scene.background = raw.get("scene.background", 0.25)?;
        }
        if !objects.is_empty() {
            scene.objects = objects
                .into_iter()
                .map(|(i, fields)| object_from(i, &fields))
                .collect::<Result<_, _>>()?;
        }
        scene
            .validate()
            .map_err(|e| ConfigError::Inconsistent(format!("scene: {e}")))?;

        let defaults = ModelConfig::default();
        let model = ModelConfig {
            d: raw.get("model.d", defaults.d)?,
            patch: raw.get("model.patch", defaults.patch)?,
            radius: raw.get("model.radius", defaults.radius)?,
            bins: raw.get("model.bins", defaults.bins)?,
            window: raw.get("model.window", defaults.window)?,
            corr_radius: raw.get("model.corr_radius", defaults.corr_radius)?,
            iterations: raw.get("model.iterations", defaults.iterations)?,
            corr_embed: raw.get("model.corr_embed", defaults.corr_embed)?,
            tracker_width: raw.get("model.tracker_width", defaults.tracker_width)?,
            motion_freqs: raw.get("model.motion_freqs", defaults.motion_freqs)?,
            tracker_blocks: raw.get("model.tracker_blocks", defaults.tracker_blocks)?,
            initial_visibility_logit: raw.get("model.initial_visibility_logit", defaults.initial_visibility_logit)?,
            pyramid_channels: match raw.0.get("model.pyramid_channels") {
                None => defaults.pyramid_channels,
                Some((v, _)) => parse_channels(v).map_err(|r| raw.invalid("model.pyramid_channels", r))?,
            },
            ..defaults
        };
        model
            .validate()
            .map_err(|e| ConfigError::Inconsistent(format!("model: {e}")))?;
        if !model.patch.is_multiple_of(4) || !width.is_multiple_of(model.patch) || !height.is_multiple_of(model.patch) {
            return Err(ConfigError::Inconsistent(format!(
                "image {width}x{height} must tile into patches of {} (a multiple of 4)",
                model.patch
            )));
        }

        let init = match raw.0.get("model.init") {
            None => InitScheme::ZeroResidual,
            Some((v, _)) => parse_init(v).map_err(|r| raw.invalid("model.init", r))?,
        };
        let queries = match raw.0.get("track.queries") {
            None => QuerySource::Objects,
            Some((v, _)) => parse_queries(v).map_err(|r| raw.invalid("track.queries", r))?,
        };
        let smooth_cutoff = match raw.0.get("eval.smooth_cutoff") {
            None => None,
            Some((v, _)) if v == "off" => None,
            Some(_) => Some(raw.get("eval.smooth_cutoff", 0.0)?),
        };
        let contrast_threshold: f64 = raw.get("sim.contrast_threshold", tapfuse::synth::DEFAULT_CONTRAST_THRESHOLD)?;
        if !(contrast_threshold > 0.0) {
            return Err(raw.invalid("sim.contrast_threshold", "must be positive"));
        }
        let cfg = Self {
            seed,
            scene,
            contrast_threshold,
            frame_rate: raw.get("timeline.frame_rate", 12.0)?,
            exposure_us: raw.get("timeline.exposure_us", 10_000)?,
            model,
            init,
            queries,
            format: raw.get("io.format", StreamFormat::Evbin)?,
            fa_threshold: raw.get("eval.fa_threshold", tapfuse::metrics::DEFAULT_FA_THRESHOLD)?,
            smooth_cutoff,
            xi_points: raw.get("eval.xi_points", 101)?,
            bench_events: raw.get("bench.events", 1_000_000)?,
            repr_kind: raw.get("repr.kind", tapfuse::TensorKind::TimeSurface)?,
            repr_step: raw.get("repr.step", 1)?,
        };
        cfg.timeline()
            .map_err(|e| ConfigError::Inconsistent(format!("timeline: {e}")))?;
        Ok(cfg)
    }

    /// Query grid at the scene's frame rate with frames every
    /// `scene.fps / timeline.frame_rate` steps.
    pub fn timeline(&self) -> Result<tapfuse::Timeline, tapfuse::events::EventError> {
        tapfuse::Timeline::uniform(
            0,
            self.scene.duration_us,
            self.scene.fps,
            self.frame_rate,
            self.exposure_us,
        )
    }

    pub fn query_points(&self) -> Vec<QueryPoint> {
        match &self.queries {
            QuerySource::Explicit(q) => q.clone(),
            QuerySource::Objects => self
                .scene
                .objects
                .iter()
                .map(|o| QueryPoint { t_q: 0, x: o.x, y: o.y })
                .collect(),
        }
    }
}

fn object_from(i: usize, fields: &BTreeMap<&str, (&str, usize)>) -> Result<SceneObject, ConfigError> {
    let num = |name: &str, default: Option<f64>| -> Result<f64, ConfigError> {
        match fields.get(name) {
            Some((v, line)) => v
                .parse()
                .map_err(|e: std::num::ParseFloatError| ConfigError::InvalidValue {
                    key: format!("scene.object.{i}.{name}"),
                    line: *line,
                    reason: e.to_string(),
                }),
            None => default.ok_or_else(|| ConfigError::Inconsistent(format!("scene.object.{i}.{name} is required"))),
        }
    };
    let shape = match fields.get("shape") {
        None => ObjectShape::GaussianBlob,
        Some((v, line)) => v.parse().map_err(|e: String| ConfigError::InvalidValue {
            key: format!("scene.object.{i}.shape"),
            line: *line,
            reason: e,
        })?,
    };
    Ok(SceneObject {
        shape,
        x: num("x", None)?,
        y: num("y", None)?,
        vx: num("vx", Some(0.0))?,
        vy: num("vy", Some(0.0))?,
        size: num("size", Some(5.0))?,
        peak: num("peak", Some(0.8))?,
    })
}
