use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tapfuse::events::{bin_events, exposure_window_events, parse_event_stream, serialize_event_stream};
use tapfuse::fusion::{taf_init, taf_update};
use tapfuse::metrics::{evaluate, smooth_track_set, EvalOptions, EvalPair, MetricReport};
use tapfuse::repr::build;
use tapfuse::synth::{render_intensity_video, simulate_events, IntensityVideo};
use tapfuse::tensor_io::{read_tensor, write_tensor};
use tapfuse::tracker::{frames_for_timeline, gray_to_channels, track_sequence, TrackStats};
use tapfuse::{Event, EventStream, EventTensor, Polarity, StreamFormat, TensorKind, Timeline, TrackSet, WeightBundle};

use crate::config::RunConfig;
use crate::error::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

pub const VIDEO_FILE: &str = "video.tns";
pub const GT_FILE: &str = "gt_tracks.txt";
pub const TRACKS_FILE: &str = "tracks.txt";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const BENCH_FILE: &str = "bench.json";

pub fn events_file(format: StreamFormat) -> String {
    format!("events.{}", format.extension())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::write(path, bytes).map_err(CliError::io(path))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(CliError::io(path))
}

/// Output file names with their SHA-256 digests, in write order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.entries.iter().map(|(n, h)| format!("{n}={h}")).collect();
        write!(f, "{}", parts.join(" "))
    }
}

fn video_array(video: &IntensityVideo) -> Array3<f64> {
    let views: Vec<_> = video.frames.iter().map(|f| f.view()).collect();
    ndarray::stack(Axis(0), &views).expect("frames share one shape")
}

/// Renders the scene, simulates its events and writes the video container,
/// the event stream and the ground-truth tracks into `out`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let (video, gt) = render_intensity_video(&cfg.scene)?;
    let stream = simulate_events(&video, cfg.contrast_threshold)?;
    let files = [
        (VIDEO_FILE.to_string(), write_tensor(&video_array(&video).into_dyn())),
        (events_file(cfg.format), serialize_event_stream(&stream, cfg.format)),
        (GT_FILE.to_string(), gt.tracks.to_text().into_bytes()),
    ];
    let mut entries = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        write(&out.join(&name), &bytes)?;
        entries.push((name, sha256_hex(&bytes)));
    }
    Ok(Manifest { entries })
}

/// Stream format from the file extension, falling back to `fallback`.
pub fn format_for(path: &Path, fallback: StreamFormat) -> StreamFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => StreamFormat::Csv,
        Some("evbin") => StreamFormat::Evbin,
        _ => fallback,
    }
}

pub fn load_stream(path: &Path, fallback: StreamFormat) -> Result<EventStream> {
    Ok(parse_event_stream(&read(path)?, format_for(path, fallback))?)
}

/// Reads a `T×H×W` video container written by [`simulate`]; frame times are
/// those of `cfg.scene`.
pub fn load_video(cfg: &RunConfig, path: &Path) -> Result<IntensityVideo> {
    let arr = read_tensor(&read(path)?)?;
    let arr = arr
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| CliError::Data(format!("{}: video must be a rank-3 T×H×W array", path.display())))?;
    let frame_times = cfg.scene.frame_times();
    if arr.len_of(Axis(0)) != frame_times.len() {
        return Err(CliError::Data(format!(
            "{}: {} frames, scene config implies {}",
            path.display(),
            arr.len_of(Axis(0)),
            frame_times.len()
        )));
    }
    let video = IntensityVideo {
        frames: arr.outer_iter().map(|f| f.to_owned()).collect(),
        frame_times,
        fps: cfg.scene.fps,
    };
    video.validate()?;
    Ok(video)
}

pub fn load_weights(cfg: &RunConfig, path: Option<&Path>) -> Result<WeightBundle> {
    match path {
        Some(p) => Ok(WeightBundle::from_tfw1(&read(p)?, &cfg.model)?),
        None => Ok(WeightBundle::init(&cfg.model, cfg.seed, cfg.init)?),
    }
}

#[derive(Debug, Clone)]
pub struct TrackInputs {
    pub events: PathBuf,
    pub frames: PathBuf,
    pub weights: Option<PathBuf>,
}

impl TrackInputs {
    /// The files [`simulate`] writes into `dir`.
    pub fn from_dir(dir: &Path, format: StreamFormat) -> Self {
        Self {
            events: dir.join(events_file(format)),
            frames: dir.join(VIDEO_FILE),
            weights: None,
        }
    }
}

/// Tracks the configured queries and writes `tracks.txt` into `out`.
pub fn track(cfg: &RunConfig, inputs: &TrackInputs, out: &Path) -> Result<(TrackSet, TrackStats)> {
    let stream = load_stream(&inputs.events, cfg.format)?;
    let video = load_video(cfg, &inputs.frames)?;
    let bundle = load_weights(cfg, inputs.weights.as_deref())?;
    let timeline = cfg.timeline()?;
    let frames = frames_for_timeline(&video, &timeline, cfg.model.image_channels)?;
    let (tracks, stats) = track_sequence(&frames, &stream, &timeline, &cfg.query_points(), &bundle)?;
    write(&out.join(TRACKS_FILE), tracks.to_text().as_bytes())?;
    Ok((tracks, stats))
}

pub fn load_tracks(path: &Path) -> Result<TrackSet> {
    let text = String::from_utf8(read(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(TrackSet::from_text(&text)?)
}

pub fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        fa_threshold: cfg.fa_threshold,
        xi_points: cfg.xi_points,
        ..EvalOptions::for_height(cfg.scene.height as f64)
    }
}

/// Scores `pred` against `reference` and writes `metrics.json` and
/// `metrics.csv` into `out`.
pub fn eval(cfg: &RunConfig, pred: &Path, reference: &Path, out: &Path) -> Result<MetricReport> {
    let height = cfg.scene.height as f64;
    let predicted = load_tracks(pred)?;
    let mut reference = load_tracks(reference)?;
    if let Some(cutoff) = cfg.smooth_cutoff {
        reference = smooth_track_set(&reference, cutoff, height);
    }
    let pair = EvalPair::new(predicted, reference, height)?;
    let report = evaluate(&pair, &eval_options(cfg))?;
    write(&out.join(METRICS_JSON), report.to_json().as_bytes())?;
    write(&out.join(METRICS_CSV), report.to_csv().as_bytes())?;
    Ok(report)
}

/// Builds the configured representation of query step `step` (bin
/// `(τ_{step-1}, τ_step]`) and writes it as a `H×W×B` container.
pub fn repr(cfg: &RunConfig, events: &Path, step: usize, out: &Path) -> Result<(EventTensor, PathBuf)> {
    let stream = load_stream(events, cfg.format)?;
    let batches = bin_events(&stream, &cfg.timeline()?)?;
    let batch = batches
        .get(step)
        .ok_or_else(|| CliError::Contract(format!("step {step} outside the {}-step query grid", batches.len())))?;
    let tensor = build(
        cfg.repr_kind,
        batch,
        stream.width() as usize,
        stream.height() as usize,
        cfg.model.bins,
    )?;
    let path = out.join(format!("{}_{step}.tns", cfg.repr_kind.name()));
    write(&path, &write_tensor(&tensor.data.clone().into_dyn()))?;
    Ok((tensor, path))
}

/// Throughput of the event pipeline and of the state update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub events: usize,
    pub steps: usize,
    pub threads: usize,
    /// `parse`, `bin` and one key per representation in events/s;
    /// `taf_update` in steps/s.
    pub throughput: BTreeMap<String, f64>,
}

impl BenchReport {
    pub const KEYS: [&'static str; 6] = [
        "parse",
        "bin",
        "time_surface",
        "count_image",
        "voxel_grid",
        "taf_update",
    ];

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

const BENCH_SPAN_US: u64 = 1_000_000;

/// Uniformly random events over the configured sensor and a one-second span.
pub fn synthetic_stream(cfg: &RunConfig, n: usize) -> Result<EventStream> {
    let (w, h) = (cfg.scene.width as u16, cfg.scene.height as u16);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut events: Vec<Event> = (0..n)
        .map(|_| {
            let p = if rng.random_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            Event::new(
                rng.random_range(1..=BENCH_SPAN_US),
                rng.random_range(0..w),
                rng.random_range(0..h),
                p,
            )
        })
        .collect();
    events.sort_by_key(|e| e.t);
    Ok(EventStream::new(w.into(), h.into(), 0, BENCH_SPAN_US, events)?)
}

fn rate(count: usize, start: Instant) -> f64 {
    count as f64 / start.elapsed().as_secs_f64().max(1e-12)
}

/// Times parsing, binning, the three representations and `taf_update` on
/// `cfg.bench_events` synthetic events.
pub fn bench(cfg: &RunConfig) -> Result<BenchReport> {
    let n = cfg.bench_events;
    let stream = synthetic_stream(cfg, n)?;
    let bytes = serialize_event_stream(&stream, StreamFormat::Evbin);
    let timeline = Timeline::uniform(0, BENCH_SPAN_US, cfg.scene.fps, cfg.scene.fps, cfg.exposure_us)?;
    let (w, h, bins) = (cfg.scene.width, cfg.scene.height, cfg.model.bins);
    let mut throughput = BTreeMap::new();

    let start = Instant::now();
    let parsed = parse_event_stream(&bytes, StreamFormat::Evbin)?;
    throughput.insert("parse".to_string(), rate(n, start));

    let start = Instant::now();
    let batches = bin_events(&parsed, &timeline)?;
    throughput.insert("bin".to_string(), rate(n, start));

    let updates = &batches[1..];
    for kind in TensorKind::ALL {
        let start = Instant::now();
        for b in updates {
            std::hint::black_box(build(kind, b, w, h, bins)?);
        }
        throughput.insert(kind.name().to_string(), rate(n, start));
    }

    let bundle = WeightBundle::init(&cfg.model, cfg.seed, cfg.init)?;
    let frame = gray_to_channels(Array2::from_elem((h, w), 0.5).view(), cfg.model.image_channels);
    let exposure = exposure_window_events(&parsed, timeline.query_times()[0], cfg.exposure_us);
    let mut state = taf_init(frame.view(), &exposure, &bundle).map_err(|e| CliError::Data(e.to_string()))?;
    let start = Instant::now();
    for b in updates {
        state = taf_update(&state, b, &bundle).map_err(|e| CliError::Data(e.to_string()))?;
    }
    throughput.insert("taf_update".to_string(), rate(updates.len(), start));
    std::hint::black_box(state);

    Ok(BenchReport {
        events: n,
        steps: batches.len(),
        threads: current_threads(),
        throughput,
    })
}

pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Sizes the global rayon pool from `TAPFUSE_THREADS` if set.
pub fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("TAPFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| format!("TAPFUSE_THREADS=`{v}` is not a thread count"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}
