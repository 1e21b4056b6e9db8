use std::path::Path;
use std::process::{Command, Output};

use tapfuse::metrics::{evaluate, EvalPair};
use tapfuse::repr::build;
use tapfuse::tensor_io::read_tensor;
use tapfuse::{EventStream, InitScheme, ModelConfig, StreamFormat, TrackPoint, TrackSet, WeightBundle};
use tapfuse_cli::commands::{self, BenchReport, TrackInputs, GT_FILE, METRICS_CSV, METRICS_JSON, TRACKS_FILE};
use tapfuse_cli::{CliError, RunConfig};

const SMALL_MODEL: &str = "model.d = 16\nmodel.bins = 3\nmodel.pyramid_channels = 8,6,4\nmodel.corr_embed = 8\n\
                           model.tracker_width = 16\nmodel.motion_freqs = 4\n";

fn tapfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tapfuse"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn config(dir: &Path, text: &str) -> RunConfig {
    std::fs::write(dir.join("run.cfg"), text).unwrap();
    RunConfig::parse(text, None).unwrap()
}

fn sha256sum(path: &Path) -> String {
    let out = Command::new("sha256sum")
        .arg(path)
        .output()
        .expect("sha256sum available");
    String::from_utf8(out.stdout)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn simulate_manifest_matches_rehash_and_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "scene.duration_us = 500000\n");
    let run = |out: &str, seed: &str| {
        let o = tapfuse(
            dir.path(),
            &["simulate", "--config", "run.cfg", "--seed", seed, "--out", out],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let a = run("a", "5");
    assert_eq!(a.lines().count(), 1);
    for entry in a.split_whitespace() {
        let (name, hash) = entry.split_once('=').unwrap();
        assert_eq!(hash, sha256sum(&dir.path().join("a").join(name)), "{name}");
    }
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
}

#[test]
fn empty_scene_gives_empty_stream_and_constant_tracks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        &format!("scene.random_objects = 0\nscene.duration_us = 500000\ntrack.queries = 0:10:12; 83333:40.5:3\n{SMALL_MODEL}"),
    );
    commands::simulate(&cfg, dir.path()).unwrap();
    let stream = commands::load_stream(&dir.path().join("events.evbin"), StreamFormat::Evbin).unwrap();
    assert!(stream.is_empty());
    assert_eq!(
        commands::load_tracks(&dir.path().join(GT_FILE)).unwrap().num_queries(),
        0
    );
    let (tracks, _) = commands::track(&cfg, &TrackInputs::from_dir(dir.path(), cfg.format), dir.path()).unwrap();
    assert_eq!(tracks.num_queries(), 2);
    for (q, track) in cfg.query_points().iter().zip(tracks.tracks()) {
        assert!(track.iter().all(|p| (p.x, p.y) == (q.x, q.y)));
    }
}

#[test]
fn track_is_bit_identical_and_follows_the_query_grid() {
    let dir = tempfile::tempdir().unwrap();
    config(
        dir.path(),
        &format!("seed = 2\nscene.duration_us = 500000\n{SMALL_MODEL}model.init = dense\n"),
    );
    assert!(tapfuse(dir.path(), &["simulate", "--config", "run.cfg"])
        .status
        .success());
    let mut texts = Vec::new();
    for out in ["r1", "r2"] {
        let o = tapfuse(
            dir.path(),
            &[
                "track",
                "--config",
                "run.cfg",
                "--events",
                "events.evbin",
                "--frames",
                "video.tns",
                "--out",
                out,
            ],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        texts.push(std::fs::read(dir.path().join(out).join(TRACKS_FILE)).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
    let tracks = TrackSet::from_text(std::str::from_utf8(&texts[0]).unwrap()).unwrap();
    assert_eq!(tracks.num_steps(), 24);
    assert_eq!(tracks.num_queries(), 3);
}

#[test]
fn zero_residual_weights_track_constant_and_csv_matches_evbin() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("seed = 3\nscene.duration_us = 500000\n{SMALL_MODEL}");
    let cfg = config(dir.path(), &text);
    let csv_cfg = RunConfig::parse(&format!("{text}io.format = csv\n"), None).unwrap();
    commands::simulate(&cfg, dir.path()).unwrap();
    commands::simulate(&csv_cfg, dir.path()).unwrap();
    let a = commands::track(
        &cfg,
        &TrackInputs::from_dir(dir.path(), StreamFormat::Evbin),
        &dir.path().join("evbin"),
    )
    .unwrap();
    let b = commands::track(
        &csv_cfg,
        &TrackInputs::from_dir(dir.path(), StreamFormat::Csv),
        &dir.path().join("csv"),
    )
    .unwrap();
    assert_eq!(a, b);
    for (q, track) in cfg.query_points().iter().zip(a.0.tracks()) {
        assert!(track.iter().all(|p| (p.x, p.y, p.visible) == (q.x, q.y, true)));
    }
}

#[test]
fn weights_file_round_trips_and_shape_mismatch_is_a_contract_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        &format!("scene.duration_us = 500000\n{SMALL_MODEL}model.init = dense\n"),
    );
    commands::simulate(&cfg, dir.path()).unwrap();
    let bundle = WeightBundle::init(&cfg.model, cfg.seed, InitScheme::Dense).unwrap();
    std::fs::write(dir.path().join("w.tfw"), bundle.to_tfw1()).unwrap();
    let inputs = TrackInputs {
        weights: Some(dir.path().join("w.tfw")),
        ..TrackInputs::from_dir(dir.path(), cfg.format)
    };
    let from_file = commands::track(&cfg, &inputs, &dir.path().join("file")).unwrap();
    let from_seed = commands::track(
        &cfg,
        &TrackInputs::from_dir(dir.path(), cfg.format),
        &dir.path().join("seed"),
    )
    .unwrap();
    assert_eq!(from_file, from_seed);

    let other = WeightBundle::init(
        &ModelConfig {
            d: 8,
            ..cfg.model.clone()
        },
        0,
        InitScheme::Dense,
    )
    .unwrap();
    std::fs::write(dir.path().join("w8.tfw"), other.to_tfw1()).unwrap();
    let o = tapfuse(dir.path(), &["track", "--config", "run.cfg", "--weights", "w8.tfw"]);
    assert_eq!(o.status.code(), Some(CliError::CONTRACT));
}

fn random_tracks(seed: u64, times: &[u64]) -> TrackSet {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let tracks = (0..4)
        .map(|_| {
            times
                .iter()
                .map(|_| {
                    TrackPoint::new(
                        rng.random_range(0.0..64.0),
                        rng.random_range(0.0..64.0),
                        rng.random_bool(0.7),
                    )
                })
                .collect()
        })
        .collect();
    TrackSet::new(times.to_vec(), tracks).unwrap()
}

#[test]
fn eval_matches_in_process_metrics_and_self_eval_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let times: Vec<u64> = (0..30u64).map(|k| k * 20_833).collect();
    let (pred, reference) = (random_tracks(1, &times), random_tracks(2, &times));
    std::fs::write(dir.path().join("pred.txt"), pred.to_text()).unwrap();
    std::fs::write(dir.path().join("ref.txt"), reference.to_text()).unwrap();

    let o = tapfuse(
        dir.path(),
        &["eval", "--config", "run.cfg", "--pred", "pred.txt", "--ref", "ref.txt"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written =
        tapfuse::metrics::MetricReport::from_json(&std::fs::read_to_string(dir.path().join(METRICS_JSON)).unwrap())
            .unwrap();
    let pair = EvalPair::new(
        TrackSet::from_text(&pred.to_text()).unwrap(),
        TrackSet::from_text(&reference.to_text()).unwrap(),
        64.0,
    )
    .unwrap();
    assert_eq!(written, evaluate(&pair, &commands::eval_options(&cfg)).unwrap());
    assert_eq!(
        std::fs::read_to_string(dir.path().join(METRICS_CSV)).unwrap(),
        written.to_csv()
    );

    let same = commands::eval(
        &cfg,
        &dir.path().join("ref.txt"),
        &dir.path().join("ref.txt"),
        dir.path(),
    )
    .unwrap();
    assert_eq!([same.aj, same.delta_avg_vis, same.oa, same.fa, same.efa], [1.0; 5]);
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "seed = 1\n\nscene.colour = red\n").unwrap();
    let o = tapfuse(dir.path(), &["simulate", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(CliError::CONFIG));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    assert_eq!(
        tapfuse(dir.path(), &["simulate", "--config", "missing.cfg"])
            .status
            .code(),
        Some(CliError::CONFIG)
    );

    assert_eq!(tapfuse(dir.path(), &["track"]).status.code(), Some(CliError::DATA));
    std::fs::write(dir.path().join("garbage.txt"), "not a track file").unwrap();
    let o = tapfuse(dir.path(), &["eval", "--pred", "garbage.txt", "--ref", "garbage.txt"]);
    assert_eq!(o.status.code(), Some(CliError::DATA));

    let times: Vec<u64> = (0..10u64).map(|k| k * 1000).collect();
    std::fs::write(dir.path().join("p.txt"), random_tracks(1, &times).to_text()).unwrap();
    std::fs::write(dir.path().join("r.txt"), random_tracks(2, &times[..9]).to_text()).unwrap();
    let o = tapfuse(dir.path(), &["eval", "--pred", "p.txt", "--ref", "r.txt"]);
    assert_eq!(o.status.code(), Some(CliError::CONTRACT));
    assert!(String::from_utf8_lossy(&o.stderr).contains("time grid"));

    std::fs::write(
        dir.path().join("q.cfg"),
        "scene.duration_us = 500000\ntrack.queries = 0:100:5\n",
    )
    .unwrap();
    assert!(tapfuse(dir.path(), &["simulate", "--config", "q.cfg"]).status.success());
    let o = tapfuse(dir.path(), &["track", "--config", "q.cfg"]);
    assert_eq!(
        o.status.code(),
        Some(CliError::CONTRACT),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn repr_dump_equals_in_process_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "seed = 4\nscene.duration_us = 500000\nrepr.kind = voxel_grid\nmodel.bins = 4\n",
    );
    commands::simulate(&cfg, dir.path()).unwrap();
    let o = tapfuse(dir.path(), &["repr", "--config", "run.cfg", "--step", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dumped = read_tensor(&std::fs::read(dir.path().join("voxel_grid_7.tns")).unwrap()).unwrap();
    let stream: EventStream = commands::load_stream(&dir.path().join("events.evbin"), StreamFormat::Evbin).unwrap();
    let batches = tapfuse::events::bin_events(&stream, &cfg.timeline().unwrap()).unwrap();
    let expected = build(cfg.repr_kind, &batches[7], 64, 64, 4).unwrap();
    assert_eq!(dumped, expected.data.into_dyn());
    let o = tapfuse(dir.path(), &["repr", "--config", "run.cfg", "--step", "500"]);
    assert_eq!(o.status.code(), Some(CliError::CONTRACT));
}

#[test]
fn bench_reports_every_throughput_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = tapfuse(dir.path(), &["bench", "--events", "20000", "--out", "b"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let obj = v["throughput"].as_object().unwrap();
    assert_eq!(obj.len(), BenchReport::KEYS.len());
    for k in BenchReport::KEYS {
        assert!(obj[k].as_f64().unwrap() > 0.0, "{k}");
    }
    assert_eq!(v["events"], 20000);
    let on_disk: BenchReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("b/bench.json")).unwrap()).unwrap();
    assert_eq!(on_disk.events, 20000);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    config(
        dir.path(),
        &format!("seed = 9\nscene.duration_us = 500000\n{SMALL_MODEL}model.init = dense\n"),
    );
    assert!(tapfuse(dir.path(), &["simulate", "--config", "run.cfg"])
        .status
        .success());
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let o = Command::new(env!("CARGO_BIN_EXE_tapfuse"))
            .current_dir(dir.path())
            .env("TAPFUSE_THREADS", threads)
            .args([
                "track",
                "--config",
                "run.cfg",
                "--events",
                "events.evbin",
                "--frames",
                "video.tns",
                "--out",
                threads,
            ])
            .output()
            .unwrap();
        assert!(o.status.success());
        outputs.push(std::fs::read(dir.path().join(threads).join(TRACKS_FILE)).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
