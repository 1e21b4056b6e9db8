use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tapfuse::fusion::{FeaturePyramid, PyramidLevel};
use tapfuse::synth::{render_intensity_video, simulate_events, ObjectShape, SceneConfig, SceneObject};
use tapfuse::tracker::{frames_for_timeline, refine_track, track_sequence, QueryPoint, TrackState, TrackerError};
use tapfuse::{EventStream, InitScheme, ModelConfig, Timeline, WeightBundle};

fn small() -> ModelConfig {
    ModelConfig {
        d: 16,
        bins: 3,
        pyramid_channels: [8, 6, 4],
        corr_embed: 8,
        tracker_width: 16,
        motion_freqs: 4,
        ..ModelConfig::default()
    }
}

struct Sequence {
    frames: Vec<Array3<f64>>,
    stream: EventStream,
    timeline: Timeline,
    scene: SceneConfig,
}

fn sequence(scene: SceneConfig, frame_rate: f64) -> Sequence {
    let (video, _) = render_intensity_video(&scene).unwrap();
    let stream = simulate_events(&video, 0.2).unwrap();
    let timeline = Timeline::uniform(0, scene.duration_us, scene.fps, frame_rate, 10_000).unwrap();
    let frames = frames_for_timeline(&video, &timeline, 3).unwrap();
    Sequence {
        frames,
        stream,
        timeline,
        scene,
    }
}

fn static_scene() -> SceneConfig {
    let obj = |shape, x, y, size| SceneObject {
        shape,
        x,
        y,
        vx: 0.0,
        vy: 0.0,
        size,
        peak: 0.8,
    };
    SceneConfig {
        width: 64,
        height: 64,
        duration_us: 2_000_000,
        fps: 48.0,
        objects: vec![
            obj(ObjectShape::GaussianBlob, 20.0, 22.0, 5.0),
            obj(ObjectShape::TexturedSquare, 44.0, 40.0, 7.0),
            obj(ObjectShape::GaussianBlob, 10.5, 50.25, 4.0),
        ],
        background: 0.25,
    }
}

#[test]
fn twelve_over_forty_eight_cadence_and_identity_tracks() {
    let seq = sequence(SceneConfig::random(3, 64, 64, 2_000_000, 48.0, 3, 10.0), 12.0);
    let b = WeightBundle::init(&ModelConfig::default(), 7, InitScheme::ZeroResidual).unwrap();
    let queries = [
        QueryPoint {
            t_q: 0,
            x: 12.0,
            y: 30.5,
        },
        QueryPoint {
            t_q: seq.timeline.query_times()[10],
            x: 40.25,
            y: 8.0,
        },
    ];
    let (tracks, stats) = track_sequence(&seq.frames, &seq.stream, &seq.timeline, &queries, &b).unwrap();
    assert_eq!(stats.init_calls, 24);
    assert_eq!(stats.update_calls, 72);
    assert_eq!(tracks.num_steps(), 96);
    assert_eq!(tracks.times(), seq.timeline.query_times());
    for (q, tr) in queries.iter().zip(tracks.tracks()) {
        for (k, p) in tr.iter().enumerate() {
            assert_eq!((p.x, p.y), (q.x, q.y));
            assert_eq!(p.visible, tracks.times()[k] >= q.t_q);
        }
    }
}

#[test]
fn identity_tracker_reproduces_static_ground_truth() {
    let seq = sequence(static_scene(), 12.0);
    let gt = seq.scene.ground_truth(seq.timeline.query_times());
    let b = WeightBundle::init(&small(), 8, InitScheme::ZeroResidual).unwrap();
    let queries: Vec<QueryPoint> = seq
        .scene
        .objects
        .iter()
        .map(|o| QueryPoint { t_q: 0, x: o.x, y: o.y })
        .collect();
    let (tracks, _) = track_sequence(&seq.frames, &seq.stream, &seq.timeline, &queries, &b).unwrap();
    assert_eq!(tracks, gt.tracks);
}

#[test]
fn dense_weights_are_deterministic_and_move_tracks() {
    let seq = sequence(SceneConfig::random(5, 32, 32, 500_000, 48.0, 2, 20.0), 12.0);
    let b = WeightBundle::init(&small(), 9, InitScheme::Dense).unwrap();
    let queries = [QueryPoint {
        t_q: 0,
        x: 15.0,
        y: 15.0,
    }];
    let run = || track_sequence(&seq.frames, &seq.stream, &seq.timeline, &queries, &b).unwrap();
    let (a, sa) = run();
    let (bb, sb) = run();
    assert_eq!(a, bb);
    assert_eq!(sa, sb);
    assert!(a.tracks()[0].iter().any(|p| p.x != 15.0));
}

#[test]
fn output_density_is_fixed_by_the_query_grid() {
    let scene = SceneConfig::random(4, 32, 32, 1_000_000, 150.0, 2, 10.0);
    let b = WeightBundle::init(&small(), 10, InitScheme::ZeroResidual).unwrap();
    for (rate, frames) in [(75.0, 75), (37.5, 38), (25.0, 25), (18.75, 19), (12.5, 13), (9.375, 10)] {
        let seq = sequence(scene.clone(), rate);
        let q = [QueryPoint { t_q: 0, x: 3.0, y: 4.0 }];
        let (tracks, stats) = track_sequence(&seq.frames, &seq.stream, &seq.timeline, &q, &b).unwrap();
        assert_eq!(tracks.num_steps(), 150, "rate {rate}");
        assert_eq!(stats.init_calls, frames, "rate {rate}");
        assert_eq!(stats.update_calls, 150 - frames, "rate {rate}");
    }
}

#[test]
fn rejects_bad_queries_and_frames() {
    let seq = sequence(SceneConfig::random(6, 32, 32, 250_000, 48.0, 1, 5.0), 12.0);
    let b = WeightBundle::init(&small(), 1, InitScheme::ZeroResidual).unwrap();
    let off_grid = [QueryPoint { t_q: 7, x: 1.0, y: 1.0 }];
    assert_eq!(
        track_sequence(&seq.frames, &seq.stream, &seq.timeline, &off_grid, &b).unwrap_err(),
        TrackerError::QueryOutOfRange { index: 0 }
    );
    let outside = [
        QueryPoint { t_q: 0, x: 1.0, y: 1.0 },
        QueryPoint {
            t_q: 0,
            x: 40.0,
            y: 1.0,
        },
    ];
    assert_eq!(
        track_sequence(&seq.frames, &seq.stream, &seq.timeline, &outside, &b).unwrap_err(),
        TrackerError::QueryOutOfRange { index: 1 }
    );
    assert!(matches!(
        track_sequence(&seq.frames[1..], &seq.stream, &seq.timeline, &outside[..1], &b),
        Err(TrackerError::FrameCountMismatch { .. })
    ));
}

fn random_pyramids(rng: &mut ChaCha8Rng, n: usize) -> Vec<FeaturePyramid> {
    (0..n)
        .map(|_| FeaturePyramid {
            levels: [(4, 8, 8), (8, 6, 4), (16, 4, 2)]
                .iter()
                .map(|&(s, c, stride)| PyramidLevel {
                    data: Array3::from_shape_fn((s, s, c), |_| rng.random_range(-1.0..1.0)),
                    stride,
                })
                .collect(),
        })
        .collect()
}

#[test]
fn refinement_identity_composition_and_window_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = small();
    assert_eq!((cfg.window, cfg.corr_radius, cfg.iterations), (16, 3, 3));
    let pyr = random_pyramids(&mut rng, 16);
    let refs: Vec<&FeaturePyramid> = pyr.iter().collect();
    let times: Vec<u64> = (0..16).map(|k| k * 20_833).collect();
    let init = TrackState::constant(13.0, 17.5, 1.0, times);

    let zero = WeightBundle::init(&cfg, 2, InitScheme::ZeroResidual).unwrap();
    for m in 1..4 {
        assert_eq!(refine_track(&init, &refs, &zero, m).unwrap(), init);
    }

    let dense = WeightBundle::init(&cfg, 3, InitScheme::Dense).unwrap();
    let once = refine_track(&init, &refs, &dense, 1).unwrap();
    let twice = refine_track(&once, &refs, &dense, 1).unwrap();
    assert_eq!(twice, refine_track(&init, &refs, &dense, 2).unwrap());
    assert_ne!(once, init);
    assert_eq!(
        refine_track(&init, &refs, &dense, 3).unwrap(),
        refine_track(&init, &refs, &dense, 3).unwrap()
    );
    assert!(matches!(
        refine_track(&init, &refs, &dense, 0),
        Err(TrackerError::NoIterations)
    ));
}
