#![cfg(feature = "parallel")]

use tapfuse::metrics::{evaluate, EvalOptions, EvalPair};
use tapfuse::repr::{build, TensorKind};
use tapfuse::synth::{render_intensity_video, simulate_events, SceneConfig};
use tapfuse::tracker::{frames_for_timeline, track_sequence, QueryPoint};
use tapfuse::{events::bin_events, InitScheme, ModelConfig, Timeline, WeightBundle};

fn pool(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let scene = SceneConfig::random(12, 32, 32, 500_000, 48.0, 3, 15.0);
    let (video, gt) = render_intensity_video(&scene).unwrap();
    let stream = simulate_events(&video, 0.2).unwrap();
    let timeline = Timeline::uniform(0, scene.duration_us, 48.0, 12.0, 10_000).unwrap();
    let frames = frames_for_timeline(&video, &timeline, 3).unwrap();
    let cfg = ModelConfig {
        d: 16,
        bins: 3,
        pyramid_channels: [8, 6, 4],
        corr_embed: 8,
        tracker_width: 16,
        motion_freqs: 4,
        ..ModelConfig::default()
    };
    let b = WeightBundle::init(&cfg, 5, InitScheme::Dense).unwrap();
    let queries: Vec<QueryPoint> = scene
        .objects
        .iter()
        .map(|o| QueryPoint { t_q: 0, x: o.x, y: o.y })
        .collect();
    let run = || {
        let bins = bin_events(&stream, &timeline).unwrap();
        let tensors: Vec<_> = TensorKind::ALL
            .iter()
            .flat_map(|&k| {
                bins.iter()
                    .filter(|b| b.duration() > 0)
                    .map(move |b| build(k, b, 32, 32, 5).unwrap())
            })
            .collect();
        let (tracks, stats) = track_sequence(&frames, &stream, &timeline, &queries, &b).unwrap();
        let reference = gt.tracks.clone();
        let ref_grid = tapfuse::TrackSet::new(
            tracks.times().to_vec(),
            scene.ground_truth(tracks.times()).tracks.tracks().to_vec(),
        )
        .unwrap();
        let report = evaluate(
            &EvalPair::new(tracks.clone(), ref_grid, 32.0).unwrap(),
            &EvalOptions::for_height(32.0),
        )
        .unwrap();
        (tensors, tracks, stats, report, reference)
    };
    let serial = pool(1).install(run);
    let parallel = pool(4).install(run);
    assert_eq!(serial, parallel);
}
