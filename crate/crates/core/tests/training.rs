use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfsplat::io::{SceneCheckpoint, Split};
use rfsplat::oracle::{generate_dataset, GenerateConfig};
use rfsplat::render::render_frame;
use rfsplat::train::{densify, evaluate, initial_scene, prune, train_loop, CheckpointWriter, TrainConfig};
use rfsplat::Vec3;
use tempfile::TempDir;

fn small_run() -> (rfsplat::io::Dataset, TrainConfig) {
    let data = generate_dataset(&GenerateConfig {
        samples: 12,
        n_az: 24,
        n_el: 12,
        cell_deg: 15.0,
        ..GenerateConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        iterations: 60,
        cube_edge: 2.0,
        densify_every: 20,
        prune_every: 20,
        checkpoint_every: 20,
        ..TrainConfig::default()
    };
    (data, cfg)
}

#[test]
fn checkpoints_are_written_on_schedule_and_reload() {
    let (data, cfg) = small_run();
    let dir = TempDir::new().unwrap();
    let mut scene = initial_scene(&data, &cfg).unwrap();
    let summary = train_loop(&mut scene, &data, &cfg, Some(dir.path())).unwrap();
    assert_eq!(summary.trace.len(), 60);
    for k in [20, 40, 60] {
        let c = SceneCheckpoint::load(&CheckpointWriter::path_for(dir.path(), k)).unwrap();
        assert_eq!(c.iteration, k);
        assert_eq!(c.config, cfg);
    }
    let last = SceneCheckpoint::load(&CheckpointWriter::path_for(dir.path(), 60)).unwrap();
    assert_eq!(last.scene, scene);
    assert_eq!(
        last.to_bytes().unwrap(),
        SceneCheckpoint::new(60, &cfg, &scene).to_bytes().unwrap()
    );
}

#[test]
fn trace_tracks_primitive_count() {
    let (data, cfg) = small_run();
    let mut scene = initial_scene(&data, &cfg).unwrap();
    let summary = train_loop(&mut scene, &data, &cfg, None).unwrap();
    let last = summary.trace.last().unwrap();
    assert_eq!(last.primitives, scene.len());
    let first = summary.trace.first().unwrap().primitives;
    assert_eq!(
        first as isize + summary.cloned as isize + summary.split as isize - summary.pruned as isize,
        scene.len() as isize
    );
    assert!(summary.trace.iter().all(|r| r.total.is_finite() && r.total >= 0.0));
}

#[test]
fn evaluation_covers_each_split() {
    let (data, cfg) = small_run();
    let scene = initial_scene(&data, &cfg).unwrap();
    let test = evaluate(&scene, &data, Split::Test).unwrap();
    let train = evaluate(&scene, &data, Split::Train).unwrap();
    assert_eq!(test.samples.len() + train.samples.len(), data.samples.len());
    assert!(test.aggregate.unwrap().mse >= 0.0);
}

#[test]
fn fully_pruned_scene_renders_zero_and_survives_densify() {
    let (data, cfg) = small_run();
    let mut scene = initial_scene(&data, &cfg).unwrap();
    let n = scene.len();
    assert_eq!(prune(&mut scene, 1.0).len(), n);
    let frame = render_frame(&scene, &Vec3::new(3.0, 1.0, 0.5)).unwrap();
    assert!(frame.values.iter().all(|z| z.norm() == 0.0));
    let report = densify(&mut scene, &[], &[], 1e-4, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(report.cloned.is_empty() && report.split.is_empty());
}
