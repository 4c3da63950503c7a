use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use planesweep::io::{cam_txt, metrics, pfm, ply};
use planesweep::{CameraParams, DepthMap, ImageGrid, PointCloud, RunConfig};

#[test]
fn depth_and_image_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let depth = DepthMap::from_fn(13, 7, |x, _| (x % 4 != 0).then(|| rng.random_range(1.0f32..9.0) as f64));
    let path = dir.path().join("d.pfm");
    pfm::write_depth(&path, &depth).unwrap();
    assert_eq!(pfm::read_depth(&path).unwrap(), depth);

    let image = ImageGrid::from_fn(13, 7, 3, |_, _, _| rng.random::<f32>() as f64);
    let path = dir.path().join("i.pfm");
    pfm::write_image(&path, &image).unwrap();
    assert_eq!(pfm::read_image(&path).unwrap(), image);
}

#[test]
fn point_cloud_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let points: Vec<Vector3<f64>> = (0..1000)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-5.0f32..5.0) as f64))
        .collect();
    let colors = Some((0..1000).map(|i| [i as u8, (i / 4) as u8, 7]).collect());
    let cloud = PointCloud { points, colors };
    let path = dir.path().join("c.ply");
    ply::write(&path, &cloud).unwrap();
    assert_eq!(ply::read(&path).unwrap(), cloud);
}

#[test]
fn camera_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
    let r = nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.05).into_inner();
    let cam = CameraParams::from_parts(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)], r, Vector3::new(-1.0, 0.2, 0.3), (2.0, 8.0), (100, 100)).unwrap();
    let path = dir.path().join("00000000_cam.txt");
    cam_txt::write(&path, &cam, cam_txt::DEFAULT_NUM_DEPTH).unwrap();
    assert_eq!(cam_txt::read(&path, 100, 100).unwrap(), cam);
}

#[test]
fn metrics_and_config_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = vec![("stage1.pc".to_string(), 0.125), ("total".to_string(), 3.0)];
    let path = dir.path().join("m.txt");
    metrics::write(&path, &pairs).unwrap();
    assert_eq!(metrics::read(&path).unwrap(), pairs);

    let mut cfg = RunConfig::default();
    cfg.set("stage2.num_hypotheses", "24").unwrap();
    cfg.set("fusion.reproj_px", "0.75").unwrap();
    let path = dir.path().join("run.txt");
    std::fs::write(&path, cfg.render()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}
