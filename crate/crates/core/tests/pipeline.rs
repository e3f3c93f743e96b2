use primseg::config::Config;
use primseg::geometry::PrimitiveType;
use primseg::metrics::{match_segments, seg_iou};
use primseg::pipeline::{merge_segments, prepare, run_pipeline, segment, MergeOptions};
use primseg::synth::{generate_scene, PrimitiveSpec, RandomSceneSpec, Scene, SceneSpec, Surface};

fn scene(seed: u64, noise: f64, primitives: Vec<PrimitiveSpec>) -> Scene {
    generate_scene(&SceneSpec {
        primitives,
        random: None,
        ..SceneSpec::random(seed, noise)
    })
    .unwrap()
}

fn plane(points: usize) -> PrimitiveSpec {
    PrimitiveSpec {
        surface: Surface::Plane {
            origin: [0.0, 0.0, 0.0],
            normal: [0.0, 0.0, 1.0],
            u_dir: [1.0, 0.0, 0.0],
            half_extent: [0.5, 0.5],
        },
        points,
    }
}

fn sphere(center: [f64; 3], points: usize) -> PrimitiveSpec {
    PrimitiveSpec {
        surface: Surface::Sphere { center, radius: 0.3 },
        points,
    }
}

#[test]
fn single_plane_is_one_plane_segment() {
    let s = scene(1, 0.0, vec![plane(500)]);
    let cfg = Config::default();
    for attrs in [None, Some(s.attrs.as_slice())] {
        let seg = segment(&s.cloud, attrs, &cfg).unwrap();
        assert_eq!(seg.num_segments(), 1);
        assert_eq!(seg.segments[0].kind, PrimitiveType::Plane);
        assert_eq!(seg.labels.len(), 500);
    }
}

#[test]
fn two_far_spheres() {
    let s = scene(2, 0.0, vec![sphere([0.0, 0.0, 0.0], 400), sphere([3.0, 0.0, 0.0], 400)]);
    let seg = segment(&s.cloud, None, &Config::default()).unwrap();
    assert_eq!(seg.num_segments(), 2);
    assert!(seg.segments.iter().all(|x| x.kind == PrimitiveType::Sphere));
    let a = match_segments(&seg, &s.gt).unwrap();
    assert!((seg_iou(&seg, &s.gt, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn six_primitive_scene() {
    let spec = SceneSpec {
        random: Some(RandomSceneSpec {
            min_primitives: 6,
            max_primitives: 6,
            ..RandomSceneSpec::default()
        }),
        ..SceneSpec::random(5, 0.0)
    };
    let s = generate_scene(&spec).unwrap();
    let seg = segment(&s.cloud, None, &Config::default()).unwrap();
    let a = match_segments(&seg, &s.gt).unwrap();
    let iou = seg_iou(&seg, &s.gt, &a).unwrap();
    assert!(iou >= 0.95, "seg-iou {iou}");
}

#[test]
fn deterministic_labels() {
    let s = generate_scene(&SceneSpec::random(8, 0.002)).unwrap();
    let cfg = Config::default();
    let a = segment(&s.cloud, None, &cfg).unwrap();
    let b = segment(&s.cloud, None, &cfg).unwrap();
    assert_eq!(a.labels, b.labels);
}

#[test]
fn subsampled_run_labels_every_point() {
    let s = scene(3, 0.0, vec![plane(400), sphere([0.0, 0.0, 1.5], 400)]);
    let cfg = Config {
        dense_cap: 300,
        ..Config::default()
    };
    let out = run_pipeline(&s.cloud, None, &cfg).unwrap();
    assert_eq!(out.prepared.sample.len(), 300);
    assert_eq!(out.segmentation.labels.len(), 800);
    let a = match_segments(&out.segmentation, &s.gt).unwrap();
    assert!(seg_iou(&out.segmentation, &s.gt, &a).unwrap() > 0.95);
}

#[test]
fn merge_joins_pieces_of_one_primitive_only() {
    let s = scene(4, 0.0, vec![plane(300), sphere([0.0, 0.0, 0.6], 300)]);
    let prep = prepare(&s.cloud, None, &Config::default()).unwrap();
    // Split the plane in two along x; keep the sphere whole.
    let split: Vec<usize> = (0..prep.cloud.len())
        .map(|i| {
            if s.gt.labels[prep.sample[i]] == 1 {
                2
            } else if prep.cloud.position(i).x < 0.0 {
                0
            } else {
                1
            }
        })
        .collect();
    let merged = merge_segments(&prep, &split, &MergeOptions::default());
    let plane_label = merged[split.iter().position(|&l| l == 0).unwrap()];
    let sphere_label = merged[split.iter().position(|&l| l == 2).unwrap()];
    assert_ne!(plane_label, sphere_label);
    for (i, &l) in split.iter().enumerate() {
        assert_eq!(merged[i], if l == 2 { sphere_label } else { plane_label });
    }
    let off = MergeOptions {
        enabled: false,
        ..MergeOptions::default()
    };
    assert_eq!(merge_segments(&prep, &split, &off), split);
}
