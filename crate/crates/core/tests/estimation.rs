use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use primseg::config::Config;
use primseg::geometry::PrimitiveType;
use primseg::pipeline::prepare;
use primseg::synth::{generate_scene, random_surface, PrimitiveSpec, SceneSpec};

/// Noise-free single-primitive clouds: the local fits type at least 99% of
/// points correctly for every analytic type.
#[test]
fn argmax_type_on_single_primitives() {
    let cfg = Config::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for ty in PrimitiveType::ANALYTIC {
        let (mut right, mut total) = (0usize, 0usize);
        for seed in 0..4 {
            let spec = SceneSpec {
                primitives: vec![PrimitiveSpec {
                    surface: random_surface(&mut rng, ty),
                    points: 800,
                }],
                random: None,
                ..SceneSpec::random(seed, 0.0)
            };
            let scene = generate_scene(&spec).unwrap();
            let prep = prepare(&scene.cloud, None, &cfg).unwrap();
            right += prep.attrs.iter().filter(|a| a.argmax_type() == ty).count();
            total += prep.attrs.len();
        }
        let frac = right as f64 / total as f64;
        assert!(frac >= 0.99, "{ty}: {frac:.4} of points typed correctly");
    }
}
