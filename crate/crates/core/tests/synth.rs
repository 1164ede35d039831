use centerfpa::pipeline::decode_heads;
use centerfpa::synth::{generate_scene, oracle_heads, random_scene, RandomSceneOptions, SceneSpec};
use centerfpa::{evaluate, BBox, ModelConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_ground_truth_is_valid_and_in_bounds(seed in any::<u64>(), n in 0usize..15) {
        let opts = RandomSceneOptions { width: 300, height: 200, num_classes: 5, num_objects: n, ..Default::default() };
        let spec = random_scene(&opts, seed).unwrap();
        let scene = generate_scene(&spec).unwrap();
        for g in &scene.ground_truth {
            prop_assert!(BBox::ground_truth(g.x1, g.y1, g.x2, g.y2, g.class_id).is_ok());
            prop_assert!(g.x1 >= 0.0 && g.y1 >= 0.0 && g.x2 <= 300.0 && g.y2 <= 200.0);
            prop_assert!(g.class_id < 5);
        }
        prop_assert!(scene.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn perfect_heads_score_full_map() {
    let cfg = ModelConfig { classes: (0..6).map(|i| format!("k{i}")).collect(), ..ModelConfig::default() };
    for seed in 0..5 {
        let opts = RandomSceneOptions { width: 512, height: 384, num_classes: 6, num_objects: 15, ..Default::default() };
        let scene = generate_scene(&random_scene(&opts, seed).unwrap()).unwrap();
        let heads = oracle_heads(&scene.ground_truth, 512, 384, 6, 4).unwrap();
        let dets = decode_heads(&heads, &cfg).unwrap().boxes;
        let report = evaluate(&dets, &scene.ground_truth, 6, 0.5).unwrap();
        assert_eq!(report.map, 1.0, "seed {seed}");
    }
}

#[test]
fn scene_specs_regenerate_identically_from_text() {
    let spec = random_scene(&RandomSceneOptions { width: 256, height: 256, ..Default::default() }, 77).unwrap();
    let again = SceneSpec::from_json(&spec.to_json()).unwrap();
    assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&again).unwrap());
}
