use steermatch::backbone::{BackboneConfig, Variant};
use steermatch::geometry::Homography;
use steermatch::matcher::MatcherConfig;
use steermatch::model::ModelConfig;
use steermatch::train::{smoothed_coarse, train, TrainConfig};
use steermatch::visualize::{match_pair, match_quality};

fn tiny_c4star(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        model: ModelConfig {
            backbone: BackboneConfig {
                variant: Variant::C4star,
                base_width: 8,
                coarse_dim: 16,
                fine_dim: 8,
            },
            matcher: MatcherConfig {
                d_model: 16,
                n_blocks: 1,
                heads: 2,
                ..Default::default()
            },
        },
        steps,
        val_interval: steps,
        ..Default::default()
    };
    cfg.data.train_scenes = 8;
    cfg.data.val_scenes = 2;
    cfg.data.size = 64;
    cfg
}

const SELF_MATCH_STEPS: usize = 600;

#[test]
fn smoke_training_halves_the_coarse_loss() {
    let outcome = train(&tiny_c4star(200), None, |_| {}).unwrap();
    assert_eq!(outcome.log.len() + outcome.skipped, 200);
    let (first, last) = smoothed_coarse(&outcome.log, 20).unwrap();
    assert!(last <= 0.5 * first, "coarse loss {first:.3} -> {last:.3}");
}

#[test]
fn trained_model_matches_an_image_to_itself() {
    let outcome = train(&tiny_c4star(SELF_MATCH_STEPS), None, |_| {}).unwrap();

    let scene = steermatch::data::synth_sequence("s", 64, 64, 1234, &Default::default()).unwrap();
    let img = &scene.clean.image_a;
    let id = Homography::identity();
    let framed = match_pair(&outcome.model, img, img, Some(&id)).unwrap();
    let cells = 64 / 8 * (64 / 8);
    let coarse = outcome.model.match_images(img, img).unwrap().coarse.matches.len();
    let (_, median) = match_quality(&framed.matches, &id);
    eprintln!("{coarse} of {cells} cells matched, median error {median:.3}");
    assert!(coarse * 2 >= cells, "{coarse} of {cells} cells matched");
    assert!(median < 2.0, "median self-match error {median:.3}");
}

#[test]
fn fixed_seed_gives_bit_identical_loss_curves() {
    let cfg = tiny_c4star(15);
    let a = train(&cfg, None, |_| {}).unwrap();
    let b = train(&cfg, None, |_| {}).unwrap();
    let bits = |o: &steermatch::train::TrainOutcome| o.log.iter().map(|r| (r.total.to_bits(), r.coarse.to_bits(), r.fine.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let v = serde_json::Value::Null;
    assert_eq!(a.model.store.to_checkpoint_bytes(&v).unwrap(), b.model.store.to_checkpoint_bytes(&v).unwrap());
}
