use emomod_core::emotion::{encode_label, EmotionLabel};
use emomod_core::eval::{evaluate, expression_part, EvalOptions};
use emomod_core::forge::{Dataset, EmotionMap, ForgeConfig};
use emomod_core::metrics;
use emomod_core::model::Checkpoint;
use emomod_core::render::Camera;
use emomod_core::train::{self, DrivingSource, GeoLossWeights, Setup, TrainMode};

fn small_corpus(seed: u64) -> Dataset {
    let cfg = ForgeConfig {
        anchors: 2,
        frames: 8,
        identities: 4,
        held_out_identities: 1,
        held_out_anchors: 1,
        vertices: 96,
        expr_dims: 6,
        ..ForgeConfig::default()
    };
    Dataset::forge(&cfg, seed).unwrap()
}

fn quick_setup() -> Setup {
    let mut s = Setup {
        token_dim: 8,
        ..Setup::default()
    };
    s.geo.d_model = 8;
    s.geo.ff_hidden = 16;
    s.app.d_model = 8;
    s.app.ff_hidden = 8;
    s.train.steps = 40;
    s.train.app_steps = 6;
    s.train.accumulate = 2;
    s.train.steps_per_epoch = 20;
    s.render.resolution = 16;
    s
}

#[test]
fn geometry_training_is_deterministic_and_reduces_loss() {
    let ds = small_corpus(3);
    let setup = quick_setup();
    let a = train::train_geo(&ds, &setup, 11).unwrap();
    let b = train::train_geo(&ds, &setup, 11).unwrap();
    assert!(a.checkpoint.model.geo.params.bit_eq(&b.checkpoint.model.geo.params));
    assert!(a.checkpoint.model.table.weights.bit_eq(&b.checkpoint.model.table.weights));
    assert_eq!(a.curve, b.curve);

    let train_curve = a.curve.series("train", "geo_loss");
    assert_eq!(train_curve.len(), 2);
    assert!(train_curve[1] < train_curve[0], "{train_curve:?}");

    let c = train::train_geo(&ds, &setup, 12).unwrap();
    assert!(!a.checkpoint.model.geo.params.bit_eq(&c.checkpoint.model.geo.params));
}

#[test]
fn untrained_model_scores_like_the_driving_sequence() {
    let ds = small_corpus(4);
    let mut setup = quick_setup();
    setup.train.steps = 0;
    let ck = train::train_geo(&ds, &setup, 0).unwrap().checkpoint;
    let opts = EvalOptions {
        camera: Camera::front(16, 1.0).unwrap(),
        frames: 2,
        loss: GeoLossWeights::default(),
        source: DrivingSource::Neutral,
    };
    let report = evaluate(&ck.model, &ds, &opts).unwrap();
    let anchor = ds.manifest.splits.held_out_anchors[0];
    let driving = ds.sequence(anchor, EmotionLabel::Neutral).unwrap();
    let target = ds.sequence(anchor, EmotionLabel::Sad).unwrap();
    let baseline = metrics::aed(&expression_part(&driving), &expression_part(&target)).unwrap();
    let got = report.pairs["held_out"]["neutral->sad"].aed;
    assert_eq!(got, baseline);
    assert_eq!(report.pairs["held_out"]["neutral->neutral"].aed, 0.0);
}

#[test]
fn checkpoint_round_trip_preserves_every_output() {
    let ds = small_corpus(5);
    let setup = quick_setup();
    let geo = train::train_geo(&ds, &setup, 1).unwrap().checkpoint;
    let full = train::train_app(&ds, &geo, &setup, 1).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    full.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.model, full.model);
    assert_eq!(back.header, full.header);

    let anchor = ds.manifest.splits.held_out_anchors[0];
    let driving = ds.sequence(anchor, EmotionLabel::Neutral).unwrap();
    let e = encode_label(EmotionLabel::Fear);
    let p1 = full.model.modulate(&driving, &e).unwrap();
    assert!(p1.bit_eq(&back.model.modulate(&driving, &e).unwrap()));
    let id = ds.identity(ds.manifest.splits.held_out_identities[0]).unwrap();
    let reference = id.reference(&ds.template).unwrap();
    let c1 = full.model.colors(&reference, &ds.template, &p1, &e).unwrap();
    let c2 = back.model.colors(&reference, &ds.template, &p1, &e).unwrap();
    assert!(c1.bit_eq(&c2));
}

#[test]
fn staged_training_freezes_geometry() {
    let ds = small_corpus(6);
    let setup = quick_setup();
    let geo = train::train_geo(&ds, &setup, 2).unwrap().checkpoint;
    let full = train::train_app(&ds, &geo, &setup, 2).unwrap().checkpoint;
    assert!(full.model.geo.params.bit_eq(&geo.model.geo.params));
    assert!(full.model.table.weights.bit_eq(&geo.model.table.weights));
    assert_eq!(full.header.geo_seed, Some(2));
    assert_eq!(full.header.app_step, setup.train.app_steps as u64);
}

#[test]
fn joint_mode_trains_both_branches() {
    let ds = small_corpus(7);
    let mut setup = quick_setup();
    setup.train.mode = TrainMode::Joint;
    setup.train.steps = 4;
    setup.train.steps_per_epoch = 2;
    let out = train::train(&ds, &setup, 3).unwrap();
    assert!(out.checkpoint.model.app.is_some());
    assert_eq!(out.curve.series("train", "geo_loss").len(), 2);
    assert_eq!(out.curve.series("train", "app_loss").len(), 2);
}

#[test]
fn neutral_target_leaves_trained_geometry_untouched() {
    let ds = small_corpus(8);
    let ck = train::train_geo(&ds, &quick_setup(), 4).unwrap().checkpoint;
    for l in EmotionLabel::ALL {
        let seq = ds.sequence(0, l).unwrap();
        let out = ck.model.modulate(&seq, &encode_label(EmotionLabel::Neutral)).unwrap();
        assert!(out.bit_eq(&seq), "{l}");
    }
}

#[test]
fn appearance_learns_a_zero_residual_when_targets_are_base_colors() {
    // Every emotion acts like neutral: targets equal the driving geometry
    // and the identity's base colors.
    let mut ds = small_corpus(9);
    let (e, da) = (ds.template.expr_dims(), ds.manifest.counts.appearance_dims);
    for m in &mut ds.maps {
        *m = EmotionMap { label: m.label, ..EmotionMap::neutral(e, da) };
    }
    let setup = quick_setup();
    let geo = train::train_geo(&ds, &setup, 5).unwrap().checkpoint;
    let mut s = setup.clone();
    s.train.app_steps = 20;
    s.train.steps_per_epoch = 10;
    let out = train::train_app(&ds, &geo, &s, 5).unwrap();
    let held = out.curve.series("held_out", "app_loss");
    assert!(*held.last().unwrap() < 1e-4, "{held:?}");
}
