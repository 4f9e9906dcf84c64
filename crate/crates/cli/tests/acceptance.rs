//! Acceptance suite. Prints one verdict line per criterion; run with
//! `cargo test --test acceptance -- --nocapture` to see them.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use steermatch::autodiff::{finite_diff_check, store_grad_check, SparseMap, Tape, Var};
use steermatch::backbone::{Backbone, BackboneConfig, Variant};
use steermatch::data::{
    gt_psnr, gt_targets, make_rotated, make_warped, save_dataset, synth_dataset, synth_sequence, ModSpec, Modification, Sequence, SynthParams,
};
use steermatch::equivariance::{backbone_invariance, c4_layer_checks, c8_layer_checks, fresh_backbone, NEGATIVE_CONTROL, QUARTER_TOL};
use steermatch::eval::{evaluate_model, EvalOptions};
use steermatch::geometry::{auc, corner_error, dlt, mma, ransac_homography, Homography, RansacParams, THRESHOLDS};
use steermatch::group::{CyclicGroup, FieldType};
use steermatch::matcher::MatcherConfig;
use steermatch::model::{batch_loss, build_parts, Model, ModelConfig, PairSample};
use steermatch::params::ParamStore;
use steermatch::steerable::{standard_conv_params, Ctx, EquivConv};
use steermatch::tensor::Tensor;
use steermatch::train::{train, TrainConfig};

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

impl Verdict {
    fn line(&self) -> String {
        format!("criterion {}: {} | {}", self.id, if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

fn c1() -> Verdict {
    let (rs, secs) = timed(|| c4_layer_checks(100, 11).unwrap());
    let worst = rs.iter().map(|r| r.deviation).fold(0.0, f64::max);
    let parts: Vec<String> = rs.iter().map(|r| format!("{} {:.1e}", r.name, r.deviation)).collect();
    Verdict {
        id: 1,
        pass: rs.iter().all(|r| r.pass) && worst <= 1e-5 && secs < 60.0,
        detail: format!("max abs deviation {worst:.2e} (tol 1e-5), {:.1}s (limit 60s); {}", secs, parts.join(", ")),
    }
}

fn c2(trained: &Model) -> Verdict {
    let ((fresh, trained_dev, plain), secs) = timed(|| {
        let (s, bb) = fresh_backbone(&BackboneConfig::default(), 5).unwrap();
        let fresh = backbone_invariance(&bb, &s, 64, 1).unwrap();
        let trained_dev = backbone_invariance(&trained.backbone, &trained.store, 64, 1).unwrap();
        let plain_cfg = BackboneConfig {
            variant: Variant::Plain,
            ..Default::default()
        };
        let (s, bb) = fresh_backbone(&plain_cfg, 5).unwrap();
        (fresh, trained_dev, backbone_invariance(&bb, &s, 64, 1).unwrap())
    });
    let worst = fresh.iter().chain(&trained_dev).copied().fold(0.0, f64::max);
    let plain_min = plain[0].min(plain[1]);
    Verdict {
        id: 2,
        pass: worst <= QUARTER_TOL && plain_min > NEGATIVE_CONTROL && secs < 60.0,
        detail: format!(
            "C4* fresh coarse/fine {:.1e}/{:.1e}, trained {:.1e}/{:.1e} (tol 1e-3); plain {:.3}/{:.3} (must exceed 0.05); {:.1}s",
            fresh[0], fresh[1], trained_dev[0], trained_dev[1], plain[0], plain[1], secs
        ),
    }
}

fn c3() -> Verdict {
    let ((layers, bb), secs) = timed(|| {
        let layers = c8_layer_checks(10, 13).unwrap();
        let cfg = BackboneConfig {
            variant: Variant::C8star,
            ..Default::default()
        };
        let (s, b) = fresh_backbone(&cfg, 2).unwrap();
        (layers, backbone_invariance(&b, &s, 64, 3).unwrap())
    });
    let q = layers.iter().filter(|r| r.name.contains("90")).map(|r| r.deviation).fold(0.0, f64::max);
    let e = layers.iter().filter(|r| r.name.contains("45")).map(|r| r.deviation).fold(0.0, f64::max);
    let bq = bb[0].max(bb[1]);
    Verdict {
        id: 3,
        pass: layers.iter().all(|r| r.pass) && bq <= 1e-3 && secs < 60.0,
        detail: format!("C8 layers 90° {q:.1e} (tol 1e-3), 45° smooth {e:.3} (tol 0.1); C8* backbone 90° {bq:.1e} (tol 1e-3); {secs:.1}s"),
    }
}

fn c4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ok = true;
    let mut parts = Vec::new();
    for n in [4, 8] {
        let g = CyclicGroup::new(n).unwrap();
        for (fi, fo, k) in [(2, 3, 3), (1, 1, 5), (4, 2, 1)] {
            let mut store = ParamStore::<f32>::new();
            let conv = EquivConv::new(&mut store, "g", FieldType::regular(g, fi).unwrap(), FieldType::regular(g, fo).unwrap(), k, 1, false, &mut rng).unwrap();
            let std = standard_conv_params(fi * n, fo * n, k, false);
            let own = conv.param_count(&store);
            ok &= own * n == std;
            parts.push(format!("C{n} {}→{} k{k}: {own} vs {std}", fi * n, fo * n));
        }
    }
    let count = |v: Variant| {
        let cfg = BackboneConfig {
            variant: v,
            ..Default::default()
        };
        let (s, _) = fresh_backbone(&cfg, 0).unwrap();
        Backbone::param_count(&s)
    };
    let (plain, star) = (count(Variant::Plain), count(Variant::C4star));
    let ratio = plain as f64 / star as f64;
    Verdict {
        id: 4,
        pass: ok && ratio >= 3.6,
        detail: format!("group conv exactly 1/N: {}; backbone plain {plain} vs C4* {star}, ratio {ratio:.2} (≥ 3.6)", parts.join(", ")),
    }
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> steermatch::Result<Var>>);

/// `Σ out ⊙ C` for a fixed pseudo-random `C`, so every output coordinate
/// carries a distinct weight.
fn weighted(tape: &mut Tape<f64>, v: Var) -> steermatch::Result<Var> {
    let n = tape.value(v).len();
    let c = Tensor::from_fn(tape.shape(v), |i| ((i * 7919 + 13) % 23) as f64 / 11.0 - 1.0);
    debug_assert_eq!(c.len(), n);
    let c = tape.constant(c);
    let p = tape.mul(v, c)?;
    Ok(tape.sum(p))
}

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut r = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, &mut rng);
    // values kept away from the relu kink
    let away = Tensor::from_fn(&[12], |i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.4 - i as f64 * 0.1 });
    let sparse = Arc::new(SparseMap::from_rows(6, &[vec![(0, 0.5), (3, -1.0)], vec![(5, 2.0)], vec![(1, 1.0), (2, 1.0), (4, -0.25)]]));
    let groups: Arc<[usize]> = Arc::from(vec![0, 0, 1, 1, 1, 0]);
    vec![
        ("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| { let y = t.add(v[0], v[1])?; weighted(t, y) })),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; weighted(t, y) })),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; weighted(t, y) })),
        ("scale", vec![r(&[5])], Box::new(|t, v| { let y = t.scale(v[0], -1.7); weighted(t, y) })),
        ("relu", vec![away], Box::new(|t, v| { let y = t.relu(v[0]); weighted(t, y) })),
        ("sum", vec![r(&[2, 3])], Box::new(|t, v| { let s = t.sum(v[0]); let y = t.mul(s, s)?; Ok(t.sum(y)) })),
        ("mean", vec![r(&[2, 3])], Box::new(|t, v| { let s = t.mean(v[0]); let y = t.mul(s, s)?; Ok(t.sum(y)) })),
        ("conv2d", vec![r(&[2, 3, 6, 6]), r(&[4, 3, 3, 3])], Box::new(|t, v| { let y = t.conv2d(v[0], v[1], 2, 1)?; weighted(t, y) })),
        ("avg_pool2", vec![r(&[1, 2, 4, 6])], Box::new(|t, v| { let y = t.avg_pool2(v[0])?; weighted(t, y) })),
        ("upsample2", vec![r(&[1, 2, 3, 2])], Box::new(|t, v| { let y = t.upsample2(v[0])?; weighted(t, y) })),
        ("field_sum", vec![r(&[2, 8, 2, 3])], Box::new(|t, v| { let y = t.field_sum(v[0], 4)?; weighted(t, y) })),
        ("reshape", vec![r(&[2, 6])], Box::new(|t, v| { let y = t.reshape(v[0], &[3, 4])?; weighted(t, y) })),
        ("gather", vec![r(&[7])], Box::new(|t, v| { let y = t.gather(v[0], Arc::from(vec![6, 0, 0, 3, 2]), &[5])?; weighted(t, y) })),
        ("permute", vec![r(&[2, 3, 4])], Box::new(|t, v| { let y = t.permute(v[0], &[2, 0, 1])?; weighted(t, y) })),
        ("slice", vec![r(&[3, 5])], Box::new(|t, v| { let y = t.slice(v[0], 1, 1, 4)?; weighted(t, y) })),
        ("linear_map", vec![r(&[6])], Box::new(move |t, v| { let y = t.linear_map(v[0], sparse.clone(), &[3])?; weighted(t, y) })),
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| { let y = t.matmul(v[0], v[1], false)?; weighted(t, y) })),
        ("matmul_t", vec![r(&[2, 3, 4]), r(&[2, 5, 4])], Box::new(|t, v| { let y = t.matmul(v[0], v[1], true)?; weighted(t, y) })),
        ("softmax_rows", vec![r(&[3, 5])], Box::new(|t, v| { let y = t.softmax_rows(v[0])?; weighted(t, y) })),
        ("log_softmax_rows", vec![r(&[3, 5])], Box::new(|t, v| { let y = t.log_softmax_rows(v[0])?; weighted(t, y) })),
        ("normalize_rows", vec![r(&[3, 6])], Box::new(|t, v| { let y = t.normalize_rows(v[0], 1e-5)?; weighted(t, y) })),
        ("normalize_groups", vec![r(&[2, 6, 2, 2])], Box::new(move |t, v| { let (y, _) = t.normalize_groups(v[0], groups.clone(), 2, 1e-5)?; weighted(t, y) })),
        ("scale_shift", vec![r(&[2, 3, 4]), r(&[3]), r(&[3])], Box::new(|t, v| { let y = t.scale_shift(v[0], Some(v[1]), Some(v[2]), 1)?; weighted(t, y) })),
        ("concat", vec![r(&[2, 3]), r(&[2, 2])], Box::new(|t, v| { let y = t.concat(&[v[0], v[1]], 1)?; weighted(t, y) })),
    ]
}

fn composed_check(variant: Variant, per_param: usize) -> (f64, usize, usize) {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            variant,
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
    };
    let (store, bb, mt) = build_parts::<f64>(&cfg, 4).unwrap();
    let scene = synth_sequence("g", 32, 32, 5, &SynthParams::default()).unwrap();
    let a = scene.jittered.image_a.cast::<f64>();
    let b = scene.jittered.images_b[0].cast::<f64>();
    let t = gt_targets(&scene.jittered.homographies[0], (32, 32), (32, 32), 8).unwrap();
    let batch = [PairSample { image_a: &a, image_b: &b, targets: &t }];
    let mut fine = 0;
    let check = store_grad_check(&store, per_param, 1e-6, |tape, s| {
        let mut ctx = Ctx::new(tape, s, true);
        let (loss, parts) = batch_loss(&mut ctx, &bb, &mt, &batch, 1.0)?.expect("assigned cells");
        fine = parts.fine_matches;
        Ok(loss)
    })
    .unwrap();
    (check.max_rel_error, check.coordinates, fine)
}

fn c5() -> Verdict {
    let ((ops, composed), secs) = timed(|| {
        let ops: Vec<(&str, f64)> = op_cases()
            .into_iter()
            .map(|(name, params, f)| (name, finite_diff_check(|t, v| f(t, v), &params, 1e-6).unwrap().max_rel_error))
            .collect();
        let composed = [composed_check(Variant::C4star, 12), composed_check(Variant::Plain, 4)];
        (ops, composed)
    });
    let worst_op = ops.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let worst_model = composed.iter().map(|c| c.0).fold(0.0, f64::max);
    let fine_active = composed.iter().all(|c| c.2 > 0);
    Verdict {
        id: 5,
        pass: worst_op.1 < 1e-4 && worst_model < 1e-4 && fine_active && secs < 300.0,
        detail: format!(
            "{} ops, worst {} {:.1e}; composed 32×32 loss C4* {:.1e} over {} coords, plain {:.1e} over {} coords, fine terms active {}; tol 1e-4; {:.1}s (limit 300s)",
            ops.len(),
            worst_op.0,
            worst_op.1,
            composed[0].0,
            composed[0].1,
            composed[1].0,
            composed[1].1,
            fine_active,
            secs
        ),
    }
}

fn c6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_dlt = 0.0f64;
    for _ in 0..50 {
        let m = [
            rng.gen_range(0.8..1.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-20.0..20.0),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(0.8..1.2),
            rng.gen_range(-20.0..20.0),
            rng.gen_range(-1e-3..1e-3),
            rng.gen_range(-1e-3..1e-3),
            1.0,
        ];
        let h = Homography::from_row_major(m).unwrap();
        let src: Vec<[f64; 2]> = (0..12).map(|_| [rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)]).collect();
        let dst: Vec<[f64; 2]> = src.iter().map(|p| { let (x, y) = h.apply(p[0], p[1]).unwrap(); [x, y] }).collect();
        worst_dlt = worst_dlt.max(dlt(&src, &dst).unwrap().projective_distance(&h));
    }

    let h = Homography::from_row_major([0.9, 0.05, 12.0, -0.04, 1.1, -7.0, 2e-4, -1e-4, 1.0]).unwrap();
    let (mut src, mut dst) = (Vec::new(), Vec::new());
    let normal = rand_distr::Normal::new(0.0, 0.5).unwrap();
    for _ in 0..140 {
        let p = [rng.gen_range(0.0..160.0), rng.gen_range(0.0..120.0)];
        let (x, y) = h.apply(p[0], p[1]).unwrap();
        src.push(p);
        dst.push([x + rng.sample(normal), y + rng.sample(normal)]);
    }
    for _ in 0..60 {
        src.push([rng.gen_range(0.0..160.0), rng.gen_range(0.0..120.0)]);
        dst.push([rng.gen_range(0.0..160.0), rng.gen_range(0.0..120.0)]);
    }
    let r = ransac_homography(&src, &dst, &RansacParams::default()).unwrap().unwrap();
    let recovered = r.inliers[..140].iter().filter(|&&b| b).count() as f64 / 140.0;
    let ce = corner_error(&h, Some(&r.homography), 160.0, 120.0);

    // hand examples: auc([2, 4], 8) = (6 + 4) / 16; mma errors 1, 4 and 12
    // fall in the 3, 5 and beyond-10 bands
    let id = Homography::identity();
    let hand_auc = auc(&[0.0], 3.0) == 100.0
        && auc(&[5.0], 10.0) == 50.0
        && auc(&[0.0, 10.0], 10.0) == 50.0
        && auc(&[2.0, 4.0], 8.0) == 62.5
        && auc(&[f64::INFINITY, 0.0], 5.0) == 50.0;
    let f = mma(&[([0.0, 0.0], [1.0, 0.0]), ([0.0, 0.0], [0.0, 4.0]), ([0.0, 0.0], [12.0, 0.0])], &id, &THRESHOLDS);
    let hand_mma = f == vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
    let shifted = Homography::translation(3.0, 4.0);
    let hand_corner = corner_error(&id, Some(&shifted), 640.0, 480.0) == 5.0;
    Verdict {
        id: 6,
        pass: worst_dlt <= 1e-8 && recovered >= 0.95 && ce < 1.5 && hand_auc && hand_mma && hand_corner,
        detail: format!(
            "DLT worst projective distance {worst_dlt:.1e} (tol 1e-8); RANSAC 30% outliers: {:.1}% inliers recovered (≥ 95%), corner error {ce:.3} px (< 1.5); AUC/MMA/corner hand examples exact: {}",
            100.0 * recovered,
            hand_auc && hand_mma && hand_corner
        ),
    }
}

fn dataset_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walk(root)
        .into_iter()
        .map(|p| (p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

fn c7() -> Verdict {
    let scenes = synth_dataset(6, 64, 64, 17, &SynthParams::default()).unwrap();
    let mut min_psnr = f64::INFINITY;
    let mut pairs = 0;
    let mut bounds_ok = true;
    for (i, sc) in scenes.iter().enumerate() {
        let clean = &sc.clean;
        let mut variants: Vec<Sequence> = vec![clean.clone()];
        for a in [20.0, 45.0, 90.0] {
            variants.push(make_rotated(clean, a, i as u64).unwrap());
        }
        for s in [0.1, 0.3] {
            let w = make_warped(clean, s, i as u64).unwrap();
            if let Some(Modification::CornerWarp { offsets, .. }) = w.provenance.last() {
                let dirs = [(-1.0, -1.0), (-1.0, 1.0), (1.0, 1.0), (1.0, -1.0)];
                for off in offsets {
                    for (c, (sv, sh)) in dirs.iter().enumerate() {
                        let (v, h) = (sv * off[c][0], sh * off[c][1]);
                        bounds_ok &= (0.0..=s * 64.0).contains(&v) && (0.0..=s * 64.0).contains(&h);
                    }
                }
            } else {
                bounds_ok = false;
            }
            variants.push(w);
        }
        for seq in &variants {
            for k in 0..seq.images_b.len() {
                min_psnr = min_psnr.min(gt_psnr(seq, k).unwrap());
                pairs += 1;
            }
        }
    }
    let gen = |dir: &Path| {
        let sc = synth_dataset(3, 64, 64, 23, &SynthParams::default()).unwrap();
        let seqs: Vec<Sequence> = sc.iter().map(|s| make_warped(&s.jittered, 0.2, 1).unwrap()).collect();
        let seeds: Vec<Option<u64>> = sc.iter().map(|s| Some(s.seed)).collect();
        save_dataset(dir, "det", 23, &seqs, &seeds).unwrap();
        dataset_bytes(dir)
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let identical = gen(d1.path()) == gen(d2.path());
    Verdict {
        id: 7,
        pass: min_psnr > 30.0 && bounds_ok && identical,
        detail: format!(
            "{pairs} pairs (synthetic, r20/r45/r90, h0.1/h0.3): min interior PSNR {min_psnr:.1} dB pre-jitter (> 30); corner offsets within (s·h, s·w): {bounds_ok}; regenerated dataset byte-identical: {identical}"
        ),
    }
}

/// Shared budget for the directional comparison.
fn desk_config(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig {
        steps: 2000,
        val_interval: 2000,
        ..Default::default()
    };
    cfg.model.backbone.variant = variant;
    cfg.data.train_scenes = 8;
    cfg
}

struct DeskRun {
    mma10: [f64; 3],
    minutes: f64,
}

const DESK_SPLITS: [&str; 3] = ["none", "r20", "r45"];

fn desk_run(variant: Variant, test: &[Sequence]) -> (Model, DeskRun) {
    let cfg = desk_config(variant);
    let (outcome, secs) = timed(|| train(&cfg, None, |_| {}).unwrap());
    let mut mma10 = [0.0; 3];
    for (i, spec) in DESK_SPLITS.iter().enumerate() {
        let spec: ModSpec = spec.parse().unwrap();
        let seqs: Vec<Sequence> = test.iter().map(|s| spec.apply(s, 7).unwrap()).collect();
        mma10[i] = evaluate_model(&outcome.model, &seqs, &EvalOptions::default()).unwrap().overall().mma[2];
    }
    (outcome.model, DeskRun { mma10, minutes: secs / 60.0 })
}

fn c8(plain: &DeskRun, star: &DeskRun) -> Verdict {
    let gap_none = (star.mma10[0] - plain.mma10[0]).abs();
    let gain_r45 = star.mma10[2] - plain.mma10[2];
    let r20_ok = star.mma10[1] >= plain.mma10[1];
    let time_ok = plain.minutes < 30.0 && star.minutes < 30.0;
    Verdict {
        id: 8,
        pass: gap_none <= 5.0 && gain_r45 >= 20.0 && r20_ok && time_ok,
        detail: format!(
            "MMA@10 plain/C4*: none {:.1}/{:.1} (|gap| {gap_none:.1} ≤ 5), r45 {:.1}/{:.1} (gain {gain_r45:+.1} ≥ 20), r20 {:.1}/{:.1} (C4* ≥ plain: {r20_ok}); training {:.1}/{:.1} min (< 30)",
            plain.mma10[0], star.mma10[0], plain.mma10[2], star.mma10[2], plain.mma10[1], star.mma10[1], plain.minutes, star.minutes
        ),
    }
}

fn c9(model: &Model) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    model.save(&ckpt, 0, None).unwrap();
    let data = dir.path().join("data");
    let sc = synth_dataset(3, 64, 64, 31, &SynthParams::default()).unwrap();
    let seqs: Vec<Sequence> = sc.iter().map(|s| s.jittered.clone()).collect();
    save_dataset(&data, "det", 31, &seqs, &[]).unwrap();
    let run = |name: &str, threads: &str, m: &str| {
        let report = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_steermatch"))
            .args(["evaluate", "--checkpoint"])
            .arg(&ckpt)
            .arg("--dataset")
            .arg(&data)
            .args(["--mod", m, "--threads", threads, "--report"])
            .arg(&report)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(report).unwrap()
    };
    let mut same = true;
    for m in ["none", "r45", "h0.3"] {
        let a = run(&format!("{m}-a.csv"), "0", m);
        let b = run(&format!("{m}-b.csv"), "0", m);
        let c = run(&format!("{m}-c.csv"), "1", m);
        same &= a == b && a == c && !a.is_empty();
    }
    Verdict {
        id: 9,
        pass: same,
        detail: format!("repeated `evaluate` runs (none, r45, h0.3; all cores and one thread) byte-identical CSV: {same}"),
    }
}

#[test]
fn acceptance() {
    let mut verdicts = vec![c1(), c3(), c4(), c5(), c6(), c7()];
    for v in &verdicts {
        println!("{}", v.line());
    }
    let test: Vec<Sequence> = synth_dataset(8, 64, 64, 99, &SynthParams::default())
        .unwrap()
        .into_iter()
        .map(|s| s.jittered)
        .collect();
    let (_, plain) = desk_run(Variant::Plain, &test);
    let (star_model, star) = desk_run(Variant::C4star, &test);
    for v in [c2(&star_model), c8(&plain, &star), c9(&star_model)] {
        println!("{}", v.line());
        verdicts.push(v);
    }
    verdicts.sort_by_key(|v| v.id);
    println!("\nsummary");
    for v in &verdicts {
        println!("{}", v.line());
    }
    // the directional reproduction is reported, not asserted: its outcome at
    // desk scale is an experimental result, analysed in the project notes
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass && v.id != 8).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
