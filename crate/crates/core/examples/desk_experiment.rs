//! Trains models on synthetic scenes and compares them on rotated test
//! splits.
//!
//! Usage: `desk_experiment <out_dir> <steps> <train_scenes> <variant>...`.
//! Existing `<out_dir>/<variant>.ckpt` files are evaluated without
//! retraining.

use std::path::PathBuf;
use std::time::Instant;

use steermatch::backbone::Variant;
use steermatch::data::{synth_dataset, ModSpec, SynthParams};
use steermatch::eval::{evaluate_model, EvalOptions};
use steermatch::model::Model;
use steermatch::train::{train, TrainConfig};

fn main() -> steermatch::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(&args[1]);
    let steps: usize = args[2].parse().expect("steps");
    let scenes: usize = args[3].parse().expect("scenes");
    std::fs::create_dir_all(&out).expect("out dir");
    let test: Vec<_> = synth_dataset(6, 64, 64, 99, &SynthParams::default())?
        .into_iter()
        .map(|s| s.jittered)
        .collect();
    for name in &args[4..] {
        let variant: Variant = name.parse()?;
        let path = out.join(format!("{name}.ckpt"));
        let model = if path.exists() {
            Model::load(&path)?.0
        } else {
            let mut cfg = TrainConfig {
                steps,
                val_interval: steps,
                ..Default::default()
            };
            cfg.model.backbone.variant = variant;
            cfg.data.train_scenes = scenes;
            if let Some(b) = std::env::var("BASE").ok().and_then(|v| v.parse::<usize>().ok()) {
                cfg.model.backbone.base_width = b;
                cfg.model.backbone.coarse_dim = 2 * b;
                cfg.model.backbone.fine_dim = b;
                cfg.model.matcher.d_model = 2 * b;
            }
            if let Ok(b) = std::env::var("BYPASS") {
                cfg.model.matcher.bypass_attention = b == "1";
            }
            let t = Instant::now();
            let o = train(&cfg, None, |_| {})?;
            println!("{variant}: {steps} steps in {:.1}s", t.elapsed().as_secs_f64());
            o.model.save(&path, steps, None)?;
            o.model
        };
        println!("{variant}: {} params", model.store.count_trainable());
        for spec in ["none", "r20", "r45", "r90"] {
            let m: ModSpec = spec.parse()?;
            let seqs = test.iter().map(|s| m.apply(s, 7)).collect::<steermatch::Result<Vec<_>>>()?;
            let r = evaluate_model(&model, &seqs, &EvalOptions::default())?;
            let a = r.overall();
            println!(
                "  {spec:>4}: AUC {:.1}/{:.1}/{:.1}  MMA {:.1}/{:.1}/{:.1}  fail {}",
                a.auc[0], a.auc[1], a.auc[2], a.mma[0], a.mma[1], a.mma[2], a.failures
            );
        }
    }
    Ok(())
}
