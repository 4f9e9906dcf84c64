use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use steermatch::backbone::{BackboneConfig, Variant};
use steermatch::config::{load_train_config, render};
use steermatch::data::{load_dataset, read_homography, read_manifest, read_pnm, save_dataset, synth_dataset, write_ppm, ModSpec, SynthParams};
use steermatch::equivariance::{fresh_backbone, run_suite};
use steermatch::eval::{config_hash, evaluate_model, EvalOptions, EvalRun};
use steermatch::geometry::{format_table, write_csv, CsvRow, CSV_HEADER};
use steermatch::matcher::format_matches;
use steermatch::model::Model;
use steermatch::train::{train, TrainConfig};
use steermatch::visualize::{match_pair, match_quality, overlay};

#[derive(Parser)]
#[command(name = "steermatch", version, about = "Rotation-equivariant dense feature matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark (jittered views plus manifest.json).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rotate A by this many degrees (random sign per image).
        #[arg(long, conflicts_with = "warp_s")]
        rotate_a: Option<f64>,
        /// Warp every B by random outward corner offsets of up to s·size.
        #[arg(long)]
        warp_s: Option<f64>,
        #[arg(long, default_value = "synth")]
        name: String,
    },
    /// Train a model from a TOML config.
    Train {
        #[arg(long, required_unless_present = "print_config")]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "print_config")]
        out: Option<PathBuf>,
        /// Print the default config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate a checkpoint on a dataset and write the CSV report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// none, r<degrees> or h<s>.
        #[arg(long = "mod", default_value = "none")]
        modification: String,
        #[arg(long, default_value_t = 0)]
        mod_seed: u64,
        #[arg(long)]
        report: PathBuf,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Row label; defaults to the checkpoint's variant.
        #[arg(long)]
        label: Option<String>,
    },
    /// Match two images and write the match file and an overlay.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        /// Ground-truth homography A→B, three rows of three numbers.
        #[arg(long)]
        gt_h: Option<PathBuf>,
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Run the equivariance suites; exits nonzero if any check fails.
    Equivcheck {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Merge evaluation CSVs into one table.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { out, scenes, size, seed, rotate_a, warp_s, name } => {
            generate(&out, scenes, size, seed, rotate_a, warp_s, &name)?;
        }
        Command::Train { config, out, print_config } => {
            if print_config {
                print!("{}", render(&TrainConfig::default())?);
                return Ok(ExitCode::SUCCESS);
            }
            let (config, out) = (config.expect("required"), out.expect("required"));
            let cfg = load_train_config(&config)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("config.toml"), render(&cfg)?)?;
            let outcome = train(&cfg, Some(&out), |line| eprintln!("{line}"))?;
            println!("trained {} steps ({} batches skipped)", outcome.log.len(), outcome.skipped);
            for k in &outcome.kept {
                println!("kept {} (val AUC@10 {:.2})", k.path.display(), k.val_auc10);
            }
        }
        Command::Evaluate { checkpoint, dataset, modification, mod_seed, report, threads, label } => {
            evaluate(&checkpoint, &dataset, &modification, mod_seed, &report, threads, label)?;
        }
        Command::Match { checkpoint, image_a, image_b, gt_h, out_prefix } => {
            let (model, _) = Model::load(&checkpoint)?;
            let a = read_pnm(&image_a)?;
            let b = read_pnm(&image_b)?;
            let gt = gt_h.as_deref().map(read_homography).transpose()?;
            let framed = match_pair(&model, &a, &b, gt.as_ref())?;
            let matches = &framed.matches;
            let txt = with_suffix(&out_prefix, "matches.txt");
            let ppm = with_suffix(&out_prefix, "overlay.ppm");
            std::fs::write(&txt, format_matches(matches)).with_context(|| format!("writing {}", txt.display()))?;
            write_ppm(&ppm, &overlay(&framed.image_a, &framed.image_b, matches, framed.gt.as_ref()))?;
            println!("{} matches -> {}, {}", matches.len(), txt.display(), ppm.display());
            if let Some(h) = &framed.gt {
                let (good, median) = match_quality(matches, h);
                println!("under 10 px: {:.1}%  median error: {median:.3} px", 100.0 * good);
            }
        }
        Command::Equivcheck { variant, checkpoint, report, trials } => {
            let results = match &checkpoint {
                Some(p) => {
                    let (model, _) = Model::load(p)?;
                    let v = model.config.backbone.variant;
                    if v != variant {
                        bail!("checkpoint holds a {v} model, not {variant}");
                    }
                    run_suite(v, &model.backbone, &model.store, trials)?
                }
                None => {
                    let cfg = BackboneConfig { variant, ..Default::default() };
                    let (store, bb) = fresh_backbone(&cfg, 0)?;
                    run_suite(variant, &bb, &store, trials)?
                }
            };
            let text: String = results.iter().map(|r| format!("{r}\n")).collect();
            print!("{text}");
            if let Some(p) = report {
                std::fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?;
            }
            if results.iter().any(|r| !r.pass) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { csv, out } => {
            let mut rows = Vec::new();
            for p in &csv {
                rows.extend(read_csv(p)?);
            }
            let table = format_table(&rows);
            print!("{table}");
            if let Some(p) = out {
                std::fs::write(&p, &table).with_context(|| format!("writing {}", p.display()))?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(format!(".{suffix}"));
    PathBuf::from(s)
}

fn generate(out: &Path, scenes: usize, size: usize, seed: u64, rotate_a: Option<f64>, warp_s: Option<f64>, name: &str) -> Result<()> {
    let spec = match (rotate_a, warp_s) {
        (Some(a), _) => ModSpec::Rotate(a),
        (_, Some(s)) => ModSpec::Warp(s),
        _ => ModSpec::None,
    };
    let synth = synth_dataset(scenes, size, size, seed, &SynthParams::default())?;
    let seqs = synth
        .iter()
        .enumerate()
        .map(|(i, s)| spec.apply(&s.jittered, seed.wrapping_add(i as u64)))
        .collect::<steermatch::Result<Vec<_>>>()?;
    let seeds: Vec<Option<u64>> = synth.iter().map(|s| Some(s.seed)).collect();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let m = save_dataset(out, name, seed, &seqs, &seeds)?;
    println!("wrote {} scenes ({spec}) to {}", m.scenes.len(), out.display());
    Ok(())
}

fn evaluate(checkpoint: &Path, dataset: &Path, modification: &str, mod_seed: u64, report: &Path, threads: usize, label: Option<String>) -> Result<()> {
    let spec: ModSpec = modification.parse()?;
    let (model, _) = Model::load(checkpoint)?;
    let base = load_dataset(dataset)?;
    let seqs = base
        .iter()
        .enumerate()
        .map(|(i, s)| spec.apply(s, mod_seed.wrapping_add(i as u64)))
        .collect::<steermatch::Result<Vec<_>>>()?;
    let dataset_name = match read_manifest(dataset) {
        Ok(m) => m.name,
        Err(_) => dataset.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into()),
    };
    let dataset_id = match spec {
        ModSpec::None => dataset_name,
        _ => format!("{dataset_name}-{spec}"),
    };
    let opts = EvalOptions { threads, ..Default::default() };
    let t = Instant::now();
    let metrics = evaluate_model(&model, &seqs, &opts)?;
    let wall = t.elapsed().as_secs_f64();
    let variant = label.unwrap_or_else(|| model.config.backbone.variant.to_string());
    let rows = metrics.csv_rows(&dataset_id, &variant);
    std::fs::write(report, write_csv(&rows)).with_context(|| format!("writing {}", report.display()))?;
    let table = format_table(&rows);
    std::fs::write(report.with_extension("txt"), &table)?;
    let hashed = serde_json::to_vec(&(&model.config, &opts, spec.to_string(), mod_seed))?;
    let run = EvalRun {
        checkpoint: checkpoint.display().to_string(),
        dataset: dataset_id,
        modification: spec.to_string(),
        report: metrics,
        wall_clock_s: wall,
        config_hash: config_hash(&hashed),
    };
    std::fs::write(report.with_extension("run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    print!("{table}");
    eprintln!("evaluated in {wall:.1}s");
    Ok(())
}

fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim() == CSV_HEADER {
            continue;
        }
        match CsvRow::parse(line) {
            Some(r) => rows.push(r),
            None => bail!("{}:{}: malformed row {line:?}", path.display(), i + 1),
        }
    }
    Ok(rows)
}
