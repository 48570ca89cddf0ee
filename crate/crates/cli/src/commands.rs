use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rap_core::config::TrainMode;
use rap_core::data::{patchcue_params, prepare, split_for_mode, write_dataset_dir, Dataset, Prepared};
use rap_core::eval::{
    ablate as run_grid, dump_attention_overlay, evaluate, evaluate_images, AblationGrid, AttentionEval, AttentionSetting,
    EvalSpec, TestData,
};
use rap_core::trainer::{train as run_training, Checkpoint, MetricsWriter};
use rap_core::{RapError, RunConfig};

use crate::{AblateArgs, AttentionArg, ConfigArgs, EvalArgs, InspectArgs, SplitArg, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Core(RapError),
    Usage(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Core(e) => write!(f, "{e}"),
            Self::Usage(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<RapError> for CliError {
    fn from(e: RapError) -> Self {
        Self::Core(e)
    }
}

impl CliError {
    /// 2 for bad configuration or unreadable inputs, 3 for divergence.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Core(e) => match e {
                RapError::UnknownKey { .. }
                | RapError::UnknownSection(_)
                | RapError::BadValue { .. }
                | RapError::Syntax { .. }
                | RapError::InvalidConfig(_)
                | RapError::Io { .. }
                | RapError::Checkpoint(_) => 2,
                RapError::Diverged { .. } => 3,
                _ => 1,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CliError::Core(RapError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn resolve(base: RunConfig, args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => base,
    };
    for o in &args.overrides {
        cfg.set_dotted(o)?;
    }
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_file(path, format!("{text}\n").as_bytes())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = ckpt.run_config()?;
    Ok((ckpt, cfg))
}

fn subset(data: &Dataset, indices: &[usize]) -> Result<Dataset> {
    let pixels = indices.iter().flat_map(|&i| data.image_bytes(i).iter().copied()).collect();
    let labels = indices.iter().map(|&i| data.labels()[i]).collect();
    let mut out = Dataset::new(data.hw(), pixels, labels, data.num_classes())?;
    if let Some(p) = data.patches() {
        out = out.with_patches(indices.iter().map(|&i| p[i]).collect())?;
    }
    Ok(out)
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve(RunConfig::default(), &args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let prepared = prepare(&cfg)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("config.txt"), cfg.to_string().as_bytes())?;
    let metrics_path = args.out.join("metrics.jsonl");
    let file = File::create(&metrics_path).map_err(io(&metrics_path))?;
    let mut metrics = MetricsWriter::new(BufWriter::new(file));
    let outcome = run_training(&cfg, &prepared.data, &prepared.split, &mut |rec| {
        if let Some(acc) = rec.val_acc {
            eprintln!("iteration {} val_acc {}", rec.iteration, pct(acc));
        }
        metrics.write(rec).map_err(|source| RapError::Io {
            path: metrics_path.clone(),
            source,
        })
    });
    metrics.into_inner().flush().map_err(io(&metrics_path))?;
    let outcome = match outcome {
        Ok(o) => o,
        Err(RapError::Diverged {
            iteration,
            what,
            value,
            last_good,
        }) => {
            if let Some(ckpt) = &last_good {
                ckpt.save(&args.out.join("last_good.rapc"))?;
            }
            return Err(RapError::Diverged {
                iteration,
                what,
                value,
                last_good,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    outcome.best.save(&args.out.join("best.rapc"))?;
    outcome.last.save(&args.out.join("last.rapc"))?;
    if outcome.best_val_acc.is_nan() {
        println!("no validation pass; wrote {}", args.out.display());
    } else {
        println!(
            "best val_acc {} at iteration {}; wrote {}",
            pct(outcome.best_val_acc),
            outcome.best_iteration,
            args.out.display()
        );
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (ckpt, stored) = load_checkpoint(&args.checkpoint)?;
    let mut cfg = resolve(stored, &args.config)?;
    if let Some(s) = args.seed {
        cfg.eval.seed = s;
    }
    if let Some(n) = args.episodes {
        cfg.eval.episodes = n;
    }
    let model = ckpt.model()?;
    let prepared = prepare(&cfg)?;
    let mut spec = EvalSpec::from_config(&cfg, cfg.eval.seed);
    if args.attention == AttentionArg::Identity {
        spec.attention = AttentionEval::Identity;
    }
    let e = &cfg.eval;
    let report = match cfg.train.mode {
        TrainMode::FewShot => {
            let classes = match args.split {
                SplitArg::Val => &prepared.split.val,
                SplitArg::Test => &prepared.split.test,
            };
            evaluate(&model, &prepared.data, classes, e.way, e.shot, e.query, e.episodes, &spec)?
        }
        TrainMode::Classification => {
            let (data, indices) = match args.split {
                SplitArg::Val => (&prepared.data, prepared.split.val.clone()),
                SplitArg::Test => prepared.test_images(),
            };
            evaluate_images(&model, data, &indices, &spec, cfg.train.batch_size)?
        }
    };
    println!(
        "accuracy {} +- {} over {} {}",
        pct(report.mean),
        pct(report.half_width),
        report.count,
        unit(cfg.train.mode)
    );
    let steps: Vec<String> = report.per_step.iter().map(|&a| pct(a)).collect();
    println!("per step {}", steps.join(" "));
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_file(&out.join("config.txt"), cfg.to_string().as_bytes())?;
        write_json(&out.join("eval.json"), &report)?;
    }
    Ok(())
}

fn unit(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::FewShot => "episodes",
        TrainMode::Classification => "images",
    }
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let cfg = resolve(RunConfig::default(), &args.config)?;
    cfg.validate()?;
    let attention = if args.attention.is_empty() {
        vec![AttentionSetting::On]
    } else {
        args.attention
            .iter()
            .map(|s| s.parse().map_err(CliError::Usage))
            .collect::<Result<_>>()?
    };
    let grid = AblationGrid {
        steps: if args.steps.is_empty() {
            vec![cfg.train.steps]
        } else {
            args.steps.clone()
        },
        alphas: if args.alphas.is_empty() {
            vec![cfg.train.alpha]
        } else {
            args.alphas.clone()
        },
        attention,
        seeds: if args.seeds.is_empty() {
            vec![args.seed.unwrap_or(cfg.train.seed)]
        } else {
            args.seeds.clone()
        },
    };
    let prepared = prepare(&cfg)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("config.txt"), cfg.to_string().as_bytes())?;
    let rows_path = args.out.join("ablation.jsonl");
    let file = File::create(&rows_path).map_err(io(&rows_path))?;
    let mut rows = BufWriter::new(file);
    let held_out;
    let test = match cfg.train.mode {
        TrainMode::FewShot => TestData::Classes(&prepared.split.test),
        TrainMode::Classification => {
            held_out = held_out_images(&prepared)?;
            TestData::Images(
                held_out
                    .as_ref()
                    .unwrap_or_else(|| prepared.test_data.as_ref().expect("checked")),
            )
        }
    };
    let result = run_grid(&cfg, &grid, &prepared.data, &prepared.split, test, &mut |row| {
        let line = serde_json::to_string(row).expect("row serializes");
        eprintln!("{line}");
        writeln!(rows, "{line}").map_err(|source| RapError::Io {
            path: rows_path.clone(),
            source,
        })
    })?;
    rows.flush().map_err(io(&rows_path))?;
    let table = result.table();
    write_file(&args.out.join("table.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

/// Test images for classification grids: the separate test file if
/// configured, else the test part of the image split.
fn held_out_images(prepared: &Prepared) -> Result<Option<Dataset>> {
    if prepared.test_data.is_some() {
        return Ok(None);
    }
    subset(&prepared.data, &prepared.split.test).map(Some)
}

pub fn make_synth(args: SynthArgs) -> Result<()> {
    let mut cfg = resolve(RunConfig::default(), &args.config)?;
    if let Some(s) = args.seed {
        cfg.data.seed = s;
    }
    if let Some(n) = args.classes {
        cfg.data.num_classes = n;
    }
    let data = rap_core::data::generate_configured(&cfg.data)?;
    let split = split_for_mode(&data, &cfg.data, TrainMode::FewShot)?;
    let p = patchcue_params(&cfg.data);
    let extra: Vec<(String, String)> = [
        ("generator", "patch-cue".to_string()),
        ("seed", cfg.data.seed.to_string()),
        ("images_per_class", p.images_per_class.to_string()),
        ("patch_size", p.patch_size.to_string()),
        ("clutter", p.clutter.to_string()),
        ("noise", p.noise.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let manifest = write_dataset_dir(&args.out, &data, &split, cfg.data.seed, &extra)?;
    println!(
        "wrote {} images of {} classes to {}",
        data.len(),
        manifest.get("classes").unwrap_or("?"),
        args.out.display()
    );
    Ok(())
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    let (ckpt, stored) = load_checkpoint(&args.checkpoint)?;
    let cfg = resolve(stored, &args.config)?;
    let model = ckpt.model()?;
    let prepared = prepare(&cfg)?;
    let steps = args.steps.unwrap_or(cfg.train.steps);
    if steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let (data, indices): (&Dataset, Vec<usize>) = match cfg.train.mode {
        TrainMode::FewShot => {
            let test: std::collections::HashSet<usize> = prepared.split.test.iter().copied().collect();
            let idx = (0..prepared.data.len())
                .filter(|&i| test.contains(&prepared.data.labels()[i]))
                .collect();
            (&prepared.data, idx)
        }
        TrainMode::Classification => prepared.test_images(),
    };
    let indices: Vec<usize> = indices.into_iter().take(args.images).collect();
    let report = dump_attention_overlay(&model, data, &indices, steps)?;
    create_dir(&args.out)?;
    let path = args.out.join("attention.txt");
    let mut out = BufWriter::new(File::create(&path).map_err(io(&path))?);
    report.write_matrices(&mut out).map_err(io(&path))?;
    out.flush().map_err(io(&path))?;
    write_json(&args.out.join("overlay.json"), &report)?;
    let hits: Vec<String> = report.mean_hit.iter().map(|h| format!("{h:.4}")).collect();
    println!(
        "patch hit per step {} (uniform {:.4}) over {} images",
        hits.join(" "),
        report.uniform,
        report.images.len()
    );
    Ok(())
}
