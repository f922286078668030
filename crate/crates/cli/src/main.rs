//! `adaseg`: generate the two-domain synthetic benchmark, train any
//! ablation variant, evaluate checkpoints, inspect pseudo-labels, and run
//! the full ablation table.

mod svgplot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use adaseg_core::config::{config_digest, write_resolved_config, Config};
use adaseg_core::dataset::{self, Domain, Split};
use adaseg_core::error::{Error, Result};
use adaseg_core::pgm;
use adaseg_core::pseudo::curriculum_portion;
use adaseg_core::superpixel::slic;
use adaseg_core::synth::{generate_dataset, SynthSettings};
use adaseg_core::trainer::{
    ablation_rows, evaluate, pseudo_label_set, run_ablation, Model, StepLog, TrainSettings,
    Trainer, VariantSpec,
};

#[derive(Parser)]
#[command(
    name = "adaseg",
    version,
    about = "Weakly-supervised cross-domain lesion segmentation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic two-domain dataset described by a config file.
    GenData {
        /// Flat `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Dataset seed; every image derives deterministically from it.
        #[arg(long)]
        seed: u64,
        /// Output dataset root directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Variant name: BL, BL+AL, BL+AL+PL, BL+AL+SRT, BL+PL+SRT,
        /// BL+AL+PL+QT, BL+AL+SRT+QT, BL+PL+SRT+QT, Ours-woSP, or Ours.
        #[arg(long, default_value = "Ours")]
        variant: String,
        /// Dataset root produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for logs, checkpoints and plots.
        #[arg(long)]
        out: PathBuf,
        /// Training seed; overrides the config's `seed` key.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        /// Checkpoint directory written during training.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to score: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Domain to score: source or target.
        #[arg(long, default_value = "target")]
        domain: String,
        /// Optional directory for eval-report.txt and resolved-config.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Produce pseudo-labels for the target training split with a frozen
    /// checkpoint at a given curriculum epoch.
    PseudoLabel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Curriculum epoch controlling the selected portion.
        #[arg(long)]
        epoch: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional config for selection mode and superpixel parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip the superpixel refinement vote.
        #[arg(long)]
        no_refine: bool,
    },
    /// Train and evaluate the full ablation table over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated training seeds, e.g. "1,2,3".
        #[arg(long)]
        seeds: String,
        /// Output directory for runs, tables and plots.
        #[arg(long)]
        out: PathBuf,
        /// Reuse an existing dataset instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, seed, out } => gen_data(&config, seed, &out),
        Cmd::Train { config, variant, data, out, seed } => {
            train(&config, &variant, &data, &out, seed)
        }
        Cmd::Eval { checkpoint, data, split, domain, out } => {
            eval(&checkpoint, &data, &split, &domain, out.as_deref())
        }
        Cmd::PseudoLabel { checkpoint, data, epoch, out, config, no_refine } => {
            pseudo_label(&checkpoint, &data, epoch, &out, config.as_deref(), no_refine)
        }
        Cmd::Ablate { config, seeds, out, data } => ablate(&config, &seeds, &out, data.as_deref()),
    }
}

/// The pixel-class count a dataset was generated with.
fn classes_from_manifest(data: &Path) -> Result<usize> {
    let manifest = dataset::read_manifest(data)?;
    manifest.usize_or("data.classes", 2)
}

fn gen_data(config: &Path, seed: u64, out: &Path) -> Result<()> {
    let cfg = Config::from_file(config)?;
    let set = SynthSettings::from_config(&cfg)?;
    let counts = generate_dataset(&set, seed, out)?;
    let mut resolved = set.resolved();
    resolved.push(("seed".into(), seed.to_string()));
    write_resolved_config(out, &resolved)?;
    println!("dataset written to {}", out.display());
    for (domain, split, n) in counts {
        println!("  {}/{}: {} images", domain.dir_name(), split.dir_name(), n);
    }
    Ok(())
}

fn loss_series(log: &[StepLog]) -> Vec<(String, Vec<(f64, f64)>)> {
    let col = |f: fn(&StepLog) -> f64| -> Vec<(f64, f64)> {
        log.iter().map(|r| (r.step as f64, f(r))).collect()
    };
    vec![
        ("total".to_string(), col(|r| r.total)),
        ("L_C".to_string(), col(|r| r.l_c)),
        ("L_S".to_string(), col(|r| r.l_s)),
        ("L_W".to_string(), col(|r| r.l_w)),
        ("L_T".to_string(), col(|r| r.l_t)),
    ]
}

fn train(config: &Path, variant: &str, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = Config::from_file(config)?;
    let seed = match seed {
        Some(s) => s,
        None => cfg.u64_or("seed", 1)?,
    };
    let k = classes_from_manifest(data)?;
    let settings = TrainSettings::from_config(&cfg, k, seed)?;
    let spec = VariantSpec::parse(variant)?;
    println!("training {} (seed {seed}) on {}", spec.name, data.display());
    let t0 = std::time::Instant::now();
    let mut trainer = Trainer::new(settings, spec, data, out)?;
    let outcome = trainer.run()?;
    let dt = t0.elapsed().as_secs_f64();
    svgplot::line_chart(
        &out.join("loss-curves.svg"),
        &format!("{variant} training losses"),
        "step",
        "loss",
        &loss_series(&outcome.log),
    )?;
    let last = outcome.log.last().expect("training ran at least one step");
    println!(
        "finished {} steps in {dt:.1}s; final total = {:.6} (L_C {:.6}, L_S {:.6}, L_W {:.6}, L_T {:.6})",
        last.step, last.total, last.l_c, last.l_s, last.l_w, last.l_t
    );
    if outcome.clamp_events > 0 {
        println!("note: {} probability clamp events during training", outcome.clamp_events);
    }
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    println!("log: {}", out.join("train-log.csv").display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split: &str, domain: &str, out: Option<&Path>) -> Result<()> {
    let split = Split::parse(split)?;
    let domain = Domain::parse(domain)?;
    let model = Model::load(checkpoint)?;
    let samples = dataset::load_split(data, domain, split)?;
    if samples.is_empty() {
        return Err(Error::invalid(format!(
            "no samples in {}/{}",
            domain.dir_name(),
            split.dir_name()
        )));
    }
    let report = evaluate(&model, &samples)?;
    let manifest = dataset::read_manifest(data)?;
    let digest = manifest.str_or("config_digest", "unknown");
    let text = report.to_text(&digest, &[]);
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval-report.txt"), &text)?;
        let resolved = vec![
            ("checkpoint".to_string(), checkpoint.display().to_string()),
            ("data.root".to_string(), data.display().to_string()),
            ("domain".to_string(), domain.dir_name().to_string()),
            ("split".to_string(), split.dir_name().to_string()),
            ("config_digest".to_string(), digest),
        ];
        write_resolved_config(dir, &resolved)?;
        println!("report written to {}", dir.join("eval-report.txt").display());
    }
    Ok(())
}

fn pseudo_label(
    checkpoint: &Path,
    data: &Path,
    epoch: usize,
    out: &Path,
    config: Option<&Path>,
    no_refine: bool,
) -> Result<()> {
    let cfg = match config {
        Some(p) => Config::from_file(p)?,
        None => Config::empty(),
    };
    let model = Model::load(checkpoint)?;
    let settings = TrainSettings::from_config(&cfg, model.k_classes, 0)?;
    let samples = dataset::load_split(data, Domain::Target, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::invalid("the target training split is empty"));
    }
    let portion = curriculum_portion(epoch);
    let maps = if no_refine {
        Vec::new()
    } else {
        samples
            .iter()
            .map(|s| slic(&s.image, &settings.slic))
            .collect::<Result<Vec<_>>>()?
    };
    let refine = (!no_refine).then(|| (&maps[..], settings.refine_in_place));
    let run = pseudo_label_set(&model, &samples, portion, settings.selection_mode, refine)?;

    std::fs::create_dir_all(out)?;
    let mut selected = 0usize;
    let mut total = 0usize;
    for (sample, (labels, raw)) in samples.iter().zip(run.labels.iter().zip(&run.pre_refine)) {
        let (h, w) = (labels.height, labels.width);
        pgm::save_class_mask(&out.join(format!("{}.yhat.pgm", sample.id)), w, h, &labels.yhat)?;
        pgm::save_binary_mask(&out.join(format!("{}.v.pgm", sample.id)), w, h, &labels.v)?;
        if !no_refine {
            pgm::save_binary_mask(&out.join(format!("{}.v-raw.pgm", sample.id)), w, h, &raw.v)?;
        }
        selected += labels.v.iter().filter(|&&b| b).count();
        total += labels.v.len();
    }
    adaseg_core::pseudo::write_thresholds_csv(
        &out.join("thresholds.csv"),
        &run.thresholds,
        &vec![0; model.k_classes],
    )?;
    let mut resolved = settings.resolved();
    resolved.push(("epoch".into(), epoch.to_string()));
    resolved.push(("refine".into(), (!no_refine).to_string()));
    resolved.push(("checkpoint".into(), checkpoint.display().to_string()));
    write_resolved_config(out, &resolved)?;
    println!(
        "pseudo-labels for {} images at portion {:.0}%: {}/{} pixels selected ({} flipped on by refinement)",
        samples.len(),
        portion * 100.0,
        selected,
        total,
        run.flipped
    );
    println!("masks written to {}", out.display());
    Ok(())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::invalid(format!("bad seed list {s:?}: {e}")))?;
    if seeds.is_empty() {
        return Err(Error::invalid("seed list is empty"));
    }
    Ok(seeds)
}

fn ablate(config: &Path, seeds: &str, out: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = Config::from_file(config)?;
    let seeds = parse_seeds(seeds)?;
    std::fs::create_dir_all(out)?;

    let data_root: PathBuf = match data {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = out.join("data");
            let data_seed = cfg.u64_or("data.seed", 12345)?;
            if dataset::read_manifest(&dir).is_ok() {
                println!("reusing dataset at {}", dir.display());
            } else {
                let set = SynthSettings::from_config(&cfg)?;
                generate_dataset(&set, data_seed, &dir)?;
                println!("dataset generated at {}", dir.display());
            }
            dir
        }
    };
    let k = classes_from_manifest(&data_root)?;
    let base = TrainSettings::from_config(&cfg, k, 0)?;

    let cells = run_ablation(&base, &data_root, out, &seeds)?;
    let rows = ablation_rows(&cells);
    println!("variant          IoU_n   IoU_d    mIoU");
    let bars: Vec<(String, f64)> = rows
        .iter()
        .map(|r| {
            println!(
                "{:<15} {:>7} {:>7} {:>7}",
                r.variant,
                adaseg_core::evalreport::percent(r.iou_n),
                adaseg_core::evalreport::percent(r.iou_d),
                adaseg_core::evalreport::percent(r.miou)
            );
            (r.variant.clone(), r.miou * 100.0)
        })
        .collect();
    svgplot::bar_chart(
        &out.join("ablation.svg"),
        &format!("target-test mIoU, mean over seeds {seeds:?}"),
        "mIoU (%)",
        &bars,
    )?;
    let mut resolved = base.resolved();
    resolved.push((
        "seeds".into(),
        seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
    ));
    resolved.push(("data.root".into(), data_root.display().to_string()));
    if let Ok(manifest) = dataset::read_manifest(&data_root) {
        let entries: Vec<(String, String)> =
            manifest.entries().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        resolved.push(("data.digest".into(), config_digest(&entries)));
    }
    write_resolved_config(out, &resolved)?;
    println!("table: {}", out.join("ablation.csv").display());
    println!("chart: {}", out.join("ablation.svg").display());
    Ok(())
}
