//! One binary for the whole workflow: synthesize data, train, evaluate,
//! check gradients, dump attention heatmaps, run ablation grids.
//!
//! Every subcommand is deterministic given its config file; all seeds are
//! config fields. `SPARSEG_OUT_DIR` overrides output directories and is
//! the only environment variable consulted.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use sparseg_core::checkpoint;
use sparseg_core::config::RunConfig;
use sparseg_core::dataset;
use sparseg_core::gradcheck;
use sparseg_core::losses;
use sparseg_core::model::{self, LossPath};
use sparseg_core::pnm;
use sparseg_core::trainer;
use sparseg_core::vis;
use sparseg_core::{CoreError, Result};

#[derive(Parser)]
#[command(name = "sparseg", version, about = "Sparsely annotated segmentation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/eval splits on disk
    MakeData {
        /// TOML run configuration
        #[arg(long)]
        config: PathBuf,
        /// Output directory (train/ and eval/ are created inside)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint plus loss log
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset split directory written by make-data
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint.bin and loss_log.csv
        #[arg(long)]
        out: PathBuf,
        /// Train on the labeled-cell cross-entropy only (no affinity term)
        #[arg(long)]
        seg_only: bool,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Verify analytic gradients against central finite differences
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Minimum number of sampled coordinates
        #[arg(long, default_value_t = 200)]
        min_coords: usize,
        /// Failure threshold on the max relative error
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Write per-block attention heatmaps for a reference point
    DumpAttention {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (binary PPM)
        #[arg(long)]
        image: PathBuf,
        /// Reference point x coordinate (column)
        #[arg(long)]
        x: usize,
        /// Reference point y coordinate (row)
        #[arg(long)]
        y: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the block-mask and metric ablation grid, write CSV
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// The only environment override: redirect output directories.
fn resolve_out(out: PathBuf) -> PathBuf {
    match std::env::var_os("SPARSEG_OUT_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => out,
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn cmd_make_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    ensure_dir(out)?;
    let train = dataset::write_split(
        &out.join("train"),
        &cfg.dataset,
        &cfg.sparsify,
        dataset::train_split_seed(&cfg.dataset),
        cfg.dataset.train_count,
    )?;
    let eval = dataset::write_split(
        &out.join("eval"),
        &cfg.dataset,
        &cfg.sparsify,
        dataset::eval_split_seed(&cfg.dataset),
        cfg.dataset.eval_count,
    )?;
    println!(
        "wrote {} train and {} eval samples ({}x{}, {} classes) to {}",
        train.count,
        eval.count,
        cfg.dataset.width,
        cfg.dataset.height,
        cfg.dataset.num_classes,
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, data_dir: &Path, out: &Path, seg_only: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (data, _) = dataset::load_split(data_dir)?;
    let path = if seg_only {
        LossPath::SegOnly
    } else {
        LossPath::Full
    };
    let result = trainer::train(&cfg.model, &cfg.loss, &cfg.train, &data, path)?;
    ensure_dir(out)?;
    checkpoint::save(&out.join("checkpoint.bin"), &result.params)?;
    let log_path = out.join("loss_log.csv");
    let mut file = std::fs::File::create(&log_path)
        .map_err(|e| CoreError::io(log_path.display().to_string(), e))?;
    trainer::write_log_csv(&mut file, &result.log)?;
    let last = result.log.last().expect("steps >= 1");
    println!(
        "trained {} steps: l_seg {:.6} l_aff {:.6} total {:.6}",
        result.log.len(),
        last.l_seg,
        last.l_aff,
        last.total
    );
    Ok(())
}

fn cmd_eval(config: &Path, ckpt: &Path, data_dir: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let params = checkpoint::load(ckpt)?;
    let mut expected = model::init_params(&cfg.model, 0)?;
    expected.load_from(&params)?;
    let (data, _) = dataset::load_split(data_dir)?;
    let report = trainer::evaluate(&cfg.model, &expected, &data)?;
    for (k, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {k}: iou {v:.4}"),
            None => println!("class {k}: absent"),
        }
    }
    println!("miou {:.4}", report.miou);
    Ok(())
}

fn cmd_gradcheck(config: &Path, min_coords: usize, tolerance: f64) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = dataset::generate_samples(
        &cfg.dataset,
        &cfg.sparsify,
        dataset::train_split_seed(&cfg.dataset),
        1,
    )?;
    let sample = &data.samples[0];
    let params = model::init_params(&cfg.model, cfg.train.seed)?;
    let cells = losses::project_labels(&sample.sparse, &cfg.model.encoder)?;
    let step = model::loss_and_grads(
        &cfg.model,
        &cfg.loss,
        &params,
        &sample.image,
        &cells,
        LossPath::Full,
    )?;
    let report = gradcheck::finite_diff_check(
        |p| model::loss_value(&cfg.model, &cfg.loss, p, &sample.image, &cells),
        &params,
        &step.grads,
        1e-5,
        min_coords,
        cfg.train.seed,
    )?;
    println!("group,max_rel_error");
    for (name, err) in &report.per_group {
        println!("{name},{err:.3e}");
    }
    println!(
        "checked {} coordinates, max relative error {:.3e}",
        report.coords_checked, report.max_rel_error
    );
    if report.max_rel_error > tolerance {
        return Err(CoreError::Autodiff(format!(
            "max relative error {:.3e} exceeds {tolerance:.1e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn cmd_dump_attention(
    config: &Path,
    ckpt: &Path,
    image_path: &Path,
    x: usize,
    y: usize,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let params = checkpoint::load(ckpt)?;
    let mut expected = model::init_params(&cfg.model, 0)?;
    expected.load_from(&params)?;
    let image = pnm::read_ppm(image_path)?;
    let inference = model::forward_inference(&cfg.model, &expected, &image)?;
    let (h, w) = (cfg.model.encoder.image_height, cfg.model.encoder.image_width);
    let maps = vis::attention_heatmaps(&inference, h, w, x, y)?;
    ensure_dir(out)?;
    for map in &maps {
        let path = out.join(format!("attention_block{}.pgm", map.block));
        vis::write_heatmap(&path, map)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_ablate(config: &Path, train_dir: &Path, eval_dir: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (train_data, _) = dataset::load_split(train_dir)?;
    let (eval_data, _) = dataset::load_split(eval_dir)?;
    let rows = trainer::ablation_grid(&cfg.model, &cfg.loss, &cfg.train, &train_data, &eval_data)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let mut file =
        std::fs::File::create(out).map_err(|e| CoreError::io(out.display().to_string(), e))?;
    trainer::write_ablation_csv(&mut file, &rows)?;
    for r in &rows {
        println!("{}: miou {:.4} final loss {:.4}", r.name, r.miou, r.final_total);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData { config, out } => cmd_make_data(&config, &resolve_out(out)),
        Command::Train {
            config,
            data,
            out,
            seg_only,
        } => cmd_train(&config, &data, &resolve_out(out), seg_only),
        Command::Eval {
            config,
            checkpoint,
            data,
        } => cmd_eval(&config, &checkpoint, &data),
        Command::Gradcheck {
            config,
            min_coords,
            tolerance,
        } => cmd_gradcheck(&config, min_coords, tolerance),
        Command::DumpAttention {
            config,
            checkpoint,
            image,
            x,
            y,
            out,
        } => cmd_dump_attention(&config, &checkpoint, &image, x, y, &resolve_out(out)),
        Command::Ablate {
            config,
            train_data,
            eval_data,
            out,
        } => cmd_ablate(&config, &train_data, &eval_data, &resolve_out(out)),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
