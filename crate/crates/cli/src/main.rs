//! `rrfnn`: train, evaluate, and sweep Rank-R tensor networks on
//! hyperspectral scenes from the command line.
//!
//! Exit codes: 0 success, 1 usage or invalid configuration, 2 data error
//! (missing/corrupt files, insufficient samples), 3 training diverged.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use rrfnn_core::config::Settings;
use rrfnn_core::data::{
    build_sample_pool, load_cube, load_labels, normalize_bandwise, read_raw_f32, save_cube,
    save_labels, split_train_test, Dtype, HyperCube, LabelMap, SplitSpec,
};
use rrfnn_core::error::{Error, Result};
use rrfnn_core::harness::{
    evaluate, render_label_map, render_prediction_map, run_grid, runs_csv, summary_csv, Variant,
};
use rrfnn_core::model::gradcheck::{check_dense, check_rank_r, FD_TOLERANCE};
use rrfnn_core::model::{
    load_model, save_dense, save_rank_r, DenseFnn, LayerDims, Model, RankRFnn,
};
use rrfnn_core::optim::train;
use rrfnn_core::synth::{generate_scene, scene_difficulty};

#[derive(Parser)]
#[command(name = "rrfnn", version, about = "Rank-R tensor networks for hyperspectral pixel classification")]
struct Cli {
    /// Base seed for anything random; defaults to the config file's
    /// `seed`, or 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Flat key=value settings file; command-line overrides win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Single key=value override on top of the config file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Concurrent runs for `grid`.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Directory for produced files.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic labeled scene.
    Generate {
        /// Cube destination; default <out-dir>/scene.hsc.
        #[arg(long, value_name = "FILE")]
        out_cube: Option<PathBuf>,
        /// Label map destination; default <out-dir>/scene.lbl.
        #[arg(long, value_name = "FILE")]
        out_labels: Option<PathBuf>,
        /// Also render the ground-truth class map to this PPM file.
        #[arg(long, value_name = "FILE")]
        preview: Option<PathBuf>,
    },
    /// Wrap a headerless band-sequential raw f32 file as a cube file.
    Convert {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        bands: usize,
        /// Destination; default <out-dir>/converted.hsc.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
        /// Stored value type: f32 or f64.
        #[arg(long, default_value = "f32")]
        dtype: String,
    },
    /// Train one model on a stratified sample of a labeled cube.
    Train {
        #[arg(long, value_name = "FILE")]
        cube: PathBuf,
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
        /// rank_r_fnn or dense_fnn.
        #[arg(long, default_value = "rank_r_fnn")]
        variant: String,
        /// Training window side (patch side); odd.
        #[arg(long, default_value_t = 9)]
        tws: usize,
        /// Training samples drawn per class.
        #[arg(long, default_value_t = 50)]
        ts: usize,
        /// Shorthand for --set epochs=N.
        #[arg(long)]
        epochs: Option<usize>,
        /// Destination; default <out-dir>/model.bin.
        #[arg(long, value_name = "FILE")]
        out_model: Option<PathBuf>,
    },
    /// Evaluate a saved model over every eligible labeled pixel.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        cube: PathBuf,
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
    },
    /// Run the full TWS × TS × variant × repeat experiment grid.
    Grid {
        #[arg(long, value_name = "FILE", required = true)]
        cube: Vec<PathBuf>,
        /// One label map per cube, in the same order.
        #[arg(long, value_name = "FILE", required = true)]
        labels: Vec<PathBuf>,
    },
    /// Render a classification map (or, without a model, ground truth).
    Render {
        #[arg(long, value_name = "FILE")]
        cube: PathBuf,
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
        /// Model to run; omit to render the label map itself.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Destination; default <out-dir>/prediction.ppm or truth.ppm.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version arrive here too; they are not failures.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::InvalidArgument(_) => 1,
        Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut settings = match &cli.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::empty(),
    };
    for pair in &cli.overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::invalid(format!("--set expects key=value, got {pair:?}"))
        })?;
        settings.set(key.trim(), value.trim())?;
    }
    let seed = match cli.seed {
        Some(seed) => seed,
        None => settings.seed()?.unwrap_or(0),
    };
    if cli.threads == 0 {
        return Err(Error::invalid("--threads must be >= 1"));
    }
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;

    match cli.command {
        Command::Generate {
            out_cube,
            out_labels,
            preview,
        } => generate(&cli.out_dir, &settings, seed, out_cube, out_labels, preview),
        Command::Convert {
            input,
            height,
            width,
            bands,
            output,
            dtype,
        } => convert(&cli.out_dir, &input, height, width, bands, output, &dtype),
        Command::Train {
            cube,
            labels,
            variant,
            tws,
            ts,
            epochs,
            out_model,
        } => {
            let mut settings = settings;
            if let Some(epochs) = epochs {
                settings.set("epochs", epochs.to_string())?;
            }
            train_one(
                &cli.out_dir,
                &settings,
                seed,
                &cube,
                &labels,
                &variant,
                tws,
                ts,
                out_model,
            )
        }
        Command::Evaluate {
            cube,
            labels,
            model,
        } => evaluate_saved(&cube, &labels, &model),
        Command::Grid { cube, labels } => {
            grid(&cli.out_dir, &settings, seed, cli.threads, &cube, &labels)
        }
        Command::Render {
            cube,
            labels,
            model,
            output,
        } => render(&cli.out_dir, &cube, &labels, model, output),
        Command::Gradcheck { trials } => gradcheck(trials, seed),
    }
}

fn load_scene(cube: &Path, labels: &Path) -> Result<(HyperCube, LabelMap)> {
    let cube = load_cube(cube)?;
    let labels = load_labels(labels)?;
    Ok((cube, labels))
}

fn scene_class_count(labels: &LabelMap) -> Result<usize> {
    let max = labels
        .max_class_id()
        .ok_or_else(|| Error::invalid("label map has no labeled pixels"))?;
    let count = max as usize + 1;
    if count < 2 {
        return Err(Error::invalid(
            "label map contains a single class; nothing to classify",
        ));
    }
    Ok(count)
}

fn generate(
    out_dir: &Path,
    settings: &Settings,
    seed: u64,
    out_cube: Option<PathBuf>,
    out_labels: Option<PathBuf>,
    preview: Option<PathBuf>,
) -> Result<()> {
    let config = settings.scene_config(seed)?;
    let (cube, labels) = generate_scene(&config)?;
    let difficulty = scene_difficulty(&normalize_bandwise(&cube), &labels)?;

    let cube_path = out_cube.unwrap_or_else(|| out_dir.join("scene.hsc"));
    let labels_path = out_labels.unwrap_or_else(|| out_dir.join("scene.lbl"));
    save_cube(&cube, &cube_path, Dtype::F64)?;
    save_labels(&labels, &labels_path)?;

    let mut histogram = vec![0usize; config.class_count];
    for &label in labels.labels() {
        histogram[label as usize] += 1;
    }
    println!(
        "generated {}x{}x{} scene, seed {seed}, difficulty {difficulty:.4}",
        config.height, config.width, config.bands
    );
    println!("class pixel counts: {histogram:?}");
    println!("wrote {} and {}", cube_path.display(), labels_path.display());
    if let Some(path) = preview {
        render_label_map(&labels, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn convert(
    out_dir: &Path,
    input: &Path,
    height: usize,
    width: usize,
    bands: usize,
    output: Option<PathBuf>,
    dtype: &str,
) -> Result<()> {
    let dtype = match dtype {
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => {
            return Err(Error::invalid(format!(
                "unknown dtype {other:?}, expected f32 or f64"
            )))
        }
    };
    let cube = read_raw_f32(input, height, width, bands)?;
    let path = output.unwrap_or_else(|| out_dir.join("converted.hsc"));
    save_cube(&cube, &path, dtype)?;
    println!("wrote {} ({height}x{width}x{bands})", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    out_dir: &Path,
    settings: &Settings,
    seed: u64,
    cube_path: &Path,
    labels_path: &Path,
    variant: &str,
    tws: usize,
    ts: usize,
    out_model: Option<PathBuf>,
) -> Result<()> {
    let variant = Variant::from_name(variant)?;
    let config = settings.train_config(seed)?;
    let (cube, labels) = load_scene(cube_path, labels_path)?;
    let normalized = normalize_bandwise(&cube);
    let class_count = scene_class_count(&labels)?;
    let pool = build_sample_pool(&normalized, &labels, tws, class_count)?;
    let (train_set, test_indices) = split_train_test(
        &pool,
        &SplitSpec {
            samples_per_class: ts,
            seed,
            repeat_index: 0,
        },
    )?;
    let dims = LayerDims {
        hidden_count: settings.hidden_count()?,
        class_count,
        patch_side: tws,
        band_count: pool.band_count(),
    };
    let activation = settings.activation()?;
    let with_bias = settings.use_bias()?;
    let model_path = out_model.unwrap_or_else(|| out_dir.join("model.bin"));

    let (param_count, loss_final, metrics) = match variant {
        Variant::RankR => {
            let template = RankRFnn::zeros(dims, settings.rank()?, activation, with_bias)?;
            let outcome = train(&template, &train_set, &config)?;
            save_rank_r(&outcome.model, &model_path)?;
            let metrics = evaluate(&outcome.model, &pool, &test_indices)?;
            (
                outcome.model.param_count(),
                *outcome.loss_history.last().unwrap(),
                metrics,
            )
        }
        Variant::Dense => {
            let template = DenseFnn::zeros(dims, activation, with_bias)?;
            let outcome = train(&template, &train_set, &config)?;
            save_dense(&outcome.model, &model_path)?;
            let metrics = evaluate(&outcome.model, &pool, &test_indices)?;
            (
                outcome.model.param_count(),
                *outcome.loss_history.last().unwrap(),
                metrics,
            )
        }
    };

    println!(
        "trained {variant} (tws={tws}, ts={ts}, {} samples, {param_count} params, {} epochs)",
        train_set.len(),
        config.epochs
    );
    println!("final training loss {loss_final:.6}");
    println!(
        "held-out accuracy {:.4} over {} samples",
        metrics.overall, metrics.total
    );
    println!("wrote {}", model_path.display());
    Ok(())
}

fn evaluate_saved(cube_path: &Path, labels_path: &Path, model_path: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let dims = model.dims();
    let (cube, labels) = load_scene(cube_path, labels_path)?;
    let normalized = normalize_bandwise(&cube);
    let pool = build_sample_pool(&normalized, &labels, dims.patch_side, dims.class_count)?;
    let all: Vec<usize> = (0..pool.len()).collect();
    let metrics = evaluate(&model, &pool, &all)?;

    println!(
        "{} on {} labeled pixels (tws={})",
        model.variant_name(),
        metrics.total,
        dims.patch_side
    );
    println!("overall accuracy {:.4}", metrics.overall);
    for (class, acc) in metrics.per_class.iter().enumerate() {
        println!("class {class} accuracy {acc:.4}");
    }
    println!("confusion (rows actual, columns predicted):");
    for row in &metrics.confusion {
        println!("  {row:?}");
    }
    Ok(())
}

fn grid(
    out_dir: &Path,
    settings: &Settings,
    seed: u64,
    threads: usize,
    cube_paths: &[PathBuf],
    label_paths: &[PathBuf],
) -> Result<()> {
    if cube_paths.len() != label_paths.len() {
        return Err(Error::invalid(format!(
            "{} cubes but {} label maps; pass one --labels per --cube",
            cube_paths.len(),
            label_paths.len()
        )));
    }
    let grid = settings.experiment_grid(seed)?;
    let scenes: Vec<(HyperCube, LabelMap)> = cube_paths
        .iter()
        .zip(label_paths)
        .map(|(c, l)| load_scene(c, l))
        .collect::<Result<_>>()?;
    let refs: Vec<(&HyperCube, &LabelMap)> = scenes.iter().map(|(c, l)| (c, l)).collect();

    println!(
        "running {} cells x {} repeats = {} runs on {} threads",
        grid.cell_count(),
        grid.repeats,
        grid.run_count(),
        threads
    );
    let output = run_grid(&refs, &grid, threads)?;

    let runs_path = out_dir.join("runs.csv");
    let summary_path = out_dir.join("summary.csv");
    std::fs::write(&runs_path, runs_csv(&output.runs, output.class_count))
        .map_err(|e| Error::io(&runs_path, e))?;
    std::fs::write(&summary_path, summary_csv(&output.summaries))
        .map_err(|e| Error::io(&summary_path, e))?;

    for s in &output.summaries {
        println!(
            "{} tws={} ts={}: mean {:.4} std {:.4} ci ({:.4}, {:.4})",
            s.variant,
            s.tws,
            s.ts,
            s.accuracy.mean,
            s.accuracy.std,
            s.accuracy.ci_low,
            s.accuracy.ci_high
        );
    }
    println!("wrote {} and {}", runs_path.display(), summary_path.display());
    Ok(())
}

fn render(
    out_dir: &Path,
    cube_path: &Path,
    labels_path: &Path,
    model_path: Option<PathBuf>,
    output: Option<PathBuf>,
) -> Result<()> {
    let (cube, labels) = load_scene(cube_path, labels_path)?;
    match model_path {
        Some(model_path) => {
            let model = load_model(&model_path)?;
            let normalized = normalize_bandwise(&cube);
            let path = output.unwrap_or_else(|| out_dir.join("prediction.ppm"));
            render_prediction_map(&model, &normalized, &labels, &path)?;
            println!("wrote {}", path.display());
        }
        None => {
            let path = output.unwrap_or_else(|| out_dir.join("truth.ppm"));
            render_label_map(&labels, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn gradcheck(trials: usize, seed: u64) -> Result<()> {
    if trials == 0 {
        return Err(Error::invalid("--trials must be >= 1"));
    }
    let activation = rrfnn_core::model::Activation::default();
    let rank_r = check_rank_r(trials, seed, activation, false)?;
    let dense = check_dense(trials, seed, activation, false)?;
    println!(
        "rank_r_fnn: {} trials, {} params, max relative error {:.3e}",
        rank_r.trials, rank_r.params_checked, rank_r.max_rel_err
    );
    println!(
        "dense_fnn: {} trials, {} params, max relative error {:.3e}",
        dense.trials, dense.params_checked, dense.max_rel_err
    );
    if rank_r.passed() && dense.passed() {
        println!("PASS (tolerance {FD_TOLERANCE:.0e})");
        Ok(())
    } else {
        eprintln!("FAIL (tolerance {FD_TOLERANCE:.0e})");
        std::process::exit(2);
    }
}
