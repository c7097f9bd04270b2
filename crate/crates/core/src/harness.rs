//! Experiment harness: stratified evaluation, the training-window /
//! training-size grid, CSV reporting, and prediction-map rendering.
//!
//! A grid run sweeps patch side (TWS) and per-class training size (TS) for
//! both model variants, repeating each cell with fresh splits and inits.
//! Every run's seed is derived from the grid position as
//! `mix(base_seed, [tws, ts, variant id, repeat])`, never from scheduling,
//! so results are a pure function of the configuration and the thread
//! count only affects wall time. Both variants see the identical split in
//! a given (tws, ts, repeat) slot, making their comparison paired.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{
    normalize_bandwise, patch_margin, split_train_test, HyperCube, LabelMap, SamplePool,
    SplitSpec, UNLABELED,
};
use crate::error::{Error, Result};
use crate::model::{predict, Activation, DenseFnn, LayerDims, Model, RankRFnn};
use crate::optim::{train, TrainConfig};
use crate::seed::mix;

/// Which weight parameterization a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    RankR,
    Dense,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::RankR => "rank_r_fnn",
            Variant::Dense => "dense_fnn",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "rank_r_fnn" => Ok(Variant::RankR),
            "dense_fnn" => Ok(Variant::Dense),
            other => Err(Error::invalid(format!(
                "unknown variant {other:?}, expected rank_r_fnn or dense_fnn"
            ))),
        }
    }

    /// Stable id mixed into run seeds.
    fn id(self) -> u64 {
        match self {
            Variant::RankR => 0,
            Variant::Dense => 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Full sweep description. The embedded train config's `seed` field is
/// ignored; per-run seeds derive from `base_seed` and the grid position.
#[derive(Debug, Clone)]
pub struct ExperimentGrid {
    /// Training window sides (patch sides) to sweep; each must be odd.
    pub tws_values: Vec<usize>,
    /// Per-class training sizes to sweep.
    pub ts_values: Vec<usize>,
    /// Independent repetitions per cell (fresh split and init each).
    pub repeats: usize,
    pub variants: Vec<Variant>,
    pub hidden_count: usize,
    /// CP rank of the factorized variant.
    pub rank: usize,
    pub activation: Activation,
    pub use_bias: bool,
    pub train: TrainConfig,
    pub base_seed: u64,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            tws_values: vec![9, 15, 21],
            ts_values: vec![50, 100, 200, 400],
            repeats: 10,
            variants: vec![Variant::RankR, Variant::Dense],
            hidden_count: 10,
            rank: 3,
            activation: Activation::Sigmoid,
            use_bias: false,
            train: TrainConfig::default(),
            base_seed: 0,
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.tws_values.is_empty() || self.ts_values.is_empty() || self.variants.is_empty() {
            return Err(Error::invalid(
                "grid needs at least one tws value, ts value, and variant",
            ));
        }
        for &tws in &self.tws_values {
            if tws == 0 || tws % 2 == 0 {
                return Err(Error::invalid(format!("tws values must be odd, got {tws}")));
            }
        }
        if self.ts_values.iter().any(|&ts| ts == 0) {
            return Err(Error::invalid("ts values must be >= 1"));
        }
        if self.repeats < 2 {
            return Err(Error::invalid(
                "repeats must be >= 2 so spreads and intervals exist",
            ));
        }
        if self.hidden_count == 0 || self.rank == 0 {
            return Err(Error::invalid("hidden_count and rank must be >= 1"));
        }
        self.train.validate()
    }

    /// Cells × repeats.
    pub fn run_count(&self) -> usize {
        self.cell_count() * self.repeats
    }

    pub fn cell_count(&self) -> usize {
        self.variants.len() * self.tws_values.len() * self.ts_values.len()
    }
}

/// Test-set metrics for one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    /// `confusion[actual][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// Per-class recall `correct_c / total_c`; 0 for classes absent from
    /// the test set.
    pub per_class: Vec<f64>,
    /// Fraction of all test samples classified correctly.
    pub overall: f64,
    pub total: usize,
}

impl EvalMetrics {
    fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut per_class = Vec::with_capacity(confusion.len());
        for (class, row) in confusion.iter().enumerate() {
            let row_total: usize = row.iter().sum();
            correct += row[class];
            total += row_total;
            per_class.push(if row_total == 0 {
                0.0
            } else {
                row[class] as f64 / row_total as f64
            });
        }
        EvalMetrics {
            per_class,
            overall: correct as f64 / total as f64,
            total,
            confusion,
        }
    }
}

/// Streams the given pool entries through the model and tallies a
/// confusion matrix; patches are materialized one at a time so arbitrarily
/// large test sets evaluate in constant memory.
pub fn evaluate(model: &dyn Model, pool: &SamplePool, indices: &[usize]) -> Result<EvalMetrics> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty test set"));
    }
    let classes = pool.class_count();
    let mut confusion = vec![vec![0usize; classes]; classes];
    for &index in indices {
        let entry = &pool.entries()[index];
        let actual = entry.class_id;
        let patch = pool.materialize(index)?;
        let predicted = predict(model, &patch.tensor)?;
        confusion[actual][predicted] += 1;
    }
    Ok(EvalMetrics::from_confusion(confusion))
}

/// One trained-and-evaluated grid position.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub variant: Variant,
    pub tws: usize,
    pub ts: usize,
    pub repeat: usize,
    pub seed: u64,
    pub overall_acc: f64,
    pub class_acc: Vec<f64>,
    pub loss_final: f64,
    pub wall_ms: u64,
}

/// Mean / spread / 95% confidence interval of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Mean, sample std, and a two-sided 95% Student-t interval
/// `mean ± t(0.975, n−1) · std / √n`. With only a handful of repeats per
/// cell the normal approximation would be too tight, hence t.
pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    let n = values.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "aggregation needs at least 2 values, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::invalid(e.to_string()))?
        .inverse_cdf(0.975);
    let half = t * std / (n as f64).sqrt();
    Ok(Aggregate {
        n,
        mean,
        std,
        ci_low: mean - half,
        ci_high: mean + half,
    })
}

/// Aggregated accuracy for one (variant, tws, ts) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub variant: Variant,
    pub tws: usize,
    pub ts: usize,
    pub accuracy: Aggregate,
    pub mean_loss: f64,
    pub mean_wall_ms: f64,
}

// Substream tag for split seeds; splits are shared across variants so the
// two parameterizations are compared on identical data draws.
const SPLIT_STREAM: u64 = 2;

/// Trains and evaluates one grid position on an already-normalized pool.
pub fn run_cell(
    pool: &SamplePool,
    grid: &ExperimentGrid,
    variant: Variant,
    tws: usize,
    ts: usize,
    repeat: usize,
) -> Result<RunRecord> {
    let context = || format!("{} tws={tws} ts={ts} repeat={repeat}", variant.name());
    if pool.patch_side() != tws {
        return Err(Error::invalid(format!(
            "pool was built for patch side {}, cell wants {tws}",
            pool.patch_side()
        )));
    }
    let run_seed = mix(grid.base_seed, &[tws as u64, ts as u64, variant.id(), repeat as u64]);
    let split_seed = mix(grid.base_seed, &[tws as u64, ts as u64, SPLIT_STREAM]);
    let started = Instant::now();

    let (train_set, test_indices) = split_train_test(
        pool,
        &SplitSpec {
            samples_per_class: ts,
            seed: split_seed,
            repeat_index: repeat as u64,
        },
    )
    .map_err(|e| e.with_context(context()))?;

    let dims = LayerDims {
        hidden_count: grid.hidden_count,
        class_count: pool.class_count(),
        patch_side: tws,
        band_count: pool.band_count(),
    };
    let config = grid.train.clone().with_seed(run_seed);
    let (metrics, loss_final) = match variant {
        Variant::RankR => {
            let template = RankRFnn::zeros(dims, grid.rank, grid.activation, grid.use_bias)?;
            let outcome =
                train(&template, &train_set, &config).map_err(|e| e.with_context(context()))?;
            let loss = *outcome.loss_history.last().unwrap();
            (evaluate(&outcome.model, pool, &test_indices)?, loss)
        }
        Variant::Dense => {
            let template = DenseFnn::zeros(dims, grid.activation, grid.use_bias)?;
            let outcome =
                train(&template, &train_set, &config).map_err(|e| e.with_context(context()))?;
            let loss = *outcome.loss_history.last().unwrap();
            (evaluate(&outcome.model, pool, &test_indices)?, loss)
        }
    };

    Ok(RunRecord {
        variant,
        tws,
        ts,
        repeat,
        seed: run_seed,
        overall_acc: metrics.overall,
        class_acc: metrics.per_class,
        loss_final,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

/// Run rows plus per-cell summaries for a whole sweep.
#[derive(Debug, Clone)]
pub struct GridOutput {
    /// In (variant, tws, ts, repeat) order, repeat fastest.
    pub runs: Vec<RunRecord>,
    /// In (variant, tws, ts) order.
    pub summaries: Vec<CellSummary>,
    pub class_count: usize,
}

/// Runs the full sweep over one or more labeled scenes. Cubes are
/// band-normalized internally; pass them raw. Up to `threads` runs execute
/// concurrently, and because every run's seed comes from its grid position
/// the output is identical for any thread count.
pub fn run_grid(
    scenes: &[(&HyperCube, &LabelMap)],
    grid: &ExperimentGrid,
    threads: usize,
) -> Result<GridOutput> {
    grid.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("grid needs at least one (cube, labels) scene"));
    }
    if threads == 0 {
        return Err(Error::invalid("threads must be >= 1"));
    }
    let class_count = scenes
        .iter()
        .filter_map(|(_, labels)| labels.max_class_id())
        .max()
        .map(|max| max as usize + 1)
        .ok_or_else(|| Error::invalid("no labeled pixels in any scene"))?;
    if class_count < 2 {
        return Err(Error::invalid("scenes must contain at least 2 classes"));
    }

    let normalized: Vec<(HyperCube, &LabelMap)> = scenes
        .iter()
        .map(|(cube, labels)| (normalize_bandwise(cube), *labels))
        .collect();
    let pairs: Vec<(&HyperCube, &LabelMap)> =
        normalized.iter().map(|(cube, labels)| (cube, *labels)).collect();
    let pools: Vec<SamplePool> = grid
        .tws_values
        .iter()
        .map(|&tws| SamplePool::aggregate(&pairs, tws, class_count))
        .collect::<Result<_>>()?;

    let mut jobs = Vec::with_capacity(grid.run_count());
    for &variant in &grid.variants {
        for (tws_index, &tws) in grid.tws_values.iter().enumerate() {
            for &ts in &grid.ts_values {
                for repeat in 0..grid.repeats {
                    jobs.push((variant, tws_index, tws, ts, repeat));
                }
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
    let runs: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(variant, tws_index, tws, ts, repeat)| {
                run_cell(&pools[tws_index], grid, variant, tws, ts, repeat)
            })
            .collect::<Result<_>>()
    })?;

    let summaries = runs
        .chunks(grid.repeats)
        .map(|cell| {
            let accs: Vec<f64> = cell.iter().map(|r| r.overall_acc).collect();
            let losses: f64 = cell.iter().map(|r| r.loss_final).sum();
            let walls: f64 = cell.iter().map(|r| r.wall_ms as f64).sum();
            Ok(CellSummary {
                variant: cell[0].variant,
                tws: cell[0].tws,
                ts: cell[0].ts,
                accuracy: aggregate(&accs)?,
                mean_loss: losses / cell.len() as f64,
                mean_wall_ms: walls / cell.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(GridOutput {
        runs,
        summaries,
        class_count,
    })
}

fn fmt_float(v: f64) -> String {
    format!("{v:.6}")
}

/// Per-run CSV. Header:
/// `variant,tws,ts,repeat,seed,overall_acc,acc_class_0..C−1,loss_final,wall_ms`.
pub fn runs_csv(runs: &[RunRecord], class_count: usize) -> String {
    let mut out = String::from("variant,tws,ts,repeat,seed,overall_acc");
    for c in 0..class_count {
        out.push_str(&format!(",acc_class_{c}"));
    }
    out.push_str(",loss_final,wall_ms\n");
    for run in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            run.variant,
            run.tws,
            run.ts,
            run.repeat,
            run.seed,
            fmt_float(run.overall_acc)
        ));
        for c in 0..class_count {
            let acc = run.class_acc.get(c).copied().unwrap_or(0.0);
            out.push_str(&format!(",{}", fmt_float(acc)));
        }
        out.push_str(&format!(",{},{}\n", fmt_float(run.loss_final), run.wall_ms));
    }
    out
}

/// Per-cell CSV with both the spread and the 95% interval.
pub fn summary_csv(summaries: &[CellSummary]) -> String {
    let mut out =
        String::from("variant,tws,ts,repeats,mean_acc,std_acc,ci_low,ci_high,mean_loss,mean_wall_ms\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            s.variant,
            s.tws,
            s.ts,
            s.accuracy.n,
            fmt_float(s.accuracy.mean),
            fmt_float(s.accuracy.std),
            fmt_float(s.accuracy.ci_low),
            fmt_float(s.accuracy.ci_high),
            fmt_float(s.mean_loss),
            fmt_float(s.mean_wall_ms),
        ));
    }
    out
}

/// Drops any `*wall_ms` columns so outputs can be compared across runs and
/// thread counts; wall time is the one legitimately nondeterministic field.
pub fn strip_timing(csv: &str) -> String {
    let mut lines = csv.lines();
    let header = match lines.next() {
        Some(h) => h,
        None => return String::new(),
    };
    let keep: Vec<bool> = header
        .split(',')
        .map(|name| !name.ends_with("wall_ms"))
        .collect();
    let filter = |line: &str| {
        line.split(',')
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(field, _)| field)
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut out = filter(header);
    out.push('\n');
    for line in lines {
        out.push_str(&filter(line));
        out.push('\n');
    }
    out
}

/// Class colors for rendered maps, wrapping for class ids past the
/// documented first four: yellow, light blue, orange, red, then green,
/// magenta, cyan, white.
pub const CLASS_PALETTE: [[u8; 3]; 8] = [
    [255, 255, 0],
    [135, 206, 250],
    [255, 165, 0],
    [255, 0, 0],
    [0, 200, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 255, 255],
];

/// Margins and unlabeled pixels render black.
pub const BACKGROUND: [u8; 3] = [0, 0, 0];

pub fn class_color(class: usize) -> [u8; 3] {
    CLASS_PALETTE[class % CLASS_PALETTE.len()]
}

fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[[u8; 3]]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    emit(format!("P6\n{width} {height}\n255\n").as_bytes())?;
    for pixel in pixels {
        emit(pixel)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Renders ground truth: every labeled pixel in its class color.
pub fn render_label_map(labels: &LabelMap, path: &Path) -> Result<()> {
    let pixels: Vec<[u8; 3]> = (0..labels.height())
        .flat_map(|r| (0..labels.width()).map(move |c| (r, c)))
        .map(|(r, c)| match labels.get(r, c) {
            UNLABELED => BACKGROUND,
            class => class_color(class as usize),
        })
        .collect();
    write_ppm(path, labels.width(), labels.height(), &pixels)
}

/// Classifies every labeled interior pixel of an already-normalized cube
/// and writes the color-coded map; border margins (where no full patch
/// fits) and unlabeled pixels come out black.
pub fn render_prediction_map(
    model: &dyn Model,
    cube: &HyperCube,
    labels: &LabelMap,
    path: &Path,
) -> Result<()> {
    if cube.height() != labels.height() || cube.width() != labels.width() {
        return Err(Error::shape(format!(
            "cube is {}x{} but label map is {}x{}",
            cube.height(),
            cube.width(),
            labels.height(),
            labels.width()
        )));
    }
    let dims = model.dims();
    if cube.bands() != dims.band_count {
        return Err(Error::shape(format!(
            "cube has {} bands but the model expects {}",
            cube.bands(),
            dims.band_count
        )));
    }
    let side = dims.patch_side;
    let margin = patch_margin(side);
    let (height, width) = (cube.height(), cube.width());
    let mut pixels = vec![BACKGROUND; height * width];
    if height > 2 * margin && width > 2 * margin {
        for row in margin..height - margin {
            for col in margin..width - margin {
                if labels.get(row, col) == UNLABELED {
                    continue;
                }
                let patch = crate::data::extract_patch(cube, row, col, side)?;
                let class = predict(model, &patch)?;
                pixels[row * width + col] = class_color(class);
            }
        }
    }
    write_ppm(path, width, height, &pixels)
}
