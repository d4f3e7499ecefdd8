//! Implementations of the six subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use m2ost_core::config::{HeadMode, ModelConfig};
use m2ost_core::data::{Split, StDataset};
use m2ost_core::encoder::init_parameters;
use m2ost_core::eval::{
    self, count_macs, count_parameters, report_from_predictions, run_ablation, AblationGrid,
};
use m2ost_core::synth::{synth_generate, GenConfig};
use m2ost_core::train::{fit, fit_missing_levels};
use m2ost_core::ParamStore;

use crate::checkpoint;
use crate::checks;
use crate::dataset_file;
use crate::error::{CmdError, CmdResult};
use crate::report;
use crate::runconfig::RunConfig;

fn banner(command: &str, config: &RunConfig) {
    println!(
        "m2ost {command} | p={} channels={} depth={} heads={} genes={} levels={} head={} | lr={} batch_size={} epochs={} seed={} threads={}",
        config.model.p,
        config.model.channels,
        config.model.depth,
        config.model.heads,
        config.model.genes,
        config
            .model
            .levels_enabled
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(","),
        config.model.head_mode.as_str(),
        config.train.lr,
        config.train.batch_size,
        config.train.epochs,
        config.train.seed,
        config.threads,
    );
}

fn write_text(path: &Path, text: &str) -> CmdResult<()> {
    fs::write(path, text).map_err(|e| CmdError::Io(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub struct SynthParams {
    pub out: PathBuf,
    pub gen: GenConfig,
    pub seed: u64,
}

pub fn cmd_synth(params: &SynthParams) -> CmdResult<()> {
    let dataset = synth_generate(&params.gen, params.seed)?;
    dataset_file::save(&dataset, &params.out)?;
    println!(
        "m2ost synth | slides={} spots={} genes={} image={}x{} noise={} seed={}",
        params.gen.slides,
        params.gen.spots_per_slide,
        params.gen.genes,
        params.gen.image_h,
        params.gen.image_w,
        params.gen.noise_sigma,
        params.seed,
    );
    let c = &dataset.meta.oracle_pcc_ceiling;
    println!(
        "oracle pcc ceilings: level0={:.4} level1={:.4} level2={:.4} all={:.4}",
        c[0], c[1], c[2], c[3]
    );
    println!("wrote {} samples to {}", dataset.samples.len(), params.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainParams {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Optional plain-text gene list (one name per line) restricting targets.
    pub gene_list: Option<PathBuf>,
    pub config: RunConfig,
}

/// One gene name per line; blank lines and `#` comments are skipped.
pub fn read_gene_list(path: &Path) -> CmdResult<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CmdError::Io(format!("cannot read gene list {}: {e}", path.display())))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(CmdError::Usage(format!("gene list {} is empty", path.display())));
    }
    Ok(names)
}

fn maybe_restrict(dataset: StDataset, gene_list: Option<&Path>) -> CmdResult<StDataset> {
    match gene_list {
        Some(path) => {
            let names = read_gene_list(path)?;
            Ok(dataset.restrict_to_genes(&names)?)
        }
        None => Ok(dataset),
    }
}

/// Reconcile the model configuration with the dataset geometry. Explicit
/// mismatches are usage errors; defaults follow the dataset.
fn adapt_to_dataset(model: &mut ModelConfig, dataset: &StDataset) -> CmdResult<()> {
    let k = dataset.gene_names.len();
    if model.genes != k && model.genes != ModelConfig::default().genes {
        return Err(CmdError::Usage(format!(
            "--genes {} does not match the dataset's {k} genes",
            model.genes
        )));
    }
    model.genes = k;
    let (h, w) = (dataset.meta.image_h, dataset.meta.image_w);
    let default = ModelConfig::default();
    if (model.image_h != h && model.image_h != default.image_h)
        || (model.image_w != w && model.image_w != default.image_w)
    {
        return Err(CmdError::Usage(format!(
            "--image size {}x{} does not match the dataset's {h}x{w}",
            model.image_h, model.image_w
        )));
    }
    model.image_h = h;
    model.image_w = w;
    if let Some(&max_level) = model.levels_enabled.last() {
        if max_level >= dataset.meta.level_count {
            return Err(CmdError::Usage(format!(
                "level {max_level} requested but the dataset has {} levels",
                dataset.meta.level_count
            )));
        }
    }
    model.validate().map_err(CmdError::from)
}

pub fn cmd_train(params: &TrainParams) -> CmdResult<()> {
    let dataset = maybe_restrict(dataset_file::load(&params.dataset)?, params.gene_list.as_deref())?;
    let mut config = params.config.clone();
    adapt_to_dataset(&mut config.model, &dataset)?;
    banner("train", &config);

    fs::create_dir_all(&params.out_dir)
        .map_err(|e| CmdError::Io(format!("cannot create {}: {e}", params.out_dir.display())))?;
    let seed = config.train.seed;
    let train_idx = dataset.split_indices(Split::Train, seed);
    let val_idx = dataset.split_indices(Split::Val, seed);
    println!(
        "split sizes: train={} val={} test={}",
        train_idx.len(),
        val_idx.len(),
        dataset.split_indices(Split::Test, seed).len()
    );

    let mut store = init_parameters(&config.model, seed)?;
    println!("parameters: {}", count_parameters(&store));
    let outcome = if config.train.missing_level_fraction > 0.0 {
        fit_missing_levels(&mut store, &dataset, &train_idx, &val_idx, &config.model, &config.train)?
    } else {
        fit(&mut store, &dataset, &train_idx, &val_idx, &config.model, &config.train)?
    };

    let ckpt_path = params.out_dir.join("model.m2o1");
    checkpoint::save(&outcome.best, &ckpt_path)?;
    write_text(
        &params.out_dir.join("model.m2o1.config"),
        &crate::runconfig::to_key_values(&config),
    )?;
    write_text(&params.out_dir.join("train_log.csv"), &report::training_log_csv(&outcome.log))?;
    println!(
        "steps={} best_val_pcc={:.6} checkpoint={}",
        outcome.steps_run,
        outcome.best_val_pcc,
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub enum Predictor {
    /// Load a checkpoint and run the model.
    Model { checkpoint: PathBuf },
    /// Predict the stored targets themselves (pipeline oracle).
    Perfect,
}

pub struct EvalParams {
    pub dataset: PathBuf,
    pub predictor: Predictor,
    pub out: PathBuf,
    pub per_gene_out: Option<PathBuf>,
    pub split: Split,
    pub gene_list: Option<PathBuf>,
    pub config: RunConfig,
    pub model_config_path: Option<PathBuf>,
}

/// Load checkpoint + sidecar config, verifying shape compatibility.
pub fn load_checkpoint_with_config(
    checkpoint_path: &Path,
    explicit_config: Option<&Path>,
) -> CmdResult<(ParamStore, RunConfig)> {
    let sidecar = explicit_config
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(format!("{}.config", checkpoint_path.display())));
    if !sidecar.exists() {
        return Err(CmdError::Compat(format!(
            "missing config sidecar {} for checkpoint {}",
            sidecar.display(),
            checkpoint_path.display()
        )));
    }
    let config = crate::runconfig::resolve(Some(&sidecar), &crate::runconfig::Overrides::default())?;
    let store = checkpoint::load(checkpoint_path, config.train.seed)?;
    let expected = init_parameters(&config.model, config.train.seed)?;
    checkpoint::check_compatible(&store, &expected)?;
    Ok((store, config))
}

/// Eval-mode predictions split across up to `threads` workers; the result
/// order (and therefore every downstream byte) is independent of the count.
pub fn parallel_predict(
    store: &ParamStore,
    model: &ModelConfig,
    dataset: &StDataset,
    indices: &[usize],
    presence: Option<&[Vec<bool>]>,
    threads: usize,
) -> CmdResult<Vec<Vec<f64>>> {
    let threads = threads.max(1).min(indices.len().max(1));
    if threads == 1 {
        return Ok(eval::predict_with_presence(store, model, dataset, indices, presence)?);
    }
    let chunk = indices.len().div_ceil(threads);
    let results: Vec<m2ost_core::Result<Vec<Vec<f64>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|piece| {
                scope.spawn(move || {
                    eval::predict_with_presence(store, model, dataset, piece, presence)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    // Chunks are in index order, so the assembled result does not depend on
    // the worker count.
    let mut out = Vec::with_capacity(indices.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn cmd_eval(params: &EvalParams) -> CmdResult<()> {
    let dataset = maybe_restrict(dataset_file::load(&params.dataset)?, params.gene_list.as_deref())?;
    let seed = params.config.train.seed;
    let indices = dataset.split_indices(params.split, seed);
    if indices.is_empty() {
        return Err(CmdError::Usage("selected split is empty".into()));
    }

    let report = match &params.predictor {
        Predictor::Perfect => {
            let predictions: Vec<Vec<f64>> =
                indices.iter().map(|&i| dataset.samples[i].target.values.clone()).collect();
            report_from_predictions(&dataset, &indices, &predictions, 0, 0, "perfect".into())?
        }
        Predictor::Model { checkpoint: ckpt } => {
            let (store, mut run) =
                load_checkpoint_with_config(ckpt, params.model_config_path.as_deref())?;
            adapt_to_dataset(&mut run.model, &dataset)
                .map_err(|e| CmdError::Compat(e.to_string()))?;
            let predictions = parallel_predict(
                &store,
                &run.model,
                &dataset,
                &indices,
                None,
                params.config.threads,
            )?;
            report_from_predictions(
                &dataset,
                &indices,
                &predictions,
                count_parameters(&store),
                count_macs(&run.model),
                run.model.fingerprint(),
            )?
        }
    };

    write_text(&params.out, &report::eval_report_csv(&report))?;
    if let Some(path) = &params.per_gene_out {
        write_text(path, &report::per_gene_csv(&report))?;
    }
    println!(
        "m2ost eval | spots={} mean_pcc={:.6} mean_rmse={:.6} params={} macs={} fingerprint={}",
        report.rows.len(),
        report.mean_pcc,
        report.mean_rmse,
        report.parameter_count,
        report.mac_count,
        report.config_fingerprint,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub struct AblateParams {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub grid: AblationGrid,
    pub config: RunConfig,
}

pub fn cmd_ablate(params: &AblateParams) -> CmdResult<()> {
    let dataset = dataset_file::load(&params.dataset)?;
    let mut config = params.config.clone();
    adapt_to_dataset(&mut config.model, &dataset)?;
    banner("ablate", &config);
    let rows = run_ablation(&dataset, &config.model, params.grid, &config.train)?;
    write_text(&params.out, &report::ablation_csv(&rows))?;
    for row in &rows {
        println!(
            "{:<24} pcc={:.6} rmse={:.6} params={} macs={}",
            row.label, row.val_pcc, row.val_rmse, row.parameter_count, row.mac_count
        );
    }
    println!("wrote {} rows to {}", rows.len(), params.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    Primitives,
    Blocks,
    Model,
    All,
}

pub fn cmd_gradcheck(scope: GradScope) -> CmdResult<()> {
    let mut outcomes = Vec::new();
    if matches!(scope, GradScope::Primitives | GradScope::All) {
        outcomes.extend(checks::check_primitives()?);
    }
    if matches!(scope, GradScope::Blocks | GradScope::All) {
        outcomes.extend(checks::check_blocks()?);
    }
    if matches!(scope, GradScope::Model | GradScope::All) {
        outcomes.extend(checks::check_full_model()?);
    }
    let mut failed = false;
    for c in &outcomes {
        if c.passed() {
            println!(
                "PASS {:<20} max_rel_err={:.3e} tolerance={:.0e} ({} scalars)",
                c.name, c.max_rel_err, c.tolerance, c.scalars,
            );
        } else {
            println!(
                "FAIL {:<20} max_rel_err={:.3e} tolerance={:.0e} ({} scalars, worst: {})",
                c.name, c.max_rel_err, c.tolerance, c.scalars, c.worst_param,
            );
            failed = true;
        }
    }
    if failed {
        return Err(CmdError::Numeric("gradient check exceeded tolerance".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

pub enum MapMode {
    Pca1,
    Gene(String),
}

pub struct ExportParams {
    pub dataset: PathBuf,
    pub predictor: Predictor,
    pub slide: Option<String>,
    pub mode: MapMode,
    pub out_prefix: PathBuf,
    pub config: RunConfig,
    pub model_config_path: Option<PathBuf>,
}

pub fn cmd_export(params: &ExportParams) -> CmdResult<()> {
    let dataset = dataset_file::load(&params.dataset)?;
    let slide = match &params.slide {
        Some(s) => s.clone(),
        None => dataset
            .samples
            .first()
            .map(|s| s.slide_id.clone())
            .ok_or_else(|| CmdError::Usage("dataset holds no samples".into()))?,
    };
    let indices: Vec<usize> = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.slide_id == slide)
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() {
        let mut slides: Vec<&str> =
            dataset.samples.iter().map(|s| s.slide_id.as_str()).collect();
        slides.sort_unstable();
        slides.dedup();
        return Err(CmdError::Usage(format!(
            "slide `{slide}` not found; available: {}",
            slides.join(", ")
        )));
    }

    let predictions = match &params.predictor {
        Predictor::Perfect => {
            indices.iter().map(|&i| dataset.samples[i].target.values.clone()).collect()
        }
        Predictor::Model { checkpoint: ckpt } => {
            let (store, mut run) =
                load_checkpoint_with_config(ckpt, params.model_config_path.as_deref())?;
            adapt_to_dataset(&mut run.model, &dataset)
                .map_err(|e| CmdError::Compat(e.to_string()))?;
            parallel_predict(&store, &run.model, &dataset, &indices, None, params.config.threads)?
        }
    };

    let values: Vec<f64> = match &params.mode {
        MapMode::Pca1 => {
            let genes = dataset.gene_names.len();
            let mut flat = Vec::with_capacity(indices.len() * genes);
            for p in &predictions {
                flat.extend_from_slice(p);
            }
            eval::pca1_scores(&flat, indices.len(), genes, 1e-9)?
        }
        MapMode::Gene(name) => {
            let g = dataset.gene_index(name)?;
            predictions.iter().map(|p| p[g]).collect()
        }
    };

    let spots: Vec<(usize, f64)> = indices.iter().copied().zip(values.iter().copied()).collect();
    let (w, h, pixels) = report::rasterize_spot_map(&dataset, &spots)?;
    let pgm_path = PathBuf::from(format!("{}.pgm", params.out_prefix.display()));
    let csv_path = PathBuf::from(format!("{}.csv", params.out_prefix.display()));
    report::write_pgm(&pgm_path, w, h, &pixels)?;
    let rows: Vec<(String, f64, f64, f64)> = indices
        .iter()
        .zip(&values)
        .map(|(&i, &v)| {
            let s = &dataset.samples[i];
            (s.spot_id.clone(), s.spot_center_um.1, s.spot_center_um.0, v)
        })
        .collect();
    write_text(&csv_path, &report::map_csv(&rows))?;
    println!(
        "m2ost export | slide={slide} spots={} mode={} -> {} + {}",
        indices.len(),
        match &params.mode {
            MapMode::Pca1 => "pca1".to_string(),
            MapMode::Gene(g) => format!("gene:{g}"),
        },
        pgm_path.display(),
        csv_path.display(),
    );
    Ok(())
}

/// Guard: missing-level training needs the averaging head.
pub fn require_average_head(config: &RunConfig) -> CmdResult<()> {
    if config.train.missing_level_fraction > 0.0
        && config.model.head_mode != HeadMode::PerLevelAverage
    {
        return Err(CmdError::Usage(
            "--missing-fraction > 0 requires --head-mode per-level-average".into(),
        ));
    }
    Ok(())
}
