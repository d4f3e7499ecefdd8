//! Regression metrics, compute accounting, evaluation reports, the ablation
//! harness and the map-export math.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{CrossMixMode, HeadMode, ModelConfig};
use crate::data::StDataset;
use crate::encoder::{m2ost_forward, ForwardOpts};
use crate::error::Error;
use crate::params::ParamStore;
use crate::tape::{Precision, Tape};
use crate::train::{fit, FitOutcome, TrainConfig};
use crate::Result;

/// Pearson correlation outcome. If either vector is constant the coefficient
/// is undefined; the sentinel 0 is returned with `defined = false` so callers
/// can exclude it from means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pcc {
    pub value: f64,
    pub defined: bool,
}

/// Pearson correlation, population form: `cov(g, ghat) / (std(g) * std(ghat))`.
pub fn pcc(g: &[f64], ghat: &[f64]) -> Result<Pcc> {
    if g.len() != ghat.len() {
        return Err(Error::Dimension(format!(
            "pcc: lengths {} and {} differ",
            g.len(),
            ghat.len()
        )));
    }
    if g.len() < 2 {
        return Err(Error::Contract(format!("pcc needs at least 2 entries, got {}", g.len())));
    }
    let n = g.len() as f64;
    let mean_g = g.iter().sum::<f64>() / n;
    let mean_h = ghat.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_g = 0.0;
    let mut var_h = 0.0;
    for (x, y) in g.iter().zip(ghat) {
        let dg = x - mean_g;
        let dh = y - mean_h;
        cov += dg * dh;
        var_g += dg * dg;
        var_h += dh * dh;
    }
    let denom = libm::sqrt(var_g) * libm::sqrt(var_h);
    if denom == 0.0 {
        return Ok(Pcc { value: 0.0, defined: false });
    }
    Ok(Pcc { value: (cov / denom).clamp(-1.0, 1.0), defined: true })
}

pub fn rmse(g: &[f64], ghat: &[f64]) -> Result<f64> {
    if g.len() != ghat.len() {
        return Err(Error::Dimension(format!(
            "rmse: lengths {} and {} differ",
            g.len(),
            ghat.len()
        )));
    }
    if g.is_empty() {
        return Err(Error::Input("rmse of empty vectors".into()));
    }
    let sum_sq: f64 = g.iter().zip(ghat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(libm::sqrt(sum_sq / g.len() as f64))
}

/// Exact number of scalars held by the store.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.scalar_count()
}

/// Multiply-accumulate count of one forward pass, from closed-form per-stage
/// formulas. Elementwise work (softmax, layer norm, GELU, residuals, pooling)
/// is excluded by convention; the figure is informative, not a gate.
///
/// With `T_l` the post-cls length of level `l`, `C` channels and `G` genes:
///   embedding (multi-granular): sum over rings r<=l of `L * 3(p/2^r)^2 * C`
///   embedding (plain):          `L * 3p^2 * C` per level
///   per-level block:   `12 T C^2 + 2 T^2 C`  (qkv 3TC^2, attention 2T^2C,
///                      out-projection TC^2, MLP 8TC^2)
///   unified block:     same formula at `T = sum T_l`
///   cross attention:   `4 T_l C^2` per level plus `2 T_i T_j C` per ordered pair
///   concat fusion:     `4 T C^2 + 2 T^2 C` at `T = sum T_l`
///   sum fusion:        0
///   channel mixing:    `2 (MC)(MC / ratio)` per repeat
///   head:              `M C G` either way (one MC x G map, or M maps of C x G)
pub fn count_macs(config: &ModelConfig) -> u64 {
    let c = config.channels as u64;
    let genes = config.genes as u64;
    let l = config.tokens_per_unit() as u64;
    let m = config.level_count() as u64;
    let lens: Vec<u64> = config
        .levels_enabled
        .iter()
        .map(|&lv| config.tokens_of_level(lv) as u64 + 1)
        .collect();
    let total_t: u64 = lens.iter().sum();

    let mut macs = 0u64;

    for &lv in &config.levels_enabled {
        if config.use_dpe {
            for r in 0..=lv {
                let q = (config.p >> r) as u64;
                macs += l * 3 * q * q * c;
            }
        } else {
            let p = config.p as u64;
            macs += l * 3 * p * p * c;
        }
    }

    let block = |t: u64| 12 * t * c * c + 2 * t * t * c;
    for _ in 0..config.depth {
        if config.decoupled_itmm {
            for &t in &lens {
                macs += block(t);
            }
        } else {
            macs += block(total_t);
        }
        match config.cross_mix {
            CrossMixMode::Ctmm => {
                if m >= 2 {
                    for &t in &lens {
                        macs += 4 * t * c * c;
                    }
                    for (i, &ti) in lens.iter().enumerate() {
                        for (j, &tj) in lens.iter().enumerate() {
                            if i != j {
                                macs += 2 * ti * tj * c;
                            }
                        }
                    }
                }
            }
            CrossMixMode::Concat => {
                if m >= 2 {
                    macs += 4 * total_t * c * c + 2 * total_t * total_t * c;
                }
            }
            CrossMixMode::Sum | CrossMixMode::None => {}
        }
        if config.use_ccmm {
            let mc = m * c;
            macs += 2 * mc * (mc / config.se_ratio as u64);
        }
    }

    macs += match config.head_mode {
        HeadMode::ConcatCls => m * c * genes,
        HeadMode::PerLevelAverage => m * c * genes,
    };
    macs
}

/// Per-spot evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotEval {
    pub spot_id: String,
    pub pcc: f64,
    pub pcc_defined: bool,
    pub rmse: f64,
}

/// Evaluation summary over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Sorted by spot id.
    pub rows: Vec<SpotEval>,
    /// Mean over spots with a defined coefficient.
    pub mean_pcc: f64,
    pub mean_rmse: f64,
    /// Per-gene correlation across spots (gene name, pcc), when computable.
    pub per_gene_pcc: Vec<(String, f64)>,
    pub parameter_count: usize,
    pub mac_count: u64,
    pub config_fingerprint: String,
}

/// Eval-mode predictions for the given sample indices, in index order.
pub fn predict(
    store: &ParamStore,
    config: &ModelConfig,
    dataset: &StDataset,
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    predict_with_presence(store, config, dataset, indices, None)
}

/// Like [`predict`], but overriding each sample's level presence (used by
/// missing-level training, where masking also applies at eval time).
pub fn predict_with_presence(
    store: &ParamStore,
    config: &ModelConfig,
    dataset: &StDataset,
    indices: &[usize],
    presence: Option<&[Vec<bool>]>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for &idx in indices {
        let sample = dataset
            .samples
            .get(idx)
            .ok_or_else(|| Error::Input(format!("sample index {idx} out of range")))?;
        let mut opts = ForwardOpts::eval();
        if let Some(masks) = presence {
            opts.present = masks[idx].clone();
        }
        let tape = Tape::new(Precision::F64);
        let pred = m2ost_forward(&tape, sample, store, config, &opts)?;
        out.push(pred.values());
    }
    Ok(out)
}

/// Assemble an [`EvalReport`] from externally supplied predictions.
pub fn report_from_predictions(
    dataset: &StDataset,
    indices: &[usize],
    predictions: &[Vec<f64>],
    parameter_count: usize,
    mac_count: u64,
    config_fingerprint: String,
) -> Result<EvalReport> {
    if indices.len() != predictions.len() {
        return Err(Error::Dimension(format!(
            "{} indices vs {} predictions",
            indices.len(),
            predictions.len()
        )));
    }
    if indices.is_empty() {
        return Err(Error::Input("evaluation over an empty split".into()));
    }
    let mut rows = Vec::with_capacity(indices.len());
    for (&idx, pred) in indices.iter().zip(predictions) {
        let sample = &dataset.samples[idx];
        let target = &sample.target.values;
        let p = pcc(target, pred)?;
        rows.push(SpotEval {
            spot_id: sample.spot_id.clone(),
            pcc: p.value,
            pcc_defined: p.defined,
            rmse: rmse(target, pred)?,
        });
    }
    rows.sort_by(|a, b| a.spot_id.cmp(&b.spot_id));
    let defined: Vec<&SpotEval> = rows.iter().filter(|r| r.pcc_defined).collect();
    let mean_pcc = if defined.is_empty() {
        0.0
    } else {
        defined.iter().map(|r| r.pcc).sum::<f64>() / defined.len() as f64
    };
    let mean_rmse = rows.iter().map(|r| r.rmse).sum::<f64>() / rows.len() as f64;

    // Secondary report: correlation per gene across spots.
    let mut per_gene_pcc = Vec::new();
    if indices.len() >= 2 {
        let k = dataset.gene_names.len();
        for g in 0..k {
            let truth: Vec<f64> =
                indices.iter().map(|&i| dataset.samples[i].target.values[g]).collect();
            let guess: Vec<f64> = predictions.iter().map(|p| p[g]).collect();
            let c = pcc(&truth, &guess)?;
            if c.defined {
                per_gene_pcc.push((dataset.gene_names[g].clone(), c.value));
            }
        }
    }

    Ok(EvalReport {
        rows,
        mean_pcc,
        mean_rmse,
        per_gene_pcc,
        parameter_count,
        mac_count,
        config_fingerprint,
    })
}

/// Evaluate a parameter store over the given sample indices.
pub fn evaluate(
    store: &ParamStore,
    config: &ModelConfig,
    dataset: &StDataset,
    indices: &[usize],
) -> Result<EvalReport> {
    let predictions = predict(store, config, dataset, indices)?;
    report_from_predictions(
        dataset,
        indices,
        &predictions,
        count_parameters(store),
        count_macs(config),
        config.fingerprint(),
    )
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

/// Which configurations the ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationGrid {
    /// Every non-empty subset of the enabled levels (7 rows for 3 levels).
    LevelSubsets,
    /// The five component configurations: full model, plain patch embedding,
    /// unified attention, concat fusion, bare concat.
    Components,
    /// Just the base configuration.
    Single,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub config: ModelConfig,
    pub val_pcc: f64,
    pub val_rmse: f64,
    pub parameter_count: usize,
    pub mac_count: u64,
}

fn level_subsets(levels: &[usize]) -> Vec<Vec<usize>> {
    let n = levels.len();
    let mut subsets = Vec::new();
    for bits in 1u32..(1 << n) {
        let subset: Vec<usize> =
            (0..n).filter(|i| bits & (1 << i) != 0).map(|i| levels[i]).collect();
        subsets.push(subset);
    }
    subsets.sort_by_key(|s| (s.len(), s.clone()));
    subsets
}

/// Enumerate the grid of configurations.
pub fn ablation_configs(base: &ModelConfig, grid: AblationGrid) -> Vec<(String, ModelConfig)> {
    match grid {
        AblationGrid::Single => vec![("base".into(), base.clone())],
        AblationGrid::LevelSubsets => level_subsets(&base.levels_enabled)
            .into_iter()
            .map(|subset| {
                let label = format!(
                    "levels:{}",
                    subset.iter().map(|l| format!("{l}")).collect::<Vec<_>>().join("+")
                );
                (label, ModelConfig { levels_enabled: subset, ..base.clone() })
            })
            .collect(),
        AblationGrid::Components => vec![
            ("dpe+itmm+ctmm+ccmm".into(), base.clone()),
            ("itmm+ctmm+ccmm".into(), ModelConfig { use_dpe: false, ..base.clone() }),
            (
                "ctmm+ccmm".into(),
                ModelConfig { use_dpe: false, decoupled_itmm: false, ..base.clone() },
            ),
            (
                "ccmm".into(),
                ModelConfig {
                    use_dpe: false,
                    decoupled_itmm: false,
                    cross_mix: CrossMixMode::Concat,
                    ..base.clone()
                },
            ),
            (
                "bare".into(),
                ModelConfig {
                    use_dpe: false,
                    decoupled_itmm: false,
                    cross_mix: CrossMixMode::Concat,
                    use_ccmm: false,
                    ..base.clone()
                },
            ),
        ],
    }
}

/// Train every configuration of the grid with the same seed and budget and
/// evaluate each on the validation split.
pub fn run_ablation(
    dataset: &StDataset,
    base: &ModelConfig,
    grid: AblationGrid,
    train_config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let train_idx = dataset.split_indices(crate::data::Split::Train, train_config.seed);
    let val_idx = dataset.split_indices(crate::data::Split::Val, train_config.seed);
    let mut rows = Vec::new();
    for (label, config) in ablation_configs(base, grid) {
        config.validate()?;
        let mut store = crate::encoder::init_parameters(&config, train_config.seed)?;
        let FitOutcome { best, .. } =
            fit(&mut store, dataset, &train_idx, &val_idx, &config, train_config)?;
        let report = evaluate(&best, &config, dataset, &val_idx)?;
        rows.push(AblationRow {
            label,
            parameter_count: report.parameter_count,
            mac_count: report.mac_count,
            val_pcc: report.mean_pcc,
            val_rmse: report.mean_rmse,
            config,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Map export math
// ---------------------------------------------------------------------------

/// First-principal-component scores of a spots x genes matrix via power
/// iteration on the covariance (deterministic start: the first centered
/// data row; tolerance on the direction change).
pub fn pca1_scores(data: &[f64], rows: usize, cols: usize, tol: f64) -> Result<Vec<f64>> {
    if data.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!(
            "pca1: {rows}x{cols} does not match {} values",
            data.len()
        )));
    }
    // Center columns.
    let mut centered = data.to_vec();
    for c in 0..cols {
        let mean = (0..rows).map(|r| data[r * cols + c]).sum::<f64>() / rows as f64;
        for r in 0..rows {
            centered[r * cols + c] -= mean;
        }
    }
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    let mut w: Vec<f64> = centered[..cols].to_vec();
    if norm(&w) < 1e-12 {
        w = vec![1.0; cols];
    }
    let n0 = norm(&w);
    w.iter_mut().for_each(|x| *x /= n0);

    for _ in 0..10_000 {
        // w <- normalize(X^T (X w))
        let mut scores = vec![0.0; rows];
        for r in 0..rows {
            scores[r] = (0..cols).map(|c| centered[r * cols + c] * w[c]).sum();
        }
        let mut next = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                next[c] += centered[r * cols + c] * scores[r];
            }
        }
        let n = norm(&next);
        if n == 0.0 {
            // Degenerate (all-zero) data: scores are zero.
            return Ok(vec![0.0; rows]);
        }
        next.iter_mut().for_each(|x| *x /= n);
        let delta_same: f64 = next.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum();
        let delta_flip: f64 = next.iter().zip(&w).map(|(a, b)| (a + b) * (a + b)).sum();
        let converged = delta_same.min(delta_flip) < tol * tol;
        w = next;
        if converged {
            break;
        }
    }
    let mut scores = vec![0.0; rows];
    for r in 0..rows {
        scores[r] = (0..cols).map(|c| centered[r * cols + c] * w[c]).sum();
    }
    Ok(scores)
}
