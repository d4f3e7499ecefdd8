//! Spot expressions, multi-scale samples, datasets and preprocessing.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::rng::split_of_slide;
use crate::Result;

/// Channel-planar 8-bit RGB raster (`3 x h x w`, plane order R, G, B).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePatch {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl ImagePatch {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(Error::Dimension(format!(
                "image patch {h}x{w} wants {} bytes, got {}",
                3 * h * w,
                data.len()
            )));
        }
        Ok(ImagePatch { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: u8) -> Self {
        ImagePatch { h, w, data: vec![value; 3 * h * w] }
    }

    pub fn black(h: usize, w: usize) -> Self {
        Self::filled(h, w, 0)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// Pixel scaled to [0, 1].
    #[inline]
    pub fn unit(&self, c: usize, y: usize, x: usize) -> f64 {
        f64::from(self.at(c, y, x)) / 255.0
    }
}

/// Log-normalized expression vector of one spot.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotExpression {
    pub values: Vec<f64>,
    /// Gene-name index shared across the dataset.
    pub gene_names: Arc<Vec<String>>,
    pub raw_counts: Option<Vec<u32>>,
}

impl SpotExpression {
    pub fn new(values: Vec<f64>, gene_names: Arc<Vec<String>>) -> Result<Self> {
        if values.len() != gene_names.len() {
            return Err(Error::Dimension(format!(
                "{} expression values vs {} gene names",
                values.len(),
                gene_names.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "spot_expression" });
        }
        Ok(SpotExpression { values, gene_names, raw_counts: None })
    }

    pub fn gene_count(&self) -> usize {
        self.values.len()
    }
}

/// The co-centered image triple (or pair, ...) plus its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleSample {
    /// One patch per configured pyramid level, finest first.
    pub images: Vec<ImagePatch>,
    /// Missing-level flags; `false` means the level behaves as all-black and
    /// its stream is excluded from prediction averaging and detached in
    /// back-propagation.
    pub level_present: Vec<bool>,
    pub target: SpotExpression,
    pub spot_id: String,
    pub slide_id: String,
    /// Spot center in micrometers (row, col).
    pub spot_center_um: (f64, f64),
}

impl MultiScaleSample {
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::Input(format!("sample {}: no images", self.spot_id)));
        }
        let (h, w) = (self.images[0].h, self.images[0].w);
        if self.images.iter().any(|im| im.h != h || im.w != w) {
            return Err(Error::Dimension(format!(
                "sample {}: level images disagree on size",
                self.spot_id
            )));
        }
        if self.level_present.len() != self.images.len() {
            return Err(Error::Dimension(format!(
                "sample {}: {} presence flags for {} images",
                self.spot_id,
                self.level_present.len(),
                self.images.len()
            )));
        }
        Ok(())
    }
}

/// Train/val/test membership, assigned per slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Dataset-level constants and the synthetic oracle metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub spot_diameter_um: f64,
    pub spacing_um: f64,
    pub level_count: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub seed: u64,
    /// Best least-squares mean spot correlation reachable from the features
    /// visible at each level subset: [level0, level1, level2, all]. Empty
    /// for ingested (non-synthetic) data.
    pub oracle_pcc_ceiling: Vec<f64>,
}

/// A loaded spatial-transcriptomics dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct StDataset {
    pub samples: Vec<MultiScaleSample>,
    pub gene_names: Arc<Vec<String>>,
    pub meta: DatasetMeta,
}

impl StDataset {
    /// Split fractions: 60% of slides train, 10% val, 30% test.
    pub const TRAIN_FRACTION: f64 = 0.6;
    pub const VAL_FRACTION: f64 = 0.1;

    pub fn split_of(&self, sample: &MultiScaleSample, seed: u64) -> Split {
        split_of_slide(seed, &sample.slide_id, Self::TRAIN_FRACTION, Self::VAL_FRACTION)
    }

    /// Sample indices of one split, in dataset order.
    pub fn split_indices(&self, split: Split, seed: u64) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| self.split_of(s, seed) == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn gene_index(&self, name: &str) -> Result<usize> {
        self.gene_names.iter().position(|g| g == name).ok_or_else(|| {
            let mut available: Vec<&str> = self.gene_names.iter().map(String::as_str).collect();
            available.sort_unstable();
            Error::Input(format!(
                "unknown gene `{name}`; available: {}",
                available.join(", ")
            ))
        })
    }

    /// Restrict every target to the named genes, in the given order.
    pub fn restrict_to_genes(&self, names: &[String]) -> Result<StDataset> {
        if names.is_empty() {
            return Err(Error::Input("gene list is empty".into()));
        }
        let indices: Vec<usize> =
            names.iter().map(|n| self.gene_index(n)).collect::<Result<_>>()?;
        let gene_names = Arc::new(names.to_vec());
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let values = indices.iter().map(|&i| s.target.values[i]).collect();
                let mut target = SpotExpression::new(values, Arc::clone(&gene_names))?;
                target.raw_counts = s
                    .target
                    .raw_counts
                    .as_ref()
                    .map(|c| indices.iter().map(|&i| c[i]).collect());
                Ok(MultiScaleSample { target, ..s.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StDataset { samples, gene_names, meta: self.meta.clone() })
    }
}

/// Log-normalize raw counts: `ln(1 + 1e6 * c_i / sum(c))`.
///
/// A spot with zero total count is degenerate and maps to all zeros; callers
/// that care should warn (`is_degenerate_counts`).
pub fn normalize_expression(counts: &[f64]) -> Result<Vec<f64>> {
    if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::Input("counts must be finite and non-negative".into()));
    }
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return Ok(vec![0.0; counts.len()]);
    }
    Ok(counts.iter().map(|&c| libm::log(1.0 + 1.0e6 * c / total)).collect())
}

pub fn is_degenerate_counts(counts: &[f64]) -> bool {
    counts.iter().sum::<f64>() == 0.0
}

/// Rank genes by the variance of their log-normalized expression across
/// spots and keep the top `k`. Ties break on lexicographic gene name.
///
/// `counts` is row-major spots x genes.
pub fn select_variable_genes(
    counts: &[f64],
    spots: usize,
    genes: usize,
    gene_names: &[String],
    k: usize,
) -> Result<Vec<usize>> {
    if counts.len() != spots * genes {
        return Err(Error::Dimension(format!(
            "count matrix {}x{} wants {} entries, got {}",
            spots,
            genes,
            spots * genes,
            counts.len()
        )));
    }
    if gene_names.len() != genes {
        return Err(Error::Dimension(format!(
            "{} gene names for {} genes",
            gene_names.len(),
            genes
        )));
    }
    if k > genes {
        return Err(Error::Input(format!("cannot select {k} genes out of {genes}")));
    }
    if spots == 0 {
        return Err(Error::Input("gene selection needs at least one spot".into()));
    }
    // Normalize per spot, then accumulate per-gene mean and mean square.
    let mut sum = vec![0.0; genes];
    let mut sumsq = vec![0.0; genes];
    for s in 0..spots {
        let normalized = normalize_expression(&counts[s * genes..(s + 1) * genes])?;
        for (g, v) in normalized.iter().enumerate() {
            sum[g] += v;
            sumsq[g] += v * v;
        }
    }
    let n = spots as f64;
    let mut order: Vec<usize> = (0..genes).collect();
    let variance: Vec<f64> = (0..genes)
        .map(|g| (sumsq[g] / n - (sum[g] / n) * (sum[g] / n)).max(0.0))
        .collect();
    order.sort_by(|&a, &b| {
        variance[b]
            .partial_cmp(&variance[a])
            .unwrap()
            .then_with(|| gene_names[a].cmp(&gene_names[b]))
    });
    order.truncate(k);
    Ok(order)
}

/// Crop the co-centered patch stack out of an image pyramid.
///
/// Level `l` of the pyramid halves the resolution of level `l-1`; the level-l
/// crop is `h x w` pixels around `spot_center_px / 2^l`, so it covers `2^l`
/// times the physical side. Out-of-bounds pixels are filled with white
/// (slide background).
pub fn extract_pyramid_patches(
    pyramid: &[ImagePatch],
    spot_center_px: (f64, f64),
    h: usize,
    w: usize,
) -> Result<Vec<ImagePatch>> {
    if pyramid.is_empty() {
        return Err(Error::Input("empty pyramid".into()));
    }
    let (cy, cx) = spot_center_px;
    let level0 = &pyramid[0];
    if cy < 0.0 || cx < 0.0 || cy >= level0.h as f64 || cx >= level0.w as f64 {
        return Err(Error::Input(format!(
            "spot center ({cy}, {cx}) outside level-0 image {}x{}",
            level0.h, level0.w
        )));
    }
    let mut out = Vec::with_capacity(pyramid.len());
    for (level, img) in pyramid.iter().enumerate() {
        let scale = (1usize << level) as f64;
        let lcy = cy / scale;
        let lcx = cx / scale;
        let top = libm::floor(lcy) as i64 - (h as i64) / 2;
        let left = libm::floor(lcx) as i64 - (w as i64) / 2;
        let mut patch = ImagePatch::filled(h, w, 255);
        for c in 0..3 {
            for y in 0..h {
                let sy = top + y as i64;
                if sy < 0 || sy >= img.h as i64 {
                    continue;
                }
                for x in 0..w {
                    let sx = left + x as i64;
                    if sx < 0 || sx >= img.w as i64 {
                        continue;
                    }
                    patch.set(c, y, x, img.at(c, sy as usize, sx as usize));
                }
            }
        }
        out.push(patch);
    }
    Ok(out)
}
