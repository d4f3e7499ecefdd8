//! Multi-granular patch embedding and the cls/position stage.
//!
//! Every level is tokenized at the base patch size `p` over the whole image
//! (`L = HW/p^2` tokens, shared projection). Level 1 additionally tiles the
//! central half-size region at `p/2` (another `L` tokens), level 2 on top of
//! that tiles the central quarter-size region at `p/4`, so sequence lengths
//! come out as `L`, `2L`, `3L`. Within a sequence the order is base tokens
//! row-major, then each finer ring row-major; positional embeddings are
//! learnable, so the order only has to stay frozen for checkpoints.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::data::{ImagePatch, MultiScaleSample};
use crate::error::Error;
use crate::params::ParamStore;
use crate::tape::{DiffArray, Tape};
use crate::Result;

/// The embedded sequences, one per enabled pyramid level.
pub struct TokenSequenceSet {
    pub sequences: Vec<DiffArray>,
    /// Pyramid level of each sequence, aligned with `sequences`.
    pub levels: Vec<usize>,
    pub tokens_per_unit: usize,
    pub channels: usize,
}

impl TokenSequenceSet {
    pub fn level_count(&self) -> usize {
        self.sequences.len()
    }
}

/// Name of the weight-shared embedder for patch size `q`.
pub fn shared_embedder_name(q: usize) -> String {
    format!("shared.dpe.p{q}.weight")
}

/// Scale a patch to [0, 1] and standardize with mean 0.5, std 0.5.
/// Absent levels are all-black images (zero pixels) by definition.
fn standardized_planes(img: &ImagePatch, present: bool) -> Vec<f64> {
    if !present {
        return vec![-1.0; 3 * img.h * img.w];
    }
    img.data.iter().map(|&b| (f64::from(b) / 255.0 - 0.5) / 0.5).collect()
}

/// Cut `region` of the standardized planes into non-overlapping `q x q`
/// patches, row-major; each row of the output is one flattened patch in
/// channel-major order.
fn patch_rows(
    planes: &[f64],
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    region_h: usize,
    region_w: usize,
    q: usize,
) -> Vec<f64> {
    let py = region_h / q;
    let px = region_w / q;
    let dim = 3 * q * q;
    let mut out = vec![0.0; py * px * dim];
    for ty in 0..py {
        for tx in 0..px {
            let row = ty * px + tx;
            let base = row * dim;
            let mut k = 0;
            for c in 0..3 {
                for y in 0..q {
                    let sy = top + ty * q + y;
                    for x in 0..q {
                        let sx = left + tx * q + x;
                        out[base + k] = planes[(c * h + sy) * w + sx];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

fn project(
    tape: &Tape,
    store: &ParamStore,
    rows: Vec<f64>,
    token_dim: usize,
    prefix: &str,
) -> Result<DiffArray> {
    let n_tokens = rows.len() / token_dim;
    let tokens = tape.constant(rows, &[n_tokens, token_dim])?;
    let weight = tape.param(store, &format!("{prefix}.weight"))?;
    let bias = tape.param(store, &format!("{prefix}.bias"))?;
    tokens.matmul(&weight)?.add_bias(&bias)
}

/// Tokenize and embed every enabled level of `sample` (pre-cls).
pub fn dpe_embed(
    tape: &Tape,
    sample: &MultiScaleSample,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<TokenSequenceSet> {
    config.validate()?;
    sample.validate()?;
    let (h, w, p) = (config.image_h, config.image_w, config.p);
    if sample.images[0].h != h || sample.images[0].w != w {
        return Err(Error::Config(format!(
            "sample {} is {}x{}, model expects {}x{}",
            sample.spot_id, sample.images[0].h, sample.images[0].w, h, w
        )));
    }
    let mut sequences = Vec::new();
    for &level in &config.levels_enabled {
        let img = sample.images.get(level).ok_or_else(|| {
            Error::Input(format!(
                "sample {} has {} levels, level {level} requested",
                sample.spot_id,
                sample.images.len()
            ))
        })?;
        let present = sample.level_present.get(level).copied().unwrap_or(true);
        let planes = standardized_planes(img, present);
        let mut rings = Vec::new();
        if config.use_dpe {
            // Ring r tiles the central region of side H/2^r at patch size p/2^r.
            for r in 0..=level {
                let q = p >> r;
                let (rh, rw) = (h >> r, w >> r);
                let (top, left) = ((h - rh) / 2, (w - rw) / 2);
                let rows = patch_rows(&planes, h, w, top, left, rh, rw, q);
                rings.push(project(tape, store, rows, 3 * q * q, &format!("shared.dpe.p{q}"))?);
            }
        } else {
            // Plain patch embedding: one unshared projection per level.
            let rows = patch_rows(&planes, h, w, 0, 0, h, w, p);
            rings.push(project(tape, store, rows, 3 * p * p, &format!("level{level}.embed"))?);
        }
        let seq = if rings.len() == 1 {
            rings.pop().unwrap()
        } else {
            let refs: Vec<&DiffArray> = rings.iter().collect();
            tape.concat(&refs, 0)?
        };
        sequences.push(seq);
    }
    Ok(TokenSequenceSet {
        sequences,
        levels: config.levels_enabled.clone(),
        tokens_per_unit: config.tokens_per_unit(),
        channels: config.channels,
    })
}

/// Prepend the per-level cls token and add the per-level positional table.
pub fn add_cls_and_positions(
    tape: &Tape,
    tokens: TokenSequenceSet,
    store: &ParamStore,
) -> Result<TokenSequenceSet> {
    let mut sequences = Vec::new();
    for (seq, &level) in tokens.sequences.iter().zip(&tokens.levels) {
        let cls = tape.param(store, &format!("level{level}.cls"))?;
        let with_cls = tape.concat(&[&cls, seq], 0)?;
        let pos = tape.param(store, &format!("level{level}.pos"))?;
        if pos.shape() != with_cls.shape() {
            return Err(Error::Config(format!(
                "level {level}: positional table {:?} does not match sequence {:?}",
                pos.shape(),
                with_cls.shape()
            )));
        }
        sequences.push(with_cls.add(&pos)?);
    }
    Ok(TokenSequenceSet { sequences, ..tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SpotExpression;
    use crate::encoder::init_parameters;
    use crate::tape::Precision;
    use alloc::string::ToString;
    use alloc::sync::Arc;

    fn sample_with(h: usize, images: Vec<ImagePatch>) -> MultiScaleSample {
        let genes = Arc::new(vec!["G0".to_string()]);
        let n = images.len();
        let _ = h;
        MultiScaleSample {
            images,
            level_present: vec![true; n],
            target: SpotExpression::new(vec![0.0], genes).unwrap(),
            spot_id: "s0".into(),
            slide_id: "slide0".into(),
            spot_center_um: (0.0, 0.0),
        }
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig { genes: 1, ..ModelConfig::tiny() }
    }

    fn random_sample(seed: u64, h: usize, levels: usize) -> MultiScaleSample {
        let mut s = crate::rng::CounterRng::new(seed).stream(1);
        let images = (0..levels)
            .map(|_| {
                let data = (0..3 * h * h).map(|_| (s.uniform() * 255.0) as u8).collect();
                ImagePatch::new(h, h, data).unwrap()
            })
            .collect();
        sample_with(h, images)
    }

    #[test]
    fn sequence_lengths_for_default_geometry() {
        // H = W = 224, p = 16: L = 196, then 392 and 588 for higher levels.
        let config = ModelConfig { genes: 1, channels: 8, depth: 1, heads: 1, ..ModelConfig::default() };
        let store = init_parameters(&config, 7).unwrap();
        let tape = Tape::new(Precision::F64);
        let sample = random_sample(3, 224, 3);
        let set = dpe_embed(&tape, &sample, &store, &config).unwrap();
        let lens: Vec<usize> = set.sequences.iter().map(|s| s.shape()[0]).collect();
        assert_eq!(lens, vec![196, 392, 588]);
    }

    #[test]
    fn sequence_lengths_hold_for_any_valid_geometry() {
        // Lengths are exactly (level+1) * L + 1 after cls, including
        // non-square images.
        for (h, w, p) in [(64usize, 64usize, 8usize), (48, 32, 16), (32, 64, 16)] {
            let config = ModelConfig {
                image_h: h,
                image_w: w,
                p,
                channels: 8,
                depth: 1,
                heads: 1,
                genes: 1,
                ..ModelConfig::default()
            };
            config.validate().unwrap();
            let store = init_parameters(&config, 7).unwrap();
            let tape = Tape::new(Precision::F64);
            let mut s = crate::rng::CounterRng::new(1).stream(0);
            let images = (0..3)
                .map(|_| {
                    let data = (0..3 * h * w).map(|_| (s.uniform() * 255.0) as u8).collect();
                    ImagePatch::new(h, w, data).unwrap()
                })
                .collect();
            let sample = sample_with(h, images);
            let set = dpe_embed(&tape, &sample, &store, &config).unwrap();
            let set = add_cls_and_positions(&tape, set, &store).unwrap();
            let l = h * w / (p * p);
            for (seq, &level) in set.sequences.iter().zip(&set.levels) {
                assert_eq!(
                    seq.shape(),
                    vec![(level + 1) * l + 1, 8],
                    "geometry ({h},{w},{p}) level {level}"
                );
            }
        }
    }

    #[test]
    fn sequence_lengths_for_tiny_geometry() {
        let config = tiny_config();
        let store = init_parameters(&config, 7).unwrap();
        let tape = Tape::new(Precision::F64);
        let sample = random_sample(3, 32, 3);
        let set = dpe_embed(&tape, &sample, &store, &config).unwrap();
        let lens: Vec<usize> = set.sequences.iter().map(|s| s.shape()[0]).collect();
        assert_eq!(lens, vec![4, 8, 12]);
    }

    #[test]
    fn black_images_and_zero_bias_embed_to_constant_rows() {
        // All-black standardizes to -1 everywhere, so every token row equals
        // the same projection of a constant patch; with a zeroed weight the
        // tokens are exactly the bias (zero).
        let config = tiny_config();
        let mut store = init_parameters(&config, 7).unwrap();
        for q in [16usize, 8, 4] {
            let w = store.get_mut(&format!("shared.dpe.p{q}.weight")).unwrap();
            for v in w.values.iter_mut() {
                *v = 0.0;
            }
        }
        let tape = Tape::new(Precision::F64);
        let mut sample = random_sample(3, 32, 3);
        for img in sample.images.iter_mut() {
            *img = ImagePatch::black(32, 32);
        }
        let set = dpe_embed(&tape, &sample, &store, &config).unwrap();
        for seq in &set.sequences {
            assert!(seq.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cls_prepending_adds_one_row_and_positions_add_elementwise() {
        let config = tiny_config();
        let mut store = init_parameters(&config, 7).unwrap();
        // Zero the embedders and cls so the output equals the positional table.
        for name in ["shared.dpe.p16", "shared.dpe.p8", "shared.dpe.p4"] {
            for suffix in ["weight", "bias"] {
                let p = store.get_mut(&format!("{name}.{suffix}")).unwrap();
                p.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for level in 0..3 {
            let p = store.get_mut(&format!("level{level}.cls")).unwrap();
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new(Precision::F64);
        let mut sample = random_sample(3, 32, 3);
        for img in sample.images.iter_mut() {
            *img = ImagePatch::black(32, 32);
        }
        // Make the black image produce zero tokens: weight is zero already,
        // bias too (bias initializes to zero).
        let pre = dpe_embed(&tape, &sample, &store, &config).unwrap();
        let pre_lens: Vec<usize> = pre.sequences.iter().map(|s| s.shape()[0]).collect();
        let post = add_cls_and_positions(&tape, pre, &store).unwrap();
        for ((seq, &level), pre_len) in post.sequences.iter().zip(&post.levels).zip(pre_lens) {
            assert_eq!(seq.shape()[0], pre_len + 1);
            let table = store.get(&format!("level{level}.pos")).unwrap();
            assert_eq!(seq.values(), table.values);
        }
    }

    #[test]
    fn positional_parameters_are_per_level() {
        let config = tiny_config();
        let store = init_parameters(&config, 7).unwrap();
        let pos_names: Vec<&String> =
            store.names().filter(|n| n.ends_with(".pos") || n.ends_with(".cls")).collect();
        for name in &pos_names {
            assert!(name.starts_with("level"), "{name} is not level-scoped");
        }
        assert_eq!(pos_names.len(), 6);
    }

    #[test]
    fn embedder_sharing_follows_patch_size() {
        let config = tiny_config();
        let store = init_parameters(&config, 7).unwrap();
        let sample = random_sample(5, 32, 3);
        let base = |st: &ParamStore| {
            let tape = Tape::new(Precision::F64);
            let set = dpe_embed(&tape, &sample, st, &config).unwrap();
            set.sequences.iter().map(|s| s.values()).collect::<Vec<_>>()
        };
        let reference = base(&store);

        let perturb = |name: &str| {
            let mut st = store.clone();
            st.get_mut(name).unwrap().values[0] += 0.5;
            base(&st)
        };

        // p embedder feeds the base tokens of all three sequences.
        let p16 = perturb("shared.dpe.p16.weight");
        for level in 0..3 {
            assert_ne!(reference[level], p16[level], "p16 must affect level {level}");
        }
        // p/2 embedder feeds levels 1 and 2 only.
        let p8 = perturb("shared.dpe.p8.weight");
        assert_eq!(reference[0], p8[0]);
        assert_ne!(reference[1], p8[1]);
        assert_ne!(reference[2], p8[2]);
        // p/4 embedder feeds level 2 only.
        let p4 = perturb("shared.dpe.p4.weight");
        assert_eq!(reference[0], p4[0]);
        assert_eq!(reference[1], p4[1]);
        assert_ne!(reference[2], p4[2]);
    }

    #[test]
    fn pixels_outside_central_region_do_not_touch_fine_tokens() {
        let config = tiny_config();
        let store = init_parameters(&config, 7).unwrap();
        let sample = random_sample(5, 32, 3);
        let mut edited = sample.clone();
        // Corner pixel of level 1 lies outside the central 16x16 region.
        let v = edited.images[1].at(0, 0, 0);
        edited.images[1].set(0, 0, 0, v.wrapping_add(40));

        let embed = |s: &MultiScaleSample| {
            let tape = Tape::new(Precision::F64);
            let set = dpe_embed(&tape, s, &store, &config).unwrap();
            set.sequences[1].values()
        };
        let a = embed(&sample);
        let b = embed(&edited);
        let l = config.tokens_per_unit();
        let c = config.channels;
        // Base tokens (first L rows) may change; the fine ring must not.
        assert_eq!(a[l * c..], b[l * c..]);
        assert_ne!(a[..l * c], b[..l * c]);
    }
}
