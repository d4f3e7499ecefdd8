//! The multi-scale encoder stack and regression heads.
//!
//! One encoder repeat applies, in order: a per-level pre-norm transformer
//! block (self-attention with optional random attention masking, then an
//! MLP), cross-level token mixing (pairwise attention between sequences of
//! different lengths, mixed by learnable scalars), and cross-level channel
//! mixing (squeeze-and-excitation gates computed from all pooled sequences).
//! Every stage maps each sequence to its own shape, which is asserted per
//! stage and repeat.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{CrossMixMode, HeadMode, ModelConfig};
use crate::data::MultiScaleSample;
use crate::embedding::{add_cls_and_positions, dpe_embed, TokenSequenceSet};
use crate::error::Error;
use crate::params::ParamStore;
use crate::rng::{stream_from_parts, CounterRng};
use crate::tape::{DiffArray, Tape};
use crate::Result;

/// Forward-pass mode: evaluation is deterministic; training draws attention
/// masks from the given counter seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Eval,
    Train { mask_seed: u64 },
}

/// Per-call forward options.
#[derive(Debug, Clone)]
pub struct ForwardOpts {
    pub mode: RunMode,
    /// Streams whose cross-level contributions are detached and whose head
    /// outputs are dropped (missing-level training); aligned with the
    /// enabled levels. Empty means all present.
    pub present: Vec<bool>,
    /// Detach exactly one stream's head contribution while keeping it in the
    /// average (used to verify cross-level gradient decoupling).
    pub detach_head_of: Option<usize>,
}

impl ForwardOpts {
    pub fn eval() -> Self {
        ForwardOpts { mode: RunMode::Eval, present: Vec::new(), detach_head_of: None }
    }

    pub fn train(mask_seed: u64) -> Self {
        ForwardOpts { mode: RunMode::Train { mask_seed }, present: Vec::new(), detach_head_of: None }
    }
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

fn init_linear(store: &mut ParamStore, rng: &CounterRng, prefix: &str, rows: usize, cols: usize) -> Result<()> {
    let wname = format!("{prefix}.weight");
    let mut s = rng.named_stream(&wname);
    let w: Vec<f64> = (0..rows * cols).map(|_| s.truncated_normal(0.02)).collect();
    store.insert(&wname, vec![rows, cols], w)?;
    store.insert(&format!("{prefix}.bias"), vec![cols], vec![0.0; cols])
}

fn init_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), vec![c], vec![1.0; c])?;
    store.insert(&format!("{prefix}.beta"), vec![c], vec![0.0; c])
}

fn init_table(store: &mut ParamStore, rng: &CounterRng, name: &str, rows: usize, cols: usize) -> Result<()> {
    let mut s = rng.named_stream(name);
    let v: Vec<f64> = (0..rows * cols).map(|_| s.normal() * 0.02).collect();
    store.insert(name, vec![rows, cols], v)
}

// The key projection carries no bias: a shared shift of every key moves all
// scores of an attention row by the same amount, which the softmax removes,
// so such a bias could never receive gradient.
fn init_weight_only(store: &mut ParamStore, rng: &CounterRng, prefix: &str, rows: usize, cols: usize) -> Result<()> {
    let wname = format!("{prefix}.weight");
    let mut s = rng.named_stream(&wname);
    let w: Vec<f64> = (0..rows * cols).map(|_| s.truncated_normal(0.02)).collect();
    store.insert(&wname, vec![rows, cols], w)
}

fn init_block(store: &mut ParamStore, rng: &CounterRng, prefix: &str, c: usize) -> Result<()> {
    init_norm(store, &format!("{prefix}.norm1"), c)?;
    init_linear(store, rng, &format!("{prefix}.q"), c, c)?;
    init_weight_only(store, rng, &format!("{prefix}.k"), c, c)?;
    init_linear(store, rng, &format!("{prefix}.v"), c, c)?;
    init_linear(store, rng, &format!("{prefix}.proj"), c, c)?;
    init_norm(store, &format!("{prefix}.norm2"), c)?;
    init_linear(store, rng, &format!("{prefix}.mlp.fc1"), c, 4 * c)?;
    init_linear(store, rng, &format!("{prefix}.mlp.fc2"), 4 * c, c)
}

/// Build every parameter the configuration needs; deterministic in `seed`
/// and independent of insertion order (each tensor draws from its own
/// name-keyed stream).
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new(seed);
    let rng = CounterRng::new(seed);
    let c = config.channels;
    let m = config.level_count();

    if config.use_dpe {
        let max_level = *config.levels_enabled.last().unwrap();
        for r in 0..=max_level {
            let q = config.p >> r;
            init_linear(&mut store, &rng, &format!("shared.dpe.p{q}"), 3 * q * q, c)?;
        }
    } else {
        for &level in &config.levels_enabled {
            init_linear(&mut store, &rng, &format!("level{level}.embed"), 3 * config.p * config.p, c)?;
        }
    }

    for &level in &config.levels_enabled {
        init_table(&mut store, &rng, &format!("level{level}.cls"), 1, c)?;
        init_table(&mut store, &rng, &format!("level{level}.pos"), config.tokens_of_level(level) + 1, c)?;
        init_norm(&mut store, &format!("level{level}.final_norm"), c)?;
    }

    for rep in 0..config.depth {
        if config.decoupled_itmm {
            for &level in &config.levels_enabled {
                init_block(&mut store, &rng, &format!("level{level}.enc{rep}.itmm"), c)?;
            }
        } else {
            init_block(&mut store, &rng, &format!("shared.enc{rep}.itmm"), c)?;
        }
        match config.cross_mix {
            CrossMixMode::Ctmm => {
                if m >= 2 {
                    for &level in &config.levels_enabled {
                        let prefix = format!("level{level}.enc{rep}.ctmm");
                        init_linear(&mut store, &rng, &format!("{prefix}.q"), c, c)?;
                        init_weight_only(&mut store, &rng, &format!("{prefix}.k"), c, c)?;
                        init_linear(&mut store, &rng, &format!("{prefix}.v"), c, c)?;
                        init_linear(&mut store, &rng, &format!("{prefix}.proj"), c, c)?;
                        for &other in &config.levels_enabled {
                            if other != level {
                                store.insert(
                                    &format!("{prefix}.omega{other}"),
                                    vec![1],
                                    vec![1.0 / (m - 1) as f64],
                                )?;
                            }
                        }
                    }
                }
            }
            CrossMixMode::Concat => {
                if m >= 2 {
                    let prefix = format!("shared.enc{rep}.fuse");
                    init_linear(&mut store, &rng, &format!("{prefix}.q"), c, c)?;
                    init_weight_only(&mut store, &rng, &format!("{prefix}.k"), c, c)?;
                    init_linear(&mut store, &rng, &format!("{prefix}.v"), c, c)?;
                    init_linear(&mut store, &rng, &format!("{prefix}.proj"), c, c)?;
                }
            }
            CrossMixMode::Sum | CrossMixMode::None => {}
        }
        if config.use_ccmm {
            let mc = m * c;
            init_linear(&mut store, &rng, &format!("shared.enc{rep}.ccmm.squeeze"), mc, mc / config.se_ratio)?;
            init_linear(&mut store, &rng, &format!("shared.enc{rep}.ccmm.excite"), mc / config.se_ratio, mc)?;
        }
    }

    match config.head_mode {
        HeadMode::ConcatCls => init_linear(&mut store, &rng, "shared.head", m * c, config.genes)?,
        HeadMode::PerLevelAverage => {
            for &level in &config.levels_enabled {
                init_linear(&mut store, &rng, &format!("level{level}.head"), c, config.genes)?;
            }
        }
    }

    Ok(store)
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

fn linear(tape: &Tape, store: &ParamStore, x: &DiffArray, prefix: &str) -> Result<DiffArray> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    x.matmul(&w)?.add_bias(&b)
}

fn linear_no_bias(tape: &Tape, store: &ParamStore, x: &DiffArray, prefix: &str) -> Result<DiffArray> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    x.matmul(&w)
}

fn norm(tape: &Tape, store: &ParamStore, x: &DiffArray, prefix: &str) -> Result<DiffArray> {
    let gamma = tape.param(store, &format!("{prefix}.gamma"))?;
    let beta = tape.param(store, &format!("{prefix}.beta"))?;
    x.layer_norm(&gamma, &beta, 1e-5)
}

/// Multi-head self-attention with optional post-softmax random masking.
fn self_attention(
    tape: &Tape,
    store: &ParamStore,
    x: &DiffArray,
    prefix: &str,
    heads: usize,
    mask_prob: f64,
    mask_stream: Option<u64>,
    rng: &CounterRng,
) -> Result<DiffArray> {
    let t = x.shape()[0];
    let c = x.shape()[1];
    let d = c / heads;
    let q = linear(tape, store, x, &format!("{prefix}.q"))?;
    let k = linear_no_bias(tape, store, x, &format!("{prefix}.k"))?;
    let v = linear(tape, store, x, &format!("{prefix}.v"))?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * d, d)?;
        let kh = k.slice_cols(h * d, d)?;
        let vh = v.slice_cols(h * d, d)?;
        let scores = qh.matmul_nt(&kh)?.scale(1.0 / libm::sqrt(d as f64))?;
        let mut attn = scores.softmax_rows()?;
        if let Some(base) = mask_stream {
            if mask_prob > 0.0 {
                let mut s = rng.stream(stream_from_parts(&[base, h as u64]));
                let mask = s.bernoulli_mask(t * t, 1.0 - mask_prob);
                attn = attn.masked_renorm_rows(&mask)?;
            }
        }
        head_outs.push(attn.matmul(&vh)?);
    }
    let refs: Vec<&DiffArray> = head_outs.iter().collect();
    let merged = if heads == 1 { head_outs[0].clone() } else { tape.concat(&refs, 1)? };
    linear(tape, store, &merged, &format!("{prefix}.proj"))
}

/// Per-level transformer block: `x + attn(LN(x))`, then `x + mlp(LN(x))`.
pub fn itmm_forward(
    tape: &Tape,
    store: &ParamStore,
    x: &DiffArray,
    prefix: &str,
    heads: usize,
    mask_prob: f64,
    mask_stream: Option<u64>,
    rng: &CounterRng,
) -> Result<DiffArray> {
    let normed = norm(tape, store, x, &format!("{prefix}.norm1"))?;
    let attn = self_attention(tape, store, &normed, prefix, heads, mask_prob, mask_stream, rng)?;
    let x = x.add(&attn)?;
    let normed = norm(tape, store, &x, &format!("{prefix}.norm2"))?;
    let hidden = linear(tape, store, &normed, &format!("{prefix}.mlp.fc1"))?.gelu()?;
    let mlp = linear(tape, store, &hidden, &format!("{prefix}.mlp.fc2"))?;
    x.add(&mlp)
}

/// Pairwise cross-level attention: level i queries every other level's keys
/// and values, each pair weighted by its learnable scalar; the mixed output
/// is projected and added back, so shapes never change.
pub fn ctmm_forward(
    tape: &Tape,
    store: &ParamStore,
    seqs: &TokenSequenceSet,
    repeat: usize,
    present: &[bool],
) -> Result<Vec<DiffArray>> {
    let m = seqs.level_count();
    if m < 2 {
        return Ok(seqs.sequences.clone());
    }
    let scale = 1.0 / libm::sqrt(seqs.channels as f64);
    // Keys and values of absent streams are detached so no gradient reaches
    // their parameters through cross-level flow.
    let mut keys = Vec::with_capacity(m);
    let mut vals = Vec::with_capacity(m);
    for (idx, seq) in seqs.sequences.iter().enumerate() {
        let level = seqs.levels[idx];
        let prefix = format!("level{level}.enc{repeat}.ctmm");
        let mut k = linear_no_bias(tape, store, seq, &format!("{prefix}.k"))?;
        let mut v = linear(tape, store, seq, &format!("{prefix}.v"))?;
        if !present[idx] {
            k = k.detach()?;
            v = v.detach()?;
        }
        keys.push(k);
        vals.push(v);
    }
    let mut out = Vec::with_capacity(m);
    for (i, seq) in seqs.sequences.iter().enumerate() {
        let level = seqs.levels[i];
        let prefix = format!("level{level}.enc{repeat}.ctmm");
        let q = linear(tape, store, seq, &format!("{prefix}.q"))?;
        let mut mixed: Option<DiffArray> = None;
        for j in 0..m {
            if j == i {
                continue;
            }
            let attn = q.matmul_nt(&keys[j])?.scale(scale)?.softmax_rows()?;
            let omega = tape.param(store, &format!("{prefix}.omega{}", seqs.levels[j]))?;
            let term = attn.matmul(&vals[j])?.mul_scalar(&omega)?;
            mixed = Some(match mixed {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let projected = linear(tape, store, &mixed.unwrap(), &format!("{prefix}.proj"))?;
        out.push(seq.add(&projected)?);
    }
    Ok(out)
}

/// Ablation substitute: concatenate along tokens, one shared single-head
/// self-attention, split back, residual per level.
fn concat_fuse_forward(
    tape: &Tape,
    store: &ParamStore,
    seqs: &TokenSequenceSet,
    repeat: usize,
    present: &[bool],
) -> Result<Vec<DiffArray>> {
    let m = seqs.level_count();
    if m < 2 {
        return Ok(seqs.sequences.clone());
    }
    let prefix = format!("shared.enc{repeat}.fuse");
    let mut inputs = Vec::with_capacity(m);
    for (idx, seq) in seqs.sequences.iter().enumerate() {
        inputs.push(if present[idx] { seq.clone() } else { seq.detach()? });
    }
    let refs: Vec<&DiffArray> = inputs.iter().collect();
    let cat = tape.concat(&refs, 0)?;
    let c = seqs.channels;
    let q = linear(tape, store, &cat, &format!("{prefix}.q"))?;
    let k = linear_no_bias(tape, store, &cat, &format!("{prefix}.k"))?;
    let v = linear(tape, store, &cat, &format!("{prefix}.v"))?;
    let attn = q.matmul_nt(&k)?.scale(1.0 / libm::sqrt(c as f64))?.softmax_rows()?;
    let fused = linear(tape, store, &attn.matmul(&v)?, &format!("{prefix}.proj"))?;
    let mut out = Vec::with_capacity(m);
    let mut offset = 0;
    for seq in &seqs.sequences {
        let t = seq.shape()[0];
        out.push(seq.add(&fused.slice_rows(offset, t)?)?);
        offset += t;
    }
    Ok(out)
}

/// Ablation substitute: add the pooled summaries of the other levels to
/// every token of each sequence. Parameter-free.
fn sum_fuse_forward(seqs: &TokenSequenceSet, present: &[bool]) -> Result<Vec<DiffArray>> {
    let m = seqs.level_count();
    if m < 2 {
        return Ok(seqs.sequences.clone());
    }
    let mut pools = Vec::with_capacity(m);
    for (idx, seq) in seqs.sequences.iter().enumerate() {
        let mut p = seq.mean_axis(0)?;
        if !present[idx] {
            p = p.detach()?;
        }
        pools.push(p);
    }
    let mut out = Vec::with_capacity(m);
    for (i, seq) in seqs.sequences.iter().enumerate() {
        let mut summary: Option<DiffArray> = None;
        for (j, pool) in pools.iter().enumerate() {
            if j == i {
                continue;
            }
            summary = Some(match summary {
                Some(acc) => acc.add(pool)?,
                None => pool.clone(),
            });
        }
        out.push(seq.add_bias(&summary.unwrap())?);
    }
    Ok(out)
}

/// Cross-level channel mixing: pool each sequence over tokens (cls included),
/// concatenate, squeeze-and-excite, split into per-level channel gates and
/// multiply them back onto the inputs.
pub fn ccmm_forward(
    tape: &Tape,
    store: &ParamStore,
    seqs: &TokenSequenceSet,
    repeat: usize,
    present: &[bool],
) -> Result<Vec<DiffArray>> {
    let m = seqs.level_count();
    let c = seqs.channels;
    let prefix = format!("shared.enc{repeat}.ccmm");
    let mut pools = Vec::with_capacity(m);
    for (idx, seq) in seqs.sequences.iter().enumerate() {
        let mut p = seq.mean_axis(0)?;
        if !present[idx] {
            p = p.detach()?;
        }
        pools.push(p);
    }
    let refs: Vec<&DiffArray> = pools.iter().collect();
    let z = tape.concat(&refs, 0)?.reshape(&[1, m * c])?;
    let squeezed = linear(tape, store, &z, &format!("{prefix}.squeeze"))?.gelu()?;
    let gates = linear(tape, store, &squeezed, &format!("{prefix}.excite"))?.sigmoid()?;
    let mut out = Vec::with_capacity(m);
    for (i, seq) in seqs.sequences.iter().enumerate() {
        let gate = gates.slice_cols(i * c, c)?.reshape(&[c])?;
        out.push(seq.mul_gate(&gate)?);
    }
    Ok(out)
}

fn assert_shapes_preserved(stage: &str, repeat: usize, before: &[Vec<usize>], seqs: &[DiffArray]) -> Result<()> {
    for (idx, seq) in seqs.iter().enumerate() {
        if seq.shape() != before[idx] {
            return Err(Error::Contract(format!(
                "{stage} (repeat {repeat}) changed sequence {idx}: {:?} -> {:?}",
                before[idx],
                seq.shape()
            )));
        }
    }
    Ok(())
}

/// Run the full encoder stack over embedded sequences.
pub fn encode_stack(
    tape: &Tape,
    store: &ParamStore,
    mut seqs: TokenSequenceSet,
    config: &ModelConfig,
    opts: &ForwardOpts,
) -> Result<TokenSequenceSet> {
    let m = seqs.level_count();
    let present = effective_present(&opts.present, m);
    let rng = CounterRng::new(match opts.mode {
        RunMode::Train { mask_seed } => mask_seed,
        RunMode::Eval => 0,
    });
    let shapes: Vec<Vec<usize>> = seqs.sequences.iter().map(DiffArray::shape).collect();
    for repeat in 0..config.depth {
        // Intra-level mixing.
        let mut mixed = Vec::with_capacity(m);
        for idx in 0..m {
            let level = seqs.levels[idx];
            let prefix = if config.decoupled_itmm {
                format!("level{level}.enc{repeat}.itmm")
            } else {
                format!("shared.enc{repeat}.itmm")
            };
            let mask_stream = match opts.mode {
                RunMode::Train { .. } if config.mask_prob > 0.0 => {
                    Some(stream_from_parts(&[repeat as u64, level as u64]))
                }
                _ => None,
            };
            mixed.push(itmm_forward(
                tape,
                store,
                &seqs.sequences[idx],
                &prefix,
                config.heads,
                config.mask_prob,
                mask_stream,
                &rng,
            )?);
        }
        assert_shapes_preserved("itmm", repeat, &shapes, &mixed)?;
        seqs.sequences = mixed;

        // Cross-level token mixing.
        let crossed = match config.cross_mix {
            CrossMixMode::Ctmm => ctmm_forward(tape, store, &seqs, repeat, &present)?,
            CrossMixMode::Concat => concat_fuse_forward(tape, store, &seqs, repeat, &present)?,
            CrossMixMode::Sum => sum_fuse_forward(&seqs, &present)?,
            CrossMixMode::None => seqs.sequences.clone(),
        };
        assert_shapes_preserved("cross-mix", repeat, &shapes, &crossed)?;
        seqs.sequences = crossed;

        // Cross-level channel mixing.
        if config.use_ccmm {
            let gated = ccmm_forward(tape, store, &seqs, repeat, &present)?;
            assert_shapes_preserved("ccmm", repeat, &shapes, &gated)?;
            seqs.sequences = gated;
        }
    }
    Ok(seqs)
}

fn effective_present(present: &[bool], m: usize) -> Vec<bool> {
    if present.is_empty() {
        vec![true; m]
    } else {
        present.to_vec()
    }
}

/// Final per-level normalization plus the regression head.
pub fn regression_head(
    tape: &Tape,
    store: &ParamStore,
    seqs: &TokenSequenceSet,
    config: &ModelConfig,
    opts: &ForwardOpts,
) -> Result<DiffArray> {
    let m = seqs.level_count();
    let present = effective_present(&opts.present, m);
    let mut cls_tokens = Vec::with_capacity(m);
    for (idx, seq) in seqs.sequences.iter().enumerate() {
        let level = seqs.levels[idx];
        let normed = norm(tape, store, seq, &format!("level{level}.final_norm"))?;
        cls_tokens.push(normed.slice_rows(0, 1)?);
    }
    match config.head_mode {
        HeadMode::ConcatCls => {
            if present.iter().any(|p| !p) {
                return Err(Error::Input(
                    "concat-cls head needs every level present; use per-level-average for missing levels"
                        .into(),
                ));
            }
            let mut detached = Vec::with_capacity(m);
            for (idx, cls) in cls_tokens.iter().enumerate() {
                detached.push(if opts.detach_head_of == Some(idx) {
                    cls.detach()?
                } else {
                    cls.clone()
                });
            }
            let refs: Vec<&DiffArray> = detached.iter().collect();
            let cat = tape.concat(&refs, 1)?;
            linear(tape, store, &cat, "shared.head")?.reshape(&[config.genes])
        }
        HeadMode::PerLevelAverage => {
            let mut preds = Vec::new();
            for (idx, cls) in cls_tokens.iter().enumerate() {
                if !present[idx] {
                    continue;
                }
                let level = seqs.levels[idx];
                let mut pred = linear(tape, store, cls, &format!("level{level}.head"))?;
                if opts.detach_head_of == Some(idx) {
                    pred = pred.detach()?;
                }
                preds.push(pred);
            }
            if preds.is_empty() {
                return Err(Error::Input("all levels absent for this sample".into()));
            }
            let refs: Vec<&DiffArray> = preds.iter().collect();
            let stacked = tape.concat(&refs, 0)?;
            stacked.mean_axis(0)
        }
    }
}

/// Full forward pass: images to predicted expression vector of length `genes`.
pub fn m2ost_forward(
    tape: &Tape,
    sample: &MultiScaleSample,
    store: &ParamStore,
    config: &ModelConfig,
    opts: &ForwardOpts,
) -> Result<DiffArray> {
    let mut opts = opts.clone();
    if opts.present.is_empty() {
        opts.present = config
            .levels_enabled
            .iter()
            .map(|&l| sample.level_present.get(l).copied().unwrap_or(true))
            .collect();
    }
    if opts.present.iter().all(|p| !p) {
        return Err(Error::Input(format!("sample {}: all levels absent", sample.spot_id)));
    }
    let tokens = dpe_embed(tape, sample, store, config)?;
    let tokens = add_cls_and_positions(tape, tokens, store)?;
    let encoded = encode_stack(tape, store, tokens, config, &opts)?;
    regression_head(tape, store, &encoded, config, &opts)
}
