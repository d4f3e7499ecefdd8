//! Run configuration: defaults, overridden by `M2OST_SEED`, overridden by a
//! plain-text `key=value` config file, overridden by command-line flags.
//! Unknown keys in the file are rejected. The same `key=value` rendering is
//! written next to every checkpoint so a run can be reconstructed exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use m2ost_core::config::{CrossMixMode, HeadMode, ModelConfig};
use m2ost_core::tape::Precision;
use m2ost_core::train::TrainConfig;

use crate::error::{CmdError, CmdResult};

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Worker cap for evaluation passes (1 keeps everything byte-deterministic;
    /// results are identical for any value).
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::default(), train: TrainConfig::default(), threads: 1 }
    }
}

/// Optional overrides collected from the config file or from flags.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub entries: BTreeMap<String, String>,
}

impl Overrides {
    pub fn set(&mut self, key: &str, value: String) {
        self.entries.insert(key.to_string(), value);
    }
}

const KNOWN_KEYS: &[&str] = &[
    "image_h",
    "image_w",
    "p",
    "channels",
    "depth",
    "heads",
    "genes",
    "levels",
    "mask_prob",
    "se_ratio",
    "head_mode",
    "use_dpe",
    "decoupled_itmm",
    "cross_mix",
    "use_ccmm",
    "lr",
    "batch_size",
    "epochs",
    "max_steps",
    "seed",
    "missing_fraction",
    "eval_every",
    "precision",
    "threads",
];

pub fn parse_config_file(path: &Path) -> CmdResult<Overrides> {
    let text = fs::read_to_string(path)
        .map_err(|e| CmdError::Io(format!("cannot read config {}: {e}", path.display())))?;
    let mut overrides = Overrides::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CmdError::Usage(format!("{}:{}: expected key=value", path.display(), lineno + 1))
        })?;
        let key = key.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(CmdError::Usage(format!(
                "{}:{}: unknown key `{key}` (known: {})",
                path.display(),
                lineno + 1,
                KNOWN_KEYS.join(", ")
            )));
        }
        overrides.set(key, value.trim().to_string());
    }
    Ok(overrides)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> CmdResult<T> {
    value
        .parse::<T>()
        .map_err(|_| CmdError::Usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> CmdResult<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CmdError::Usage(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

pub fn parse_levels(value: &str) -> CmdResult<Vec<usize>> {
    let mut levels = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        levels.push(parse::<usize>("levels", part)?);
    }
    if levels.is_empty() {
        return Err(CmdError::Usage("levels must name at least one level".into()));
    }
    Ok(levels)
}

fn apply(config: &mut RunConfig, overrides: &Overrides) -> CmdResult<()> {
    for (key, value) in &overrides.entries {
        match key.as_str() {
            "image_h" => config.model.image_h = parse(key, value)?,
            "image_w" => config.model.image_w = parse(key, value)?,
            "p" => config.model.p = parse(key, value)?,
            "channels" => config.model.channels = parse(key, value)?,
            "depth" => config.model.depth = parse(key, value)?,
            "heads" => config.model.heads = parse(key, value)?,
            "genes" => config.model.genes = parse(key, value)?,
            "levels" => config.model.levels_enabled = parse_levels(value)?,
            "mask_prob" => config.model.mask_prob = parse(key, value)?,
            "se_ratio" => config.model.se_ratio = parse(key, value)?,
            "head_mode" => {
                config.model.head_mode = HeadMode::parse(value).map_err(CmdError::from)?
            }
            "use_dpe" => config.model.use_dpe = parse_bool(key, value)?,
            "decoupled_itmm" => config.model.decoupled_itmm = parse_bool(key, value)?,
            "cross_mix" => {
                config.model.cross_mix = CrossMixMode::parse(value).map_err(CmdError::from)?
            }
            "use_ccmm" => config.model.use_ccmm = parse_bool(key, value)?,
            "lr" => config.train.lr = parse(key, value)?,
            "batch_size" => config.train.batch_size = parse(key, value)?,
            "epochs" => config.train.epochs = parse(key, value)?,
            "max_steps" => {
                config.train.max_steps =
                    if value == "none" { None } else { Some(parse(key, value)?) }
            }
            "seed" => config.train.seed = parse(key, value)?,
            "missing_fraction" => config.train.missing_level_fraction = parse(key, value)?,
            "eval_every" => config.train.eval_every = parse(key, value)?,
            "precision" => {
                config.train.precision = match value.as_str() {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => {
                        return Err(CmdError::Usage(format!("invalid precision `{other}`")))
                    }
                }
            }
            "threads" => config.threads = parse(key, value)?,
            other => return Err(CmdError::Usage(format!("unknown key `{other}`"))),
        }
    }
    Ok(())
}

/// Resolve the effective configuration: defaults, then the `M2OST_SEED`
/// environment variable, then the config file, then flags.
pub fn resolve(file: Option<&Path>, flags: &Overrides) -> CmdResult<RunConfig> {
    let mut config = RunConfig::default();
    if let Ok(seed) = std::env::var("M2OST_SEED") {
        config.train.seed = seed
            .parse::<u64>()
            .map_err(|_| CmdError::Usage(format!("M2OST_SEED=`{seed}` is not a u64")))?;
    }
    if let Some(path) = file {
        apply(&mut config, &parse_config_file(path)?)?;
    }
    apply(&mut config, flags)?;
    if config.threads == 0 {
        return Err(CmdError::Usage("threads must be at least 1".into()));
    }
    Ok(config)
}

/// Serialize a run configuration in the config-file syntax (sorted keys).
pub fn to_key_values(config: &RunConfig) -> String {
    let levels: Vec<String> =
        config.model.levels_enabled.iter().map(|l| l.to_string()).collect();
    let mut pairs: Vec<(&str, String)> = vec![
        ("image_h", config.model.image_h.to_string()),
        ("image_w", config.model.image_w.to_string()),
        ("p", config.model.p.to_string()),
        ("channels", config.model.channels.to_string()),
        ("depth", config.model.depth.to_string()),
        ("heads", config.model.heads.to_string()),
        ("genes", config.model.genes.to_string()),
        ("levels", levels.join(",")),
        ("mask_prob", config.model.mask_prob.to_string()),
        ("se_ratio", config.model.se_ratio.to_string()),
        ("head_mode", config.model.head_mode.as_str().to_string()),
        ("use_dpe", config.model.use_dpe.to_string()),
        ("decoupled_itmm", config.model.decoupled_itmm.to_string()),
        ("cross_mix", config.model.cross_mix.as_str().to_string()),
        ("use_ccmm", config.model.use_ccmm.to_string()),
        ("lr", config.train.lr.to_string()),
        ("batch_size", config.train.batch_size.to_string()),
        ("epochs", config.train.epochs.to_string()),
        (
            "max_steps",
            config.train.max_steps.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
        ),
        ("seed", config.train.seed.to_string()),
        ("missing_fraction", config.train.missing_level_fraction.to_string()),
        ("eval_every", config.train.eval_every.to_string()),
        (
            "precision",
            match config.train.precision {
                Precision::F32 => "f32".to_string(),
                Precision::F64 => "f64".to_string(),
            },
        ),
        ("threads", config.threads.to_string()),
    ];
    pairs.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = std::env::temp_dir().join("m2ost-runconfig-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.conf");
        std::fs::write(&path, "channels=64\ndepth=2\n# comment\n\nlr=0.01\n").unwrap();
        let mut flags = Overrides::default();
        flags.set("depth", "3".into());
        let config = resolve(Some(&path), &flags).unwrap();
        assert_eq!(config.model.channels, 64);
        assert_eq!(config.model.depth, 3);
        assert_eq!(config.train.lr, 0.01);
        assert_eq!(config.model.p, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = std::env::temp_dir().join("m2ost-runconfig-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.conf");
        std::fs::write(&path, "wat=1\n").unwrap();
        let err = resolve(Some(&path), &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn sidecar_round_trips_through_the_parser() {
        let mut flags = Overrides::default();
        flags.set("channels", "32".into());
        flags.set("cross_mix", "sum".into());
        flags.set("max_steps", "250".into());
        let config = resolve(None, &flags).unwrap();

        let dir = std::env::temp_dir().join("m2ost-runconfig-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sidecar.conf");
        std::fs::write(&path, to_key_values(&config)).unwrap();
        let reloaded = resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(reloaded, config);
    }
}
