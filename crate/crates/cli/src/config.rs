//! Experiment configuration: a flat `key = value` text file with CLI-flag
//! overrides. Unknown keys are rejected so typos surface as usage errors,
//! and every path is resolved relative to the config file's directory so an
//! experiment directory is self-contained and diff-able.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use holoshot_core::encoder::{ConvBlock, EncoderConfig};
use holoshot_core::fewshot::{HeadKind, LinearFitConfig, ProtoFitConfig};
use holoshot_core::imaging::{AugmentPolicy, ShiftParams, SyntheticSpec};

use crate::CliError;

#[derive(Debug, Clone)]
pub struct PretrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct SslParams {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_n: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct EvalParams {
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub heads: Vec<HeadKind>,
    pub sources: Vec<String>,
    pub train_instrument: String,
    pub test_instruments: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub n_classes: usize,
    pub per_class: usize,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub shift: bool,
    pub shift_blur: f64,
    pub shift_gain: f64,
    pub shift_noise: f64,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub manifest: PathBuf,
    pub cache_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub augment: AugmentPolicy,
    pub pretrain: PretrainParams,
    pub ssl: SslParams,
    pub eval: EvalParams,
    pub linear_fit: LinearFitConfig,
    pub proto_fit: ProtoFitConfig,
    pub synth: SynthParams,
}

impl ExperimentConfig {
    /// Directory that manifest-relative image paths resolve against.
    pub fn data_dir(&self) -> PathBuf {
        self.manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, CliError> {
        let mut spec = SyntheticSpec::with_default_classes(self.synth.n_classes, self.synth.per_class);
        spec.train_fraction = self.synth.train_fraction;
        spec.test_fraction = self.synth.test_fraction;
        spec.base_instrument = self.eval.train_instrument.clone();
        if self.synth.shift {
            spec.shift = Some(ShiftParams {
                blur_sigma: self.synth.shift_blur,
                gain: self.synth.shift_gain,
                noise_sigma: self.synth.shift_noise,
            });
            spec.shift_instrument = self
                .eval
                .test_instruments
                .iter()
                .find(|t| **t != self.eval.train_instrument)
                .cloned()
                .unwrap_or_else(|| "P4".to_string());
        }
        spec.validate().map_err(CliError::data)?;
        Ok(spec)
    }
}

/// Flag overrides collected from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub ks: Option<Vec<usize>>,
    pub repeats: Option<usize>,
}

/// Parse a config file and apply overrides. `--epochs` applies to whichever
/// training stage the invoked command runs.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!(
                "{} line {}: expected 'key = value', got '{raw}'",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if kv.insert(key.clone(), value).is_some() {
            return Err(CliError::Usage(format!(
                "{}: duplicate key '{key}'",
                path.display()
            )));
        }
    }

    let mut parser = Parser { kv, path };

    let seed = match overrides.seed {
        Some(s) => {
            // Consume any config seed so the unknown-key check stays clean.
            let _ = parser.take("seed");
            s
        }
        None => parser
            .take("seed")
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "{}: 'seed' is required (wall-clock seeding is not supported); \
                     set it in the config or pass --seed",
                    path.display()
                ))
            })?
            .parse::<u64>()
            .map_err(|e| parser.err("seed", &e.to_string()))?,
    };

    let manifest = base.join(parser.take_or("manifest", "data/manifest.csv"));
    let cache_dir = base.join(parser.take_or("cache_dir", "cache"));
    let checkpoint_dir = base.join(parser.take_or("checkpoint_dir", "checkpoints"));
    let report_dir = base.join(parser.take_or("report_dir", "report"));

    let encoder = EncoderConfig {
        input_size: parser.usize_or("encoder.input_size", 64)?,
        conv_blocks: parser.blocks_or("encoder.conv_blocks", "8x3s2,16x3s2,32x3s2,64x3s2")?,
        feature_dim: parser.usize_or("encoder.feature_dim", 64)?,
        proj_dim: parser.usize_or("encoder.proj_dim", 32)?,
    };

    let default_policy = AugmentPolicy::default();
    let augment = AugmentPolicy {
        rotation_max_deg: parser.f64_or("augment.rotation_max_deg", default_policy.rotation_max_deg)?,
        crop_scale_range: parser.pair_or("augment.crop_scale", default_policy.crop_scale_range)?,
        blur_sigma_range: parser.pair_or("augment.blur_sigma", default_policy.blur_sigma_range)?,
        gain_jitter_range: parser.pair_or("augment.gain", default_policy.gain_jitter_range)?,
        flip_prob: parser.f64_or("augment.flip_prob", default_policy.flip_prob)?,
    };

    let pretrain = PretrainParams {
        epochs: parser.usize_or("pretrain.epochs", 30)?,
        lr: parser.f64_or("pretrain.lr", 0.05)?,
        momentum: parser.f64_or("pretrain.momentum", 0.9)?,
        batch: parser.usize_or("pretrain.batch", 32)?,
    };

    let ssl = SslParams {
        epochs: parser.usize_or("ssl.epochs", 12)?,
        lr: parser.f64_or("ssl.lr", 0.02)?,
        momentum: parser.f64_or("ssl.momentum", 0.9)?,
        batch_n: parser.usize_or("ssl.batch_n", 64)?,
        temperature: parser.f64_or("ssl.temperature", 0.5)?,
    };

    let heads = parser
        .take_or("eval.heads", "linear,prototype")
        .split(',')
        .map(|h| match h.trim() {
            "linear" => Ok(HeadKind::Linear),
            "prototype" => Ok(HeadKind::Prototype),
            other => Err(CliError::Usage(format!("unknown head '{other}'"))),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let eval = EvalParams {
        ks: match &overrides.ks {
            Some(ks) => {
                let _ = parser.take("eval.ks");
                ks.clone()
            }
            None => parser.usize_list_or("eval.ks", "1,2,5,10,25")?,
        },
        repeats: match overrides.repeats {
            Some(r) => {
                let _ = parser.take("eval.repeats");
                r
            }
            None => parser.usize_or("eval.repeats", 20)?,
        },
        heads,
        sources: parser.string_list_or("eval.sources", "generic,ssl_refined"),
        train_instrument: parser.take_or("eval.train_instrument", "P5"),
        test_instruments: parser.string_list_or("eval.test_instruments", "P5,P4"),
    };

    let linear_fit = LinearFitConfig {
        l2: parser.f64_or("fewshot.l2", 1e-3)?,
        max_iter: parser.usize_or("fewshot.max_iter", 500)?,
        tol: parser.f64_or("fewshot.tol", 1e-6)?,
    };
    let proto_fit = ProtoFitConfig {
        scale: parser.f64_or("fewshot.scale", 10.0)?,
        epochs: parser.usize_or("fewshot.proto_epochs", 50)?,
        lr: parser.f64_or("fewshot.proto_lr", 0.1)?,
    };

    let synth = SynthParams {
        n_classes: parser.usize_or("synth.n_classes", 4)?,
        per_class: parser.usize_or("synth.per_class", 250)?,
        train_fraction: parser.f64_or("synth.train_fraction", 0.2)?,
        test_fraction: parser.f64_or("synth.test_fraction", 0.2)?,
        shift: parser.bool_or("synth.shift", true)?,
        shift_blur: parser.f64_or("synth.shift_blur", 1.5)?,
        shift_gain: parser.f64_or("synth.shift_gain", 1.25)?,
        shift_noise: parser.f64_or("synth.shift_noise", 0.03)?,
    };

    if let Some(unknown) = parser.kv.keys().next() {
        return Err(CliError::Usage(format!(
            "{}: unknown config key '{unknown}'",
            path.display()
        )));
    }

    let mut cfg = ExperimentConfig {
        seed,
        manifest,
        cache_dir,
        checkpoint_dir,
        report_dir,
        encoder,
        augment,
        pretrain,
        ssl,
        eval,
        linear_fit,
        proto_fit,
        synth,
    };
    if let Some(epochs) = overrides.epochs {
        cfg.pretrain.epochs = epochs;
        cfg.ssl.epochs = epochs;
    }

    cfg.encoder.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.augment.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

struct Parser<'a> {
    kv: BTreeMap<String, String>,
    path: &'a Path,
}

impl<'a> Parser<'a> {
    fn take(&mut self, key: &str) -> Option<String> {
        self.kv.remove(key)
    }

    fn take_or(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    fn err(&self, key: &str, msg: &str) -> CliError {
        CliError::Usage(format!("{}: key '{key}': {msg}", self.path.display()))
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.err(key, &format!("invalid integer '{v}'"))),
        }
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.err(key, &format!("invalid number '{v}'"))),
        }
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.take(key).as_deref() {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(self.err(key, &format!("expected true/false, got '{v}'"))),
        }
    }

    fn pair_or(&mut self, key: &str, default: (f64, f64)) -> Result<(f64, f64), CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(self.err(key, "expected 'lo,hi'"));
                }
                let lo = parts[0].parse().map_err(|_| self.err(key, "invalid number"))?;
                let hi = parts[1].parse().map_err(|_| self.err(key, "invalid number"))?;
                Ok((lo, hi))
            }
        }
    }

    fn usize_list_or(&mut self, key: &str, default: &str) -> Result<Vec<usize>, CliError> {
        let raw = self.take_or(key, default);
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| self.err(key, &format!("invalid integer '{p}'")))
            })
            .collect()
    }

    fn string_list_or(&mut self, key: &str, default: &str) -> Vec<String> {
        self.take_or(key, default)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Conv stack syntax: comma-separated `<channels>x<kernel>s<stride>`.
    fn blocks_or(&mut self, key: &str, default: &str) -> Result<Vec<ConvBlock>, CliError> {
        let raw = self.take_or(key, default);
        raw.split(',')
            .map(|spec| {
                let spec = spec.trim();
                let (ch, rest) = spec
                    .split_once('x')
                    .ok_or_else(|| self.err(key, &format!("bad block '{spec}'")))?;
                let (k, s) = rest
                    .split_once('s')
                    .ok_or_else(|| self.err(key, &format!("bad block '{spec}'")))?;
                Ok(ConvBlock {
                    out_channels: ch.parse().map_err(|_| self.err(key, "bad channel count"))?,
                    kernel: k.parse().map_err(|_| self.err(key, "bad kernel"))?,
                    stride: s.parse().map_err(|_| self.err(key, "bad stride"))?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("exp.cfg");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "seed = 7\n");
        let cfg = load_config(&path, &Overrides::default()).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.encoder.feature_dim, 64);
        assert_eq!(cfg.eval.ks, vec![1, 2, 5, 10, 25]);
        assert!(cfg.manifest.ends_with("data/manifest.csv"));
        assert!(cfg.manifest.starts_with(dir.path()));
    }

    #[test]
    fn seed_is_mandatory() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "eval.repeats = 5\n");
        let err = load_config(&path, &Overrides::default()).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn seed_flag_overrides_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "seed = 7\n");
        let overrides = Overrides {
            seed: Some(99),
            ..Default::default()
        };
        assert_eq!(load_config(&path, &overrides).unwrap().seed, 99);
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "seed = 1\nssl.learning_rate = 0.1\n");
        let err = load_config(&path, &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("ssl.learning_rate"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "# experiment\n\nseed = 3\n  # trailing\n");
        assert!(load_config(&path, &Overrides::default()).is_ok());
    }

    #[test]
    fn conv_block_syntax() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "seed = 1\nencoder.conv_blocks = 4x3s2,8x3s2\nencoder.feature_dim = 8\nencoder.proj_dim = 4\n",
        );
        let cfg = load_config(&path, &Overrides::default()).unwrap();
        assert_eq!(cfg.encoder.conv_blocks.len(), 2);
        assert_eq!(cfg.encoder.conv_blocks[1].out_channels, 8);
    }

    #[test]
    fn invalid_encoder_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        // feature_dim disagrees with the last block.
        let path = write_config(dir.path(), "seed = 1\nencoder.feature_dim = 32\n");
        assert!(load_config(&path, &Overrides::default()).is_err());
    }

    #[test]
    fn epochs_override_applies_to_both_stages() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "seed = 1\npretrain.epochs = 9\nssl.epochs = 9\n");
        let overrides = Overrides {
            epochs: Some(0),
            ..Default::default()
        };
        let cfg = load_config(&path, &overrides).unwrap();
        assert_eq!(cfg.pretrain.epochs, 0);
        assert_eq!(cfg.ssl.epochs, 0);
    }

    #[test]
    fn duplicate_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "seed = 1\nseed = 2\n");
        assert!(load_config(&path, &Overrides::default()).is_err());
    }
}
