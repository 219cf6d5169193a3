//! Flat TOML run configuration. Every key except `seed` has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use etfcd_core::{LossConfig, Preset, SessionConfig, StreamSpec};

/// Keys as they appear in the file. `None` means "use the preset or built-in default".
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: u64,
    pub preset: Option<Preset>,
    pub output_dir: Option<PathBuf>,

    /// Exported embedding table; when set the synthetic stream keys are ignored.
    pub embeddings: Option<PathBuf>,
    pub total_classes: Option<usize>,
    pub base_classes: Option<usize>,
    pub new_per_stage: Option<Vec<usize>>,
    pub samples_per_class_train: Option<usize>,
    pub samples_per_class_test: Option<usize>,
    pub old_class_mix_fraction: Option<f64>,
    pub input_dim: Option<usize>,
    pub class_separation_deg: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub stream_seed: Option<u64>,

    pub tau: Option<f64>,
    pub lambda_rep: Option<f64>,
    #[serde(rename = "lambda_A")]
    pub lambda_a: Option<f64>,
    pub epsilon: Option<f64>,
    pub teacher_temp: Option<f64>,
    pub literal_eq5_denominator: Option<bool>,

    pub base_epochs: Option<usize>,
    pub incremental_epochs: Option<usize>,
    pub base_learning_rate: Option<f64>,
    pub incremental_learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,

    pub embed_dim: Option<usize>,
    pub frame_count: Option<usize>,
    pub frame_seed: Option<u64>,
    pub hidden_dims: Option<Vec<usize>>,

    pub alpha: Option<f64>,
    pub base_aug_sigma: Option<f64>,
    pub incremental_aug_sigma: Option<f64>,
    pub cls_temp: Option<f64>,
    pub kmeans_iters: Option<usize>,
    pub kmeans_restarts: Option<usize>,

    pub sup_etf_align: Option<bool>,
    pub unsup_etf_align: Option<bool>,
    pub literal_unassigned_only: Option<bool>,
    pub freeze_old_weights: Option<bool>,

    /// Seeds per cell for `ablate` and `sweep-alpha`.
    pub repeats: Option<usize>,
    pub alphas: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSource {
    Synthetic(StreamSpec),
    Embeddings(PathBuf),
}

/// Fully resolved configuration; echoed into `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub stream: StreamSource,
    pub session: SessionConfig,
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub repeats: usize,
    pub alphas: Vec<f64>,
    /// Set when the file pins the stream seed; otherwise the stream follows `seed`.
    #[serde(skip)]
    pub stream_seed: Option<u64>,
}

impl RunConfig {
    /// The same experiment under another seed.
    pub fn with_seed(&self, seed: u64) -> RunConfig {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.session.seed = seed;
        if let (StreamSource::Synthetic(spec), None) = (&mut cfg.stream, self.stream_seed) {
            spec.seed = seed;
        }
        cfg
    }

    /// `repeats` consecutive seeds starting at `seed`.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.seed + i).collect()
    }
}

/// Problems with the configuration itself.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<Preset>,
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let raw: RawConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    resolve(raw, overrides, base_dir)
}

/// Applies defaults, the preset, and overrides, then validates. Relative paths in the file are
/// taken relative to `base_dir`.
pub fn resolve(raw: RawConfig, overrides: &Overrides, base_dir: &Path) -> Result<RunConfig, ConfigError> {
    let seed = overrides.seed.unwrap_or(raw.seed);
    let preset = overrides.preset.or(raw.preset).unwrap_or(Preset::Desk);

    let mut s = SessionConfig::preset(preset);
    s.seed = seed;
    let loss = LossConfig {
        tau: raw.tau.unwrap_or(s.loss.tau),
        lambda_rep: raw.lambda_rep.unwrap_or(s.loss.lambda_rep),
        lambda_align: raw.lambda_a.unwrap_or(s.loss.lambda_align),
        epsilon: raw.epsilon.unwrap_or(s.loss.epsilon),
        teacher_temp: raw.teacher_temp.unwrap_or(s.loss.teacher_temp),
        literal_eq5_denominator: raw.literal_eq5_denominator.unwrap_or(s.loss.literal_eq5_denominator),
    };
    s.loss = loss;
    set(&mut s.base_sgd.epochs, raw.base_epochs);
    set(&mut s.incremental_sgd.epochs, raw.incremental_epochs);
    set(&mut s.base_sgd.learning_rate, raw.base_learning_rate);
    set(&mut s.incremental_sgd.learning_rate, raw.incremental_learning_rate);
    if let Some(m) = raw.momentum {
        s.base_sgd.momentum = m;
        s.incremental_sgd.momentum = m;
    }
    if let Some(b) = raw.batch_size {
        s.base_sgd.batch_size = b;
        s.incremental_sgd.batch_size = b;
    }
    set(&mut s.embed_dim, raw.embed_dim);
    s.frame_count = raw.frame_count.or(s.frame_count);
    s.frame_seed = raw.frame_seed.or(s.frame_seed);
    set(&mut s.hidden_dims, raw.hidden_dims);
    set(&mut s.alpha, raw.alpha);
    set(&mut s.base_aug_sigma, raw.base_aug_sigma);
    set(&mut s.incremental_aug_sigma, raw.incremental_aug_sigma);
    set(&mut s.cls_temp, raw.cls_temp);
    set(&mut s.kmeans_iters, raw.kmeans_iters);
    set(&mut s.kmeans_restarts, raw.kmeans_restarts);
    set(&mut s.sup_etf_align, raw.sup_etf_align);
    set(&mut s.unsup_etf_align, raw.unsup_etf_align);
    set(&mut s.literal_unassigned_only, raw.literal_unassigned_only);
    set(&mut s.freeze_old_weights, raw.freeze_old_weights);

    let invalid = |key: &'static str| {
        move |e: etfcd_core::Error| ConfigError::Invalid {
            key,
            message: e.to_string(),
        }
    };
    s.loss.validate().map_err(invalid("loss"))?;
    s.validate().map_err(invalid("session"))?;

    let stream = match raw.embeddings {
        Some(p) => StreamSource::Embeddings(base_dir.join(p)),
        None => {
            let d = StreamSpec::default();
            let spec = StreamSpec {
                total_classes: raw.total_classes.unwrap_or(d.total_classes),
                base_classes: raw.base_classes.unwrap_or(d.base_classes),
                new_per_stage: raw.new_per_stage.unwrap_or(d.new_per_stage),
                samples_per_class_train: raw.samples_per_class_train.unwrap_or(d.samples_per_class_train),
                samples_per_class_test: raw.samples_per_class_test.unwrap_or(d.samples_per_class_test),
                old_class_mix_fraction: raw.old_class_mix_fraction.unwrap_or(d.old_class_mix_fraction),
                input_dim: raw.input_dim.unwrap_or(d.input_dim),
                class_separation_deg: raw.class_separation_deg.unwrap_or(d.class_separation_deg),
                noise_sigma: raw.noise_sigma.unwrap_or(d.noise_sigma),
                seed: raw.stream_seed.unwrap_or(seed),
            };
            spec.validate().map_err(invalid("stream"))?;
            StreamSource::Synthetic(spec)
        }
    };

    let repeats = raw.repeats.unwrap_or(5);
    if repeats == 0 {
        return Err(ConfigError::Invalid {
            key: "repeats",
            message: "must be at least 1".into(),
        });
    }
    let alphas = raw.alphas.unwrap_or_else(|| vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.0]);
    check_alphas(&alphas)?;

    let output_dir = overrides
        .out
        .clone()
        .or_else(|| raw.output_dir.map(|p| base_dir.join(p)))
        .unwrap_or_else(|| PathBuf::from("out"));

    Ok(RunConfig {
        seed,
        preset,
        stream,
        session: s,
        output_dir,
        repeats,
        alphas,
        stream_seed: raw.stream_seed,
    })
}

pub fn check_alphas(alphas: &[f64]) -> Result<(), ConfigError> {
    if alphas.is_empty() {
        return Err(ConfigError::Invalid {
            key: "alphas",
            message: "list is empty".into(),
        });
    }
    if let Some(a) = alphas.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
        return Err(ConfigError::Invalid {
            key: "alphas",
            message: format!("{a} is outside (0, 1]"),
        });
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
