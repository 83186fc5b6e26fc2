//! Experiment configuration: flat `key = value` pairs grouped under
//! `[section]` headers. `#` starts a comment.
//!
//! ```text
//! [data]
//! n_classes = 8
//! seed = 0
//!
//! [model]
//! variant = rfga_residual
//!
//! [train]
//! epochs = 45
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rfga_core::backbone::{TrainConfig, Variant};
use rfga_core::rfga::DEFAULT_KERNEL_SIZE;
use rfga_core::wsol::DEFAULT_DELTAS;
use rfga_core::SynthSpec;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: SynthSpec,
    pub variant: Variant,
    pub kernel_size: usize,
    pub train: TrainConfig,
    /// Test samples scored for localization after every epoch; 0 disables.
    pub log_eval_samples: usize,
    pub out: PathBuf,
    pub bilinear: bool,
    pub deltas: Vec<f64>,
    pub sweep_variants: Vec<Variant>,
    pub visualize_samples: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: SynthSpec::default(),
            variant: Variant::RfgaResidual,
            kernel_size: DEFAULT_KERNEL_SIZE,
            train: TrainConfig::default(),
            log_eval_samples: 200,
            out: PathBuf::from("runs"),
            bilinear: false,
            deltas: DEFAULT_DELTAS.to_vec(),
            sweep_variants: Variant::ALL.to_vec(),
            visualize_samples: vec![0, 1, 2, 3],
        }
    }
}

struct Entry<'a> {
    line: usize,
    section: &'a str,
    key: &'a str,
    value: &'a str,
}

fn entries(text: &str) -> Result<Vec<Entry<'_>>, ConfigError> {
    let mut out: Vec<Entry> = Vec::new();
    let mut section = "";
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| ConfigError::Parse { line, message };
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(format!("unterminated section header '{content}'")))?
                .trim();
            if name.is_empty() || name.contains(['[', ']']) {
                return Err(err(format!("bad section header '{content}'")));
            }
            section = name;
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected 'key = value', got '{content}'")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(err("missing key".into()));
        }
        if section.is_empty() {
            return Err(err(format!("key '{key}' outside any section")));
        }
        if let Some(prev) = out.iter().find(|e| e.section == section && e.key == key) {
            return Err(err(format!("duplicate key '{key}' (first set on line {})", prev.line)));
        }
        out.push(Entry {
            line,
            section,
            key,
            value,
        });
    }
    Ok(out)
}

fn parse_value<T: FromStr>(e: &Entry) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    e.value.parse().map_err(|err| ConfigError::Parse {
        line: e.line,
        message: format!("bad value '{}' for {}.{}: {err}", e.value, e.section, e.key),
    })
}

fn parse_list<T: FromStr>(e: &Entry) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    e.value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            item.parse().map_err(|err| ConfigError::Parse {
                line: e.line,
                message: format!("bad list item '{item}' for {}.{}: {err}", e.section, e.key),
            })
        })
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for e in entries(text)? {
            let d = &mut c.data;
            let t = &mut c.train;
            match (e.section, e.key) {
                ("data", "n_classes") => d.n_classes = parse_value(&e)?,
                ("data", "train_per_class") => d.train_per_class = parse_value(&e)?,
                ("data", "test_per_class") => d.test_per_class = parse_value(&e)?,
                ("data", "image_size") => d.image_size = parse_value(&e)?,
                ("data", "patch_min") => d.patch_size.0 = parse_value(&e)?,
                ("data", "patch_max") => d.patch_size.1 = parse_value(&e)?,
                ("data", "body_min") => d.body_length.0 = parse_value(&e)?,
                ("data", "body_max") => d.body_length.1 = parse_value(&e)?,
                ("data", "aspect_min") => d.body_aspect.0 = parse_value(&e)?,
                ("data", "aspect_max") => d.body_aspect.1 = parse_value(&e)?,
                ("data", "noise") => d.noise = parse_value(&e)?,
                ("data", "seed") => d.seed = parse_value(&e)?,
                ("model", "variant") => c.variant = parse_value(&e)?,
                ("model", "kernel_size") => c.kernel_size = parse_value(&e)?,
                ("train", "lr") => t.lr = parse_value(&e)?,
                ("train", "momentum") => t.momentum = parse_value(&e)?,
                ("train", "epochs") => t.epochs = parse_value(&e)?,
                ("train", "batch_size") => t.batch_size = parse_value(&e)?,
                ("train", "lr_decay") => t.lr_decay = parse_value(&e)?,
                ("train", "lr_decay_every") => t.lr_decay_every = parse_value(&e)?,
                ("train", "seed") => t.seed = parse_value(&e)?,
                ("train", "log_eval_samples") => c.log_eval_samples = parse_value(&e)?,
                ("run", "out") => c.out = PathBuf::from(e.value),
                ("eval", "bilinear") => c.bilinear = parse_value(&e)?,
                ("eval", "deltas") => c.deltas = parse_list(&e)?,
                ("sweep", "variants") => c.sweep_variants = parse_list(&e)?,
                ("visualize", "samples") => c.visualize_samples = parse_list(&e)?,
                (s, k) => {
                    return Err(ConfigError::Parse {
                        line: e.line,
                        message: format!("unknown key '{k}' in section [{s}]"),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: rfga_core::Error| ConfigError::Invalid(e.to_string());
        self.data.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        if self.kernel_size % 2 == 0 {
            return Err(ConfigError::Invalid(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.deltas.is_empty() || self.deltas.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(ConfigError::Invalid(format!("bad IoU thresholds {:?}", self.deltas)));
        }
        Ok(())
    }

    /// The effective configuration in the same format `parse` reads.
    pub fn to_text(&self) -> String {
        let (d, t) = (&self.data, &self.train);
        let mut s = String::new();
        let _ = write!(
            s,
            "[data]\nn_classes = {}\ntrain_per_class = {}\ntest_per_class = {}\nimage_size = {}\n\
             patch_min = {}\npatch_max = {}\nbody_min = {}\nbody_max = {}\naspect_min = {}\n\
             aspect_max = {}\nnoise = {}\nseed = {}\n\n",
            d.n_classes,
            d.train_per_class,
            d.test_per_class,
            d.image_size,
            d.patch_size.0,
            d.patch_size.1,
            d.body_length.0,
            d.body_length.1,
            d.body_aspect.0,
            d.body_aspect.1,
            d.noise,
            d.seed
        );
        let _ = write!(
            s,
            "[model]\nvariant = {}\nkernel_size = {}\n\n",
            self.variant, self.kernel_size
        );
        let _ = write!(
            s,
            "[train]\nlr = {}\nmomentum = {}\nepochs = {}\nbatch_size = {}\nlr_decay = {}\n\
             lr_decay_every = {}\nseed = {}\nlog_eval_samples = {}\n\n",
            t.lr,
            t.momentum,
            t.epochs,
            t.batch_size,
            t.lr_decay,
            t.lr_decay_every,
            t.seed,
            self.log_eval_samples
        );
        let _ = write!(s, "[run]\nout = {}\n\n", self.out.display());
        let _ = write!(
            s,
            "[eval]\nbilinear = {}\ndeltas = {}\n\n",
            self.bilinear,
            join(&self.deltas)
        );
        let _ = write!(s, "[sweep]\nvariants = {}\n\n", join(&self.sweep_variants));
        let _ = writeln!(s, "[visualize]\nsamples = {}", join(&self.visualize_samples));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn values_override_defaults() {
        let c = ExperimentConfig::parse(
            "# comment\n[data]\nn_classes = 4  # trailing\n[model]\nvariant = cam_baseline\n\
             [train]\nlr = 0.5\n[sweep]\nvariants = cam_baseline, rfga_residual\n",
        )
        .unwrap();
        assert_eq!(c.data.n_classes, 4);
        assert_eq!(c.variant, Variant::CamBaseline);
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.sweep_variants, vec![Variant::CamBaseline, Variant::RfgaResidual]);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("[data]\nn_classes = four\n", 2),
            ("[data]\n\nnonsense\n", 3),
            ("n_classes = 4\n", 1),
            ("[data\n", 1),
            ("[train]\nepochs = 3\nepochs = 4\n", 3),
            ("[model]\ncolour = blue\n", 2),
            ("[model]\nvariant = fancy\n", 2),
        ];
        for (text, line) in cases {
            match ExperimentConfig::parse(text) {
                Err(ConfigError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        let msg = ExperimentConfig::parse("[data]\nn_classes = x\n").unwrap_err().to_string();
        assert!(msg.starts_with("line 2:"), "{msg}");
    }

    #[test]
    fn semantic_errors() {
        assert!(matches!(
            ExperimentConfig::parse("[train]\nbatch_size = 1\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(ExperimentConfig::parse("[model]\nkernel_size = 4\n").is_err());
    }

    #[test]
    fn text_round_trips() {
        let mut c = ExperimentConfig::default();
        c.data.noise = 0.125;
        c.train.lr = 0.003;
        c.variant = Variant::RfgaWidthOnly;
        c.visualize_samples = vec![5, 9];
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }
}
