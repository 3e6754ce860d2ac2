//! Flat `key = value` configuration.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Later assignments win, and command-line `--set key=value` pairs are
//! applied after the file. Unknown keys and unparsable values are errors.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use envae::metrics::LatentSource;
use envae::model::{ElboMode, LatentReduction};
use envae::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every documented key with its default, as printed by `--help`.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "path to the input CSV (no default)"),
    ("label", "label column name [label]"),
    ("seed", "master seed [0]"),
    ("m", "number of feature groups / experts [1]"),
    ("latent_dim", "latent width L [16]"),
    ("hidden", "expert hidden widths, comma separated, or auto [auto]"),
    ("baseline_hidden", "single-model widths the budget is matched to [128,128]"),
    ("dropout", "encoder/decoder dropout [0.5]"),
    ("batch_norm", "batch-norm in hidden layers [true]"),
    ("prior", "include the N(0, I) expert in every product [true]"),
    ("elbo_mode", "auto | full_enumeration | mixture_sample [auto]"),
    ("mixture_samples", "subsets drawn per row in mixture_sample mode [1]"),
    ("beta_max", "final KL weight [1]"),
    ("beta_warmup", "epochs of linear beta warm-up [100]"),
    ("lr", "Adam learning rate [0.001]"),
    ("beta1", "Adam beta1 [0.9]"),
    ("beta2", "Adam beta2 [0.999]"),
    ("adam_eps", "Adam epsilon [1e-8]"),
    ("batch_size", "mini-batch size [32]"),
    ("max_epochs", "epoch cap [10000]"),
    ("patience", "early-stopping patience in epochs [100]"),
    ("clip", "global gradient-norm clip [2.5]"),
    ("supervised", "train with a classification head [false]"),
    ("folds", "cross-validation folds [5]"),
    ("valid_fraction", "validation share of all samples [0.08]"),
    ("scale", "train | whole: rows the min-max scaler is fit on [train]"),
    ("train_size", "stratified train-set reduction per fold, or none [none]"),
    ("clf_hidden", "downstream classifier widths [64,64]"),
    ("clf_dropout", "downstream classifier dropout [0.5]"),
    ("clf_batch_norm", "downstream classifier batch-norm [true]"),
    ("clf_batch_size", "downstream classifier batch size [32]"),
    ("clf_max_epochs", "downstream classifier epoch cap [10000]"),
    ("clf_patience", "downstream classifier patience [100]"),
    ("clf_seeds", "classifier seeds per fold [5]"),
    ("tc_source", "mean | sample latents for total correlation [mean]"),
    ("tc_split", "all | train | test rows for total correlation [all]"),
    ("reduction", "poe_full | mixture_mean for missing groups [poe_full]"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcSplit {
    All,
    Train,
    Test,
}

/// Resolved configuration of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub data: Option<String>,
    pub label: String,
    pub train: TrainConfig,
    pub tc_source: LatentSource,
    pub tc_split: TcSplit,
    pub reduction: LatentReduction,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            data: None,
            label: "label".into(),
            train: TrainConfig::default(),
            tc_source: LatentSource::Mean,
            tc_split: TcSplit::All,
            reduction: LatentReduction::PoeFull,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!("{key}: expected true/false, got '{value}'"))),
    }
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    let widths = value
        .split(',')
        .map(|w| parse::<usize>(key, w.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if widths.iter().any(|&w| w == 0) {
        return Err(CliError::Usage(format!("{key}: widths must be positive")));
    }
    Ok(widths)
}

impl Settings {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        match key {
            "data" => self.data = Some(value.to_string()),
            "label" => self.label = value.to_string(),
            "seed" => t.seed = parse(key, value)?,
            "m" => t.model.n_groups = parse(key, value)?,
            "latent_dim" => t.model.latent_dim = parse(key, value)?,
            "hidden" => {
                t.model.hidden = match value {
                    "auto" => None,
                    _ => Some(parse_widths(key, value)?),
                }
            }
            "baseline_hidden" => t.model.baseline_hidden = parse_widths(key, value)?,
            "dropout" => t.model.dropout = parse(key, value)?,
            "batch_norm" => t.model.batch_norm = parse_bool(key, value)?,
            "prior" => t.model.include_prior = parse_bool(key, value)?,
            "elbo_mode" => {
                t.model.elbo_mode = match value {
                    "auto" => None,
                    "full_enumeration" => Some(ElboMode::FullEnumeration),
                    "mixture_sample" => Some(ElboMode::MixtureSample {
                        samples: match t.model.elbo_mode {
                            Some(ElboMode::MixtureSample { samples }) => samples,
                            _ => 1,
                        },
                    }),
                    _ => return Err(CliError::Usage(format!("elbo_mode: unknown mode '{value}'"))),
                }
            }
            "mixture_samples" => {
                let samples = parse(key, value)?;
                t.model.elbo_mode = Some(ElboMode::MixtureSample { samples });
            }
            "beta_max" => t.model.beta = parse(key, value)?,
            "beta_warmup" => t.beta_warmup_epochs = parse(key, value)?,
            "lr" => t.adam.lr = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "clip" => t.clip = parse(key, value)?,
            "supervised" => t.supervised = parse_bool(key, value)?,
            "folds" => t.folds = parse(key, value)?,
            "valid_fraction" => t.valid_fraction = parse(key, value)?,
            "scale" => {
                t.scale_whole_dataset = match value {
                    "train" => false,
                    "whole" => true,
                    _ => return Err(CliError::Usage(format!("scale: expected train or whole, got '{value}'"))),
                }
            }
            "train_size" => {
                t.train_size = match value {
                    "none" => None,
                    _ => Some(parse(key, value)?),
                }
            }
            "clf_hidden" => t.classifier.hidden = parse_widths(key, value)?,
            "clf_dropout" => t.classifier.dropout = parse(key, value)?,
            "clf_batch_norm" => t.classifier.batch_norm = parse_bool(key, value)?,
            "clf_batch_size" => t.classifier.batch_size = parse(key, value)?,
            "clf_max_epochs" => t.classifier.max_epochs = parse(key, value)?,
            "clf_patience" => t.classifier.patience = parse(key, value)?,
            "clf_seeds" => t.classifier.n_seeds = parse(key, value)?,
            "tc_source" => {
                self.tc_source = match value {
                    "mean" => LatentSource::Mean,
                    "sample" => LatentSource::Sample,
                    _ => return Err(CliError::Usage(format!("tc_source: expected mean or sample, got '{value}'"))),
                }
            }
            "tc_split" => {
                self.tc_split = match value {
                    "all" => TcSplit::All,
                    "train" => TcSplit::Train,
                    "test" => TcSplit::Test,
                    _ => return Err(CliError::Usage(format!("tc_split: expected all, train or test, got '{value}'"))),
                }
            }
            "reduction" => {
                self.reduction = match value {
                    "poe_full" => LatentReduction::PoeFull,
                    "mixture_mean" => LatentReduction::MixtureMean,
                    _ => return Err(CliError::Usage(format!("reduction: expected poe_full or mixture_mean, got '{value}'"))),
                }
            }
            _ => return Err(CliError::Usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got '{pair}'")))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies every assignment in a config text.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| CliError::Usage(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Checks cross-key constraints.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))
    }
}

/// Reads `path` (if any), then applies overrides in order.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<Settings, CliError> {
    let mut s = Settings::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", p.display())))?;
        s.apply_text(&text)?;
    }
    for o in overrides {
        s.set_pair(o)?;
    }
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let s = parse_config(None, &[]).unwrap();
        assert_eq!(s, Settings::default());
        assert_eq!(s.train.adam.lr, 0.001);
        assert_eq!(s.train.batch_size, 32);
        assert_eq!(s.train.patience, 100);
        assert_eq!(s.train.clip, 2.5);
        assert_eq!(s.train.beta_warmup_epochs, 100);
        assert_eq!(s.train.model.latent_dim, 16);
        assert!(s.train.model.include_prior);
    }

    #[test]
    fn beta_value() {
        let mut s = Settings::default();
        s.apply_text("# lung\nbeta_max = 0.125\n\n").unwrap();
        assert_eq!(s.train.model.beta, 0.125);
    }

    #[test]
    fn conflicting_mode_is_rejected() {
        let err = parse_config(None, &["m=9".into(), "elbo_mode=full_enumeration".into()]).unwrap_err();
        assert!(err.to_string().contains("511"), "{err}");
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let mut s = Settings::default();
        assert!(s.set("nope", "1").is_err());
        assert!(s.set("lr", "fast").is_err());
        assert!(s.apply_text("m 4").is_err());
    }

    #[test]
    fn documented_keys_are_accepted() {
        let samples = [
            ("data", "x.csv"),
            ("hidden", "32,32"),
            ("baseline_hidden", "128,128"),
            ("elbo_mode", "mixture_sample"),
            ("scale", "whole"),
            ("train_size", "15"),
            ("clf_hidden", "64,64"),
            ("tc_source", "sample"),
            ("tc_split", "test"),
            ("reduction", "mixture_mean"),
        ];
        for (k, _) in KEYS {
            let v = samples
                .iter()
                .find(|(s, _)| s == k)
                .map(|(_, v)| *v)
                .unwrap_or(match *k {
                    "batch_norm" | "prior" | "supervised" | "clf_batch_norm" => "true",
                    "label" => "y",
                    _ => "1",
                });
            Settings::default().set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }
}
