//! Flat `key = value` run configuration covering training, optimizer,
//! energy, architecture and data-generation settings.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ofg_core::data::{FieldSpec, PhantomSpec};
use ofg_core::energy::Similarity;
use ofg_core::optimizer::Method;
use ofg_core::training::TrainConfig;
use ofg_core::{OfgError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
    pub field: FieldSpec,
    /// Pairs at the end of a dataset held out for validation.
    pub val_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::desk(),
            phantom: PhantomSpec::default(),
            field: FieldSpec::default(),
            val_pairs: 8,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| OfgError::InvalidConfig(format!("bad value '{value}' for key '{key}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn similarity_name(s: Similarity) -> &'static str {
    match s {
        Similarity::Ncc => "ncc",
        Similarity::Mse => "mse",
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Adam => "adam",
        Method::Sgd => "sgd",
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "mode",
    "epochs",
    "lr",
    "weight_decay",
    "seed",
    "val_pairs",
    "optim.method",
    "optim.lr",
    "optim.steps",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.downsample",
    "energy.similarity",
    "energy.window",
    "energy.reg_weight",
    "energy.epsilon",
    "blend.every_n",
    "blend.alpha",
    "blend.beta",
    "blend.prob",
    "selftrain.stage_len",
    "selftrain.label_opt_steps",
    "arch.channels",
    "arch.slope",
    "data.dims",
    "data.shapes",
    "data.intensities",
    "data.labels",
    "data.noise_sigma",
    "data.amplitude",
    "data.sigma",
    "data.field_seed",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let v = value.trim();
        match key {
            "mode" => t.mode = v.parse()?,
            "epochs" => t.epochs = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "val_pairs" => self.val_pairs = parse(key, v)?,
            "optim.method" => t.optim.method = v.parse()?,
            "optim.lr" => t.optim.lr = parse(key, v)?,
            "optim.steps" => t.optim.steps = parse(key, v)?,
            "optim.beta1" => t.optim.beta1 = parse(key, v)?,
            "optim.beta2" => t.optim.beta2 = parse(key, v)?,
            "optim.eps" => t.optim.adam_eps = parse(key, v)?,
            "optim.downsample" => t.optim.downsample = parse(key, v)?,
            "energy.similarity" => t.optim.energy.similarity = v.parse()?,
            "energy.window" => t.optim.energy.ncc_window = parse(key, v)?,
            "energy.reg_weight" => t.optim.energy.reg_weight = parse(key, v)?,
            "energy.epsilon" => t.optim.energy.ncc_epsilon = parse(key, v)?,
            "blend.every_n" => t.blend.every_n = parse(key, v)?,
            "blend.alpha" => t.blend.alpha = parse(key, v)?,
            "blend.beta" => t.blend.beta = parse(key, v)?,
            "blend.prob" => t.blend.prob = parse(key, v)?,
            "selftrain.stage_len" => t.selftrain.stage_len = parse(key, v)?,
            "selftrain.label_opt_steps" => t.selftrain.label_opt_steps = parse(key, v)?,
            "arch.channels" => t.arch.channels = parse_list(key, v)?,
            "arch.slope" => t.arch.leaky_slope = parse(key, v)?,
            "data.dims" => {
                let d: Vec<usize> = parse_list(key, v)?;
                self.phantom.dims = match d[..] {
                    [n] => [n; 3],
                    [a, b, c] => [a, b, c],
                    _ => {
                        return Err(OfgError::InvalidConfig(format!(
                            "data.dims takes 1 or 3 values, got '{v}'"
                        )))
                    }
                };
            }
            "data.shapes" => self.phantom.shapes = parse(key, v)?,
            "data.intensities" => self.phantom.intensities = parse_list(key, v)?,
            "data.labels" => self.phantom.labels = parse_list(key, v)?,
            "data.noise_sigma" => self.phantom.noise_sigma = parse(key, v)?,
            "data.amplitude" => self.field.amplitude = parse(key, v)?,
            "data.sigma" => self.field.sigma = parse(key, v)?,
            "data.field_seed" => self.field.seed = parse(key, v)?,
            other => {
                return Err(OfgError::InvalidConfig(format!(
                    "unknown config key '{other}'"
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let s = match key {
            "mode" => t.mode.to_string(),
            "epochs" => t.epochs.to_string(),
            "lr" => t.lr.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "seed" => t.seed.to_string(),
            "val_pairs" => self.val_pairs.to_string(),
            "optim.method" => method_name(t.optim.method).into(),
            "optim.lr" => t.optim.lr.to_string(),
            "optim.steps" => t.optim.steps.to_string(),
            "optim.beta1" => t.optim.beta1.to_string(),
            "optim.beta2" => t.optim.beta2.to_string(),
            "optim.eps" => t.optim.adam_eps.to_string(),
            "optim.downsample" => t.optim.downsample.to_string(),
            "energy.similarity" => similarity_name(t.optim.energy.similarity).into(),
            "energy.window" => t.optim.energy.ncc_window.to_string(),
            "energy.reg_weight" => t.optim.energy.reg_weight.to_string(),
            "energy.epsilon" => t.optim.energy.ncc_epsilon.to_string(),
            "blend.every_n" => t.blend.every_n.to_string(),
            "blend.alpha" => t.blend.alpha.to_string(),
            "blend.beta" => t.blend.beta.to_string(),
            "blend.prob" => t.blend.prob.to_string(),
            "selftrain.stage_len" => t.selftrain.stage_len.to_string(),
            "selftrain.label_opt_steps" => t.selftrain.label_opt_steps.to_string(),
            "arch.channels" => join(&t.arch.channels),
            "arch.slope" => t.arch.leaky_slope.to_string(),
            "data.dims" => join(&self.phantom.dims),
            "data.shapes" => self.phantom.shapes.to_string(),
            "data.intensities" => join(&self.phantom.intensities),
            "data.labels" => join(&self.phantom.labels),
            "data.noise_sigma" => self.phantom.noise_sigma.to_string(),
            "data.amplitude" => self.field.amplitude.to_string(),
            "data.sigma" => self.field.sigma.to_string(),
            "data.field_seed" => self.field.seed.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                OfgError::InvalidConfig(format!(
                    "{origin}:{}: expected 'key = value', got '{raw}'",
                    n + 1
                ))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| e.context(format!("{origin}:{}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| OfgError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| {
                OfgError::InvalidConfig(format!("override '{o}' is not key=value"))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let v = self.get(k).expect("every listed key renders");
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ofg_core::training::TrainMode;

    #[test]
    fn render_parse_round_trip() {
        let mut a = RunConfig::default();
        a.apply_overrides(&[
            "mode=blend-prob".into(),
            "blend.prob=0.25".into(),
            "arch.channels=4,8,8".into(),
        ])
        .unwrap();
        let mut b = RunConfig::default();
        b.apply_text(&a.render(), "echo").unwrap();
        assert_eq!(a, b);
        assert_eq!(b.train.mode, TrainMode::BlendProbabilistic);
        assert_eq!(b.train.arch.channels, vec![4, 8, 8]);
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\nepochs = 3  # short\n optim.steps=5\n", "t")
            .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.optim.steps, 5);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("epoch = 3", "t").is_err());
        assert!(c.apply_text("epochs 3", "t").is_err());
        assert!(c.apply_text("epochs = three", "t").is_err());
        assert!(c.apply_text("data.dims = 1,2", "t").is_err());
        assert!(c.apply_overrides(&["mode".into()]).is_err());
    }

    #[test]
    fn every_key_settable_from_its_echo() {
        let base = RunConfig::default();
        for k in KEYS {
            let mut c = RunConfig::default();
            c.set(k, &base.get(k).unwrap()).unwrap();
            assert_eq!(c, base, "{k}");
        }
    }
}
