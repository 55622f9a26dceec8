//! Run configuration: flat `section.key = value` text shared by every
//! subcommand. Bare training keys (`learning_rate = …`) are accepted too.

use garnn::data::{SplitSpec, SyntheticConfig};
use garnn::model::{ModelConfig, Variant};
use garnn::training::{parse_key_values, TrainConfig};
use garnn::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub history: usize,
    pub horizon: usize,
    pub split: SplitSpec,
    pub days: usize,
    pub interval_minutes: f64,
    /// Append a time-of-day channel to wall-clock records that lack one.
    pub encode_timestamp: bool,
    /// Largest shift of the time-lag sweep, in samples; `None` means `H`.
    pub max_lag: Option<usize>,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            history: 48,
            horizon: 6,
            split: SplitSpec::default(),
            days: 14,
            interval_minutes: 5.0,
            encode_timestamp: true,
            max_lag: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub variant: Variant,
    pub layers: usize,
    pub alpha: f64,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub hidden_dim: usize,
    pub head_hidden: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::new(1, Variant::Gatv2);
        ModelSettings {
            variant: m.variant,
            layers: m.layers,
            alpha: m.alpha,
            embed_dim: m.embed_dim,
            attn_dim: m.attn_dim,
            hidden_dim: m.hidden_dim,
            head_hidden: m.head_hidden,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, n_vars: usize) -> ModelConfig {
        ModelConfig {
            n_vars,
            embed_dim: self.embed_dim,
            attn_dim: self.attn_dim,
            hidden_dim: self.hidden_dim,
            head_hidden: self.head_hidden,
            layers: self.layers,
            variant: self.variant,
            alpha: self.alpha,
        }
    }
}

/// Random-draw sizes for `verify-theorems`.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifySettings {
    pub draws: usize,
    pub n_vars: usize,
    pub timesteps: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            draws: 200,
            n_vars: 5,
            timesteps: 12,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: DataSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub verify: VerifySettings,
    /// `--alpha` given on the command line; replaces a loaded checkpoint's slope.
    pub alpha_override: Option<f64>,
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key `{key}`"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        Self::parse(&text)
    }

    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or(("train", key));
        match section {
            "data" => self.set_data(key, field, value),
            "model" => self.set_model(key, field, value),
            "train" => match self.train.set(field, value)? {
                true => Ok(()),
                false => Err(unknown(key)),
            },
            "synthetic" => self.set_synthetic(key, field, value),
            "verify" => {
                match field {
                    "draws" => self.verify.draws = num(key, value)?,
                    "n_vars" => self.verify.n_vars = num(key, value)?,
                    "timesteps" => self.verify.timesteps = num(key, value)?,
                    _ => return Err(unknown(key)),
                }
                Ok(())
            }
            _ => Err(unknown(key)),
        }
    }

    fn set_data(&mut self, key: &str, field: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        match field {
            "history" => d.history = num(key, value)?,
            "horizon" => d.horizon = num(key, value)?,
            "split.train" => d.split.train = num(key, value)?,
            "split.validation" => d.split.validation = num(key, value)?,
            "split.test" => d.split.test = num(key, value)?,
            "days" => d.days = num(key, value)?,
            "interval_minutes" => d.interval_minutes = num(key, value)?,
            "encode_timestamp" => d.encode_timestamp = num(key, value)?,
            "max_lag" => d.max_lag = Some(num(key, value)?),
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn set_model(&mut self, key: &str, field: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match field {
            "variant" => m.variant = value.parse()?,
            "layers" => m.layers = num(key, value)?,
            "alpha" => m.alpha = num(key, value)?,
            "embed_dim" => m.embed_dim = num(key, value)?,
            "attn_dim" => m.attn_dim = num(key, value)?,
            "hidden_dim" => m.hidden_dim = num(key, value)?,
            "head_hidden" => m.head_hidden = num(key, value)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    /// Generator constants go through their serialised form so every field
    /// is settable by name.
    fn set_synthetic(&mut self, key: &str, field: &str, value: &str) -> Result<()> {
        let mut obj = serde_json::to_value(&self.synthetic)?;
        let slot = obj
            .as_object_mut()
            .and_then(|o| o.get_mut(field))
            .ok_or_else(|| unknown(key))?;
        *slot = match slot {
            serde_json::Value::Number(_) => serde_json::json!(num::<f64>(key, value)?),
            serde_json::Value::Bool(_) => serde_json::json!(num::<bool>(key, value)?),
            _ => serde_json::Value::String(value.trim().to_string()),
        };
        self.synthetic = serde_json::from_value(obj).map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.split.validate()?;
        if self.data.history == 0 || self.data.horizon == 0 {
            return Err(Error::Config("data.history and data.horizon must be at least 1".into()));
        }
        self.model.model_config(1).validate()?;
        self.train.validate()
    }

    /// Snapshot readable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let m = &self.model;
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        line("data.history", d.history.to_string());
        line("data.horizon", d.horizon.to_string());
        line("data.split.train", d.split.train.to_string());
        line("data.split.validation", d.split.validation.to_string());
        line("data.split.test", d.split.test.to_string());
        line("data.days", d.days.to_string());
        line("data.interval_minutes", d.interval_minutes.to_string());
        line("data.encode_timestamp", d.encode_timestamp.to_string());
        if let Some(l) = d.max_lag {
            line("data.max_lag", l.to_string());
        }
        line("model.variant", m.variant.to_string());
        line("model.layers", m.layers.to_string());
        line("model.alpha", m.alpha.to_string());
        line("model.embed_dim", m.embed_dim.to_string());
        line("model.attn_dim", m.attn_dim.to_string());
        line("model.hidden_dim", m.hidden_dim.to_string());
        line("model.head_hidden", m.head_hidden.to_string());
        for l in self.train.to_text().lines() {
            out.push_str("train.");
            out.push_str(l);
            out.push('\n');
        }
        if let Ok(serde_json::Value::Object(o)) = serde_json::to_value(&self.synthetic) {
            for (k, v) in o {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                out.push_str(&format!("synthetic.{k} = {v}\n"));
            }
        }
        out.push_str(&format!("verify.draws = {}\n", self.verify.draws));
        out.push_str(&format!("verify.n_vars = {}\n", self.verify.n_vars));
        out.push_str(&format!("verify.timesteps = {}\n", self.verify.timesteps));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("model.variant", "gat").unwrap();
        cfg.set("lambda", "0.001").unwrap();
        cfg.set("data.split.train", "0.5").unwrap();
        cfg.set("data.split.validation", "0.3").unwrap();
        cfg.set("synthetic.meal_gain", "2.25").unwrap();
        cfg.set("synthetic.timestamp_channel", "false").unwrap();
        cfg.set("data.max_lag", "9").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.lambda, 1e-3);
        assert_eq!(back.synthetic.meal_gain, 2.25);
    }

    #[test]
    fn bad_keys_and_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("model.depth", "2").is_err());
        assert!(cfg.set("nonsense", "2").is_err());
        assert!(cfg.set("data.history", "many").is_err());
        assert!(cfg.set("model.variant", "gcn").is_err());
        assert!(cfg.set("synthetic.unknown", "1").is_err());
        assert!(cfg.set("synthetic.meal_gain", "x").is_err());
        cfg.set("data.split.test", "0.5").unwrap();
        assert!(cfg.validate().is_err());
    }
}
