//! Job configuration shared by the command line and the HTTP service.
//!
//! A job config is a JSON object tagged by `kind`; the remaining fields are
//! those of the pipeline's own configuration, all optional:
//!
//! ```json
//! {"kind": "strotss", "alpha": 16, "scales": 4, "seed": 0}
//! {"kind": "nnst", "alpha_blend": 0.25, "color_post": true}
//! {"kind": "dst", "base": "strotss", "regime": "low"}
//! ```

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use stylecore::dst::{DstBase, DstConfig, Regime};
use stylecore::nnst::NnstConfig;
use stylecore::strotss::StrotssConfig;

fn enabled() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnstJob {
    #[serde(flatten)]
    pub config: NnstConfig,
    #[serde(default = "enabled")]
    pub color_post: bool,
}

impl Default for NnstJob {
    fn default() -> Self {
        Self { config: NnstConfig::default(), color_post: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum JobConfig {
    Strotss(StrotssConfig),
    Nnst(NnstJob),
    Dst(DstConfig),
}

/// A config field that failed to parse or validate.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for FieldError {}

fn field_err(field: impl Into<String>, message: impl Into<String>) -> FieldError {
    FieldError { field: field.into(), message: message.into() }
}

/// Keys of `given` that do not survive a round trip through the typed
/// config, i.e. misspelled or unsupported fields.
fn unknown_keys(given: &Value, known: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(g), Value::Object(k)) = (given, known) else { return };
    for (key, v) in g {
        let here = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match k.get(key) {
            None => out.push(here),
            Some(kv) => unknown_keys(v, kv, &here, out),
        }
    }
}

impl JobConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            JobConfig::Strotss(_) => "strotss",
            JobConfig::Nnst(_) => "nnst",
            JobConfig::Dst(_) => "dst",
        }
    }

    /// Parses and validates a config document. Unknown fields are errors.
    pub fn parse(text: &str) -> Result<Self, FieldError> {
        let given: Value = serde_json::from_str(text).map_err(|e| field_err("config", e.to_string()))?;
        let cfg: JobConfig = serde_json::from_value(given.clone()).map_err(|e| field_err("config", e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&given, &cfg.to_value(), "", &mut unknown);
        if let Some(k) = unknown.first() {
            return Err(field_err(format!("config.{k}"), "unknown field"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let r = match self {
            JobConfig::Strotss(c) => c.validate(),
            JobConfig::Nnst(n) => n.config.validate(),
            JobConfig::Dst(d) => d.validate(),
        };
        r.map_err(|e| field_err("config", e.to_string()))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("plain data serializes")
    }

    /// The config with derived values spelled out: for DST, the `(alpha,
    /// beta, gamma)` the run will actually use.
    pub fn resolved(&self) -> Value {
        let mut v = self.to_value();
        if let (JobConfig::Dst(d), Value::Object(m)) = (self, &mut v) {
            let (alpha, beta, gamma) = d.resolved_weights();
            m.insert("resolved".into(), json!({"alpha": alpha, "beta": beta, "gamma": gamma}));
        }
        v
    }
}

/// `(beta, gamma)` for every base and regime, as offered to the UI.
pub fn regime_table() -> Value {
    let mut out = Map::new();
    for (base, name) in [(DstBase::Strotss, "strotss"), (DstBase::Gram, "gram")] {
        let mut row = Map::new();
        for (regime, key) in [(Regime::Low, "low"), (Regime::Med, "med"), (Regime::High, "high")] {
            let (beta, gamma) = regime.weights(base);
            row.insert(key.into(), json!({"beta": beta, "gamma": gamma}));
        }
        out.insert(name.into(), Value::Object(row));
    }
    Value::Object(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = JobConfig::parse(r#"{"kind": "strotss", "alpha": 8}"#).unwrap();
        let JobConfig::Strotss(c) = cfg else { panic!("wrong kind") };
        assert_eq!(c.alpha, 8.0);
        assert_eq!(c.scales, StrotssConfig::default().scales);
        let JobConfig::Nnst(n) = JobConfig::parse(r#"{"kind": "nnst"}"#).unwrap() else { panic!("wrong kind") };
        assert!(n.color_post);
        assert_eq!(n.config, NnstConfig::default());
    }

    #[test]
    fn round_trip() {
        for cfg in [
            JobConfig::Strotss(StrotssConfig { seed: 3, ..Default::default() }),
            JobConfig::Nnst(NnstJob { color_post: false, ..Default::default() }),
            JobConfig::Dst(DstConfig { regime: Regime::High, beta: Some(2.0), ..Default::default() }),
        ] {
            let text = cfg.to_value().to_string();
            assert_eq!(JobConfig::parse(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_and_invalid_fields_are_named() {
        let e = JobConfig::parse(r#"{"kind": "strotss", "alpah": 3}"#).unwrap_err();
        assert_eq!(e.field, "config.alpah");
        let e = JobConfig::parse(r#"{"kind": "dst", "strotss": {"stepz": 3}}"#).unwrap_err();
        assert_eq!(e.field, "config.strotss.stepz");
        let e = JobConfig::parse(r#"{"kind": "paint"}"#).unwrap_err();
        assert_eq!(e.field, "config");
        let e = JobConfig::parse(r#"{"kind": "nnst", "alpha_blend": 2}"#).unwrap_err();
        assert!(e.message.contains("alpha-blend"), "{e}");
    }

    #[test]
    fn dst_regimes_resolve() {
        let cfg = JobConfig::parse(r#"{"kind": "dst", "base": "strotss", "regime": "low"}"#).unwrap();
        assert_eq!(cfg.resolved()["resolved"]["beta"], 0.3);
        assert_eq!(cfg.resolved()["resolved"]["gamma"], 75.0);
        let t = regime_table();
        assert_eq!(t["gram"]["high"], json!({"beta": 15.0, "gamma": 100.0}));
        assert_eq!(t["strotss"]["med"], json!({"beta": 0.5, "gamma": 50.0}));
    }
}
