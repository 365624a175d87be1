//! Flat dotted-key run configuration.
//!
//! Every command publishes a schema: the fully defaulted configuration as
//! flat keys (`adam.learning_rate`, `model.base_channels`, ...). A JSON file
//! supplies values first, `--key value` flags override them, and the result
//! is type-checked against the schema before any work starts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}` for `{command}`")]
    UnknownKey { command: String, key: String },
    #[error("config key `{key}`: expected {expected}, got {got}")]
    TypeMismatch { key: String, expected: &'static str, got: String },
    #[error("missing required config key `{0}`")]
    MissingKey(String),
    #[error("flag `{0}` needs a value")]
    MissingValue(String),
    #[error("unexpected argument `{0}`; settings are given as `--key value`")]
    BadArgument(String),
    #[error("config file {path}: {detail}")]
    File { path: String, detail: String },
    #[error("config key `{key}`: {detail}")]
    Invalid { key: String, detail: String },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Bool,
    Integer,
    Number,
    String,
    List,
    /// A JSON object taken whole, e.g. a class mix.
    Object,
    /// Anything, including null; used for optional sections.
    Any,
}

impl Kind {
    fn of(v: &Value) -> Self {
        match v {
            Value::Bool(_) => Kind::Bool,
            Value::Number(n) if n.is_f64() => Kind::Number,
            Value::Number(_) => Kind::Integer,
            Value::String(_) => Kind::String,
            Value::Array(_) => Kind::List,
            Value::Object(_) => Kind::Object,
            Value::Null => Kind::Any,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Bool => "a boolean",
            Kind::Integer => "an integer",
            Kind::Number => "a number",
            Kind::String => "a string",
            Kind::List => "a list",
            Kind::Object => "an object",
            Kind::Any => "any value",
        }
    }

    fn accepts(self, v: &Value) -> bool {
        match self {
            Kind::Bool => v.is_boolean(),
            Kind::Integer => v.is_u64() || v.is_i64(),
            Kind::Number => v.is_number(),
            Kind::String => v.is_string(),
            Kind::List => v.is_array(),
            Kind::Object => v.is_object(),
            Kind::Any => true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub default: Value,
    pub kind: Kind,
    pub required: bool,
}

/// Keys, kinds and defaults accepted by one command.
#[derive(Clone, Debug, Default)]
pub struct Schema {
    entries: BTreeMap<String, Entry>,
}

impl Schema {
    /// Adds every leaf of `defaults` under `prefix`. Objects nest into dotted
    /// keys except at the paths listed in `whole`, which stay single values.
    pub fn section(mut self, prefix: &str, defaults: &impl Serialize, whole: &[&str]) -> Self {
        let v = serde_json::to_value(defaults).expect("config types serialize");
        self.flatten_into(prefix, v, whole);
        self
    }

    fn flatten_into(&mut self, key: &str, v: Value, whole: &[&str]) {
        match v {
            Value::Object(map) if !whole.contains(&key) => {
                for (k, child) in map {
                    let sub = if key.is_empty() { k } else { format!("{key}.{k}") };
                    self.flatten_into(&sub, child, whole);
                }
            }
            v => {
                let kind = Kind::of(&v);
                self.entries.insert(
                    key.to_string(),
                    Entry {
                        default: v,
                        kind,
                        required: false,
                    },
                );
            }
        }
    }

    pub fn value(mut self, key: &str, default: impl Serialize, kind: Kind) -> Self {
        let default = serde_json::to_value(default).expect("defaults serialize");
        self.entries.insert(
            key.into(),
            Entry {
                default,
                kind,
                required: false,
            },
        );
        self
    }

    /// A string key with no default that must be supplied.
    pub fn required(mut self, key: &str) -> Self {
        self.entries.insert(
            key.into(),
            Entry {
                default: Value::Null,
                kind: Kind::String,
                required: true,
            },
        );
        self
    }

    /// A string key that may stay unset.
    pub fn optional(mut self, key: &str) -> Self {
        self.entries.insert(
            key.into(),
            Entry {
                default: Value::Null,
                kind: Kind::String,
                required: false,
            },
        );
        self
    }

    pub fn entries(&self) -> &BTreeMap<String, Entry> {
        &self.entries
    }
}

/// Settings gathered from the file and flags before the schema is known.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    file: BTreeMap<String, Value>,
    flags: BTreeMap<String, String>,
}

impl Overrides {
    /// Splits `--config FILE` and `--key value` / `--key=value` arguments.
    pub fn parse(args: &[String]) -> Result<Self> {
        let mut out = Self::default();
        let mut config_file = None;
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(body) = arg.strip_prefix("--") else {
                return Err(ConfigError::BadArgument(arg.clone()));
            };
            let (key, value) = match body.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| ConfigError::MissingValue(arg.clone()))?;
                    (body.to_string(), v.clone())
                }
            };
            if key == "config" {
                config_file = Some(value);
            } else {
                out.flags.insert(key, value);
            }
        }
        if let Some(path) = config_file {
            out.file = read_flat_file(Path::new(&path))?;
        }
        Ok(out)
    }

    /// The raw value for `key` as the user wrote it, flags first.
    pub fn peek(&self, key: &str) -> Option<Value> {
        self.flags
            .get(key)
            .map(|s| Value::String(s.clone()))
            .or_else(|| self.file.get(key).cloned())
    }
}

fn read_flat_file(path: &Path) -> Result<BTreeMap<String, Value>> {
    let err = |detail: String| ConfigError::File {
        path: path.display().to_string(),
        detail,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    let Value::Object(map) = v else {
        return Err(err("top level must be a JSON object".into()));
    };
    Ok(map.into_iter().collect())
}

/// A validated, fully defaulted configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, Value>,
}

/// Layers defaults, then file values, then flags, checking keys and types.
pub fn resolve(command: &str, schema: &Schema, overrides: &Overrides) -> Result<RunConfig> {
    let lookup = |key: &str| {
        schema.entries.get(key).ok_or_else(|| ConfigError::UnknownKey {
            command: command.into(),
            key: key.into(),
        })
    };
    let mut values: BTreeMap<String, Value> =
        schema.entries.iter().map(|(k, e)| (k.clone(), e.default.clone())).collect();
    for (key, v) in &overrides.file {
        let entry = lookup(key)?;
        check(key, entry, v)?;
        values.insert(key.clone(), v.clone());
    }
    for (key, raw) in &overrides.flags {
        let entry = lookup(key)?;
        let v = match entry.kind {
            Kind::String => Value::String(raw.clone()),
            Kind::Any => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone())),
            _ => serde_json::from_str(raw).map_err(|_| ConfigError::TypeMismatch {
                key: key.clone(),
                expected: entry.kind.name(),
                got: format!("{raw:?}"),
            })?,
        };
        check(key, entry, &v)?;
        values.insert(key.clone(), v);
    }
    for (key, e) in &schema.entries {
        if e.required && values[key].is_null() {
            return Err(ConfigError::MissingKey(key.clone()));
        }
    }
    Ok(RunConfig {
        command: command.into(),
        values,
    })
}

fn check(key: &str, entry: &Entry, v: &Value) -> Result<()> {
    // optional string keys may be reset to null
    if entry.kind.accepts(v) || (v.is_null() && !entry.required && entry.default.is_null()) {
        return Ok(());
    }
    Err(ConfigError::TypeMismatch {
        key: key.into(),
        expected: entry.kind.name(),
        got: v.to_string(),
    })
}

impl RunConfig {
    pub fn values(&self) -> &BTreeMap<String, Value> {
        &self.values
    }

    pub fn raw(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or(&Value::Null)
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        serde_json::from_value(self.raw(key).clone()).map_err(|e| ConfigError::Invalid {
            key: key.into(),
            detail: e.to_string(),
        })
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.raw(key).as_str()
    }

    /// Rebuilds the nested object for the keys under `prefix` (all keys when
    /// empty), skipping the top-level keys in `exclude`, and deserializes it.
    pub fn section<T: DeserializeOwned>(&self, prefix: &str, exclude: &[&str]) -> Result<T> {
        let mut root = Map::new();
        for (key, v) in &self.values {
            let rest = if prefix.is_empty() {
                key.as_str()
            } else {
                match key.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
                    Some(r) => r,
                    None => continue,
                }
            };
            let top = rest.split('.').next().expect("split yields one item");
            if exclude.contains(&top) {
                continue;
            }
            insert_path(&mut root, rest, v.clone());
        }
        serde_json::from_value(Value::Object(root)).map_err(|e| ConfigError::Invalid {
            key: if prefix.is_empty() { "<root>".into() } else { prefix.into() },
            detail: e.to_string(),
        })
    }

    /// The resolved configuration as one JSON document, for logging.
    pub fn to_json(&self) -> String {
        let mut root = Map::new();
        for (key, v) in &self.values {
            root.insert(key.clone(), v.clone());
        }
        serde_json::to_string_pretty(&Value::Object(root)).expect("values serialize")
    }

    pub fn keys(&self) -> BTreeSet<&str> {
        self.values.keys().map(String::as_str).collect()
    }
}

fn insert_path(root: &mut Map<String, Value>, path: &str, v: Value) {
    match path.split_once('.') {
        None => {
            root.insert(path.into(), v);
        }
        Some((head, rest)) => {
            let child = root
                .entry(head.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            if !child.is_object() {
                *child = Value::Object(Map::new());
            }
            insert_path(child.as_object_mut().expect("object"), rest, v);
        }
    }
}
