//! Run configuration: a flat `key = value` file (or a JSON object) layered
//! under command-line flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Parses a config file body. JSON objects are taken as-is; otherwise each
/// non-empty, non-`#` line is `key = value`, where the value is read as JSON
/// when it parses as JSON and as a bare string otherwise. Dashes in keys are
/// treated as underscores.
pub fn parse(text: &str) -> Result<Map<String, Value>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return match serde_json::from_str(trimmed)? {
            Value::Object(m) => Ok(normalize(m)),
            _ => Err(Error::Config("JSON config must be an object".into())),
        };
    }
    let mut map = Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        let v = v.trim();
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        map.insert(key, value);
    }
    Ok(map)
}

fn normalize(m: Map<String, Value>) -> Map<String, Value> {
    m.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect()
}

pub fn load(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

/// Resolves settings: defaults of `T`, then the optional config file, then
/// `flags` (serialized with unset options skipped). Unknown keys are errors
/// when `T` denies them.
pub fn resolve<T, F>(file: Option<&Path>, flags: &F) -> Result<T>
where
    T: DeserializeOwned,
    F: Serialize,
{
    let mut map = match file {
        Some(p) => load(p)?,
        None => Map::new(),
    };
    match serde_json::to_value(flags)? {
        Value::Object(over) => map.extend(over),
        _ => return Err(Error::Config("flags must serialize to an object".into())),
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        gamma: f64,
        t_min: usize,
        mode: String,
        no_rep: bool,
    }

    impl Default for Demo {
        fn default() -> Self {
            Self {
                gamma: 0.96,
                t_min: 4,
                mode: "prioritized".into(),
                no_rep: false,
            }
        }
    }

    #[derive(Serialize)]
    struct Flags {
        #[serde(skip_serializing_if = "Option::is_none")]
        t_min: Option<usize>,
    }

    #[test]
    fn key_value_and_json_agree() {
        let kv = parse("# comment\ngamma = 0.5\nt-min=7\nmode = vanilla\nno_rep = true\n").unwrap();
        let js = parse(r#"{"gamma":0.5,"t-min":7,"mode":"vanilla","no_rep":true}"#).unwrap();
        assert_eq!(kv, js);
    }

    #[test]
    fn flags_override_file_and_defaults_fill_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        fs::write(&p, "gamma = 0.5\nt_min = 7\n").unwrap();
        let d: Demo = resolve(Some(&p), &Flags { t_min: Some(9) }).unwrap();
        assert_eq!(d.gamma, 0.5);
        assert_eq!(d.t_min, 9);
        assert_eq!(d.mode, "prioritized");
        let d: Demo = resolve(None, &Flags { t_min: None }).unwrap();
        assert_eq!(d, Demo::default());
    }

    #[test]
    fn unknown_keys_and_bad_lines_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        fs::write(&p, "gamma = 0.5\nbogus = 1\n").unwrap();
        assert!(resolve::<Demo, _>(Some(&p), &Flags { t_min: None }).is_err());
        assert!(parse("no equals sign").is_err());
        assert!(parse("[1, 2]").is_err());
    }
}
