//! Loading JSON configs over built-in defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// A usage or configuration problem; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Recursively overlay `patch` onto `base`. Objects merge key by key,
/// everything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Deserialize `value`, reporting failures with a JSON pointer.
pub fn from_value<T: DeserializeOwned>(value: Value) -> anyhow::Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let at = pointer(e.path());
        usage(format!("invalid config at {at}: {}", e.into_inner()))
    })
}

/// Defaults of `T`, overlaid with the file at `path` if given. A run
/// manifest is accepted too: its recorded config is used, provided it was
/// written by the same subcommand.
pub fn load<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>, subcommand: &str) -> anyhow::Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = path {
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut patch: Value = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        if let Some(obj) = patch.as_object() {
            if let (Some(sub), Some(cfg)) = (obj.get("subcommand"), obj.get("config")) {
                if sub != subcommand {
                    return Err(usage(format!(
                        "manifest {} was written by {sub}, not {subcommand:?}",
                        path.display()
                    )));
                }
                patch = cfg.clone();
            }
        }
        if !patch.is_object() {
            return Err(usage(format!("config {} must be a JSON object", path.display())));
        }
        merge(&mut value, patch);
    }
    from_value(value)
}

/// Route config validation failures from the core to exit code 2.
pub fn checked(r: lppls_core::Result<()>) -> anyhow::Result<()> {
    r.map_err(|e| match e {
        lppls_core::LpplsError::InvalidConfig { .. } => usage(e.to_string()),
        e => e.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use lppls_core::lm::LmConfig;
    use serde_json::json;

    #[test]
    fn merge_is_deep() {
        let mut base = json!({"a": {"b": 1, "c": 2}, "d": [1, 2]});
        merge(&mut base, json!({"a": {"c": 5}, "d": [7]}));
        assert_eq!(base, json!({"a": {"b": 1, "c": 5}, "d": [7]}));
    }

    #[test]
    fn errors_carry_pointers() {
        let mut v = serde_json::to_value(LmConfig::default()).unwrap();
        merge(&mut v, json!({"bounds": {"tc": [0.9, "x"]}}));
        let e = from_value::<LmConfig>(v).unwrap_err().to_string();
        assert!(e.contains("/bounds/tc/1"), "{e}");
        let mut v = serde_json::to_value(LmConfig::default()).unwrap();
        merge(&mut v, json!({"startz": 3}));
        let e = from_value::<LmConfig>(v).unwrap_err().to_string();
        assert!(e.contains("unknown field `startz`"), "{e}");
    }
}
