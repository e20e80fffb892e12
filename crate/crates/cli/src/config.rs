//! Loading of pipeline configuration files.

use std::path::Path;

use anyhow::{bail, Context, Result};
use diwr_core::pipeline::PipelineConfig;
use serde_json::Value;

/// Reads a TOML or JSON configuration; missing keys take built-in defaults,
/// unknown keys are rejected.
pub fn load(path: &Path) -> Result<PipelineConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text)
            .with_context(|| format!("parsing JSON config {}", path.display()))?,
        Some("toml") => {
            let table: toml::Table = toml::from_str(&text)
                .with_context(|| format!("parsing TOML config {}", path.display()))?;
            serde_json::to_value(table)?
        }
        _ => bail!("config {} must end in .toml or .json", path.display()),
    };
    let reference = serde_json::to_value(PipelineConfig::default())?;
    check_keys(&value, &reference, "")?;
    serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))
}

fn check_keys(value: &Value, reference: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(map), Value::Object(known)) = (value, reference) else {
        return Ok(());
    };
    for (key, v) in map {
        let Some(r) = known.get(key) else {
            bail!("unknown config key {prefix}{key}");
        };
        check_keys(v, r, &format!("{prefix}{key}."))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = write(&dir, "a.toml", "t_max = 3\nseed = 7\n[rmsprop]\ndecay = 0.8\n");
        let j = write(&dir, "a.json", r#"{"t_max": 3, "seed": 7, "rmsprop": {"decay": 0.8}}"#);
        let a = load(&t).unwrap();
        assert_eq!(a, load(&j).unwrap());
        assert_eq!(a.optim.t_max, 3);
        assert_eq!(a.optim.rmsprop.decay, 0.8);
        assert_eq!(a.optim.rmsprop.learning_rate_c, PipelineConfig::default().optim.rmsprop.learning_rate_c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "b.toml", "t_maxx = 3\n");
        assert!(load(&p).unwrap_err().to_string().contains("t_maxx"));
        let p = write(&dir, "c.json", r#"{"rmsprop": {"speed": 1}}"#);
        assert!(load(&p).unwrap_err().to_string().contains("rmsprop.speed"));
    }

    #[test]
    fn bad_extension_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.yaml", "t_max: 3\n");
        assert!(load(&p).is_err());
    }
}
