use std::path::Path;

use fruitmon::{Error, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u64 = 1;

/// A JSON configuration file: `schema_version` plus named sections.
#[derive(Debug, Default)]
pub struct ConfigFile {
    sections: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(ConfigFile::default()) };
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(mut sections) = value else {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        };
        match sections.remove("schema_version").and_then(|v| v.as_u64()) {
            Some(SCHEMA_VERSION) => Ok(ConfigFile { sections }),
            Some(v) => Err(Error::Config(format!("{}: unsupported schema_version {v}", path.display()))),
            None => Err(Error::Config(format!("{}: missing schema_version", path.display()))),
        }
    }

    /// The named section, or its defaults when absent.
    pub fn section<T: DeserializeOwned + Default>(&self, key: &str) -> Result<T> {
        match self.sections.get(key) {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("section '{key}': {e}"))),
            None => Ok(T::default()),
        }
    }

    pub fn value<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        self.sections
            .get(key)
            .map(|v| serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("'{key}': {e}"))))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn sections_default_when_absent() {
        let (_d, p) = write(r#"{"schema_version": 1, "pairs": 3, "orchard": {"fruit_count": [4, 4]}}"#);
        let c = ConfigFile::load(Some(&p)).unwrap();
        let o: fruitmon::synth::OrchardConfig = c.section("orchard").unwrap();
        assert_eq!(o.fruit_count, [4, 4]);
        assert_eq!(o.drift_sigma, 0.01);
        assert_eq!(c.value::<usize>("pairs").unwrap(), Some(3));
        let m: fruitmon::matcher::MatchConfig = c.section("matcher").unwrap();
        assert_eq!(m, Default::default());
    }

    #[test]
    fn schema_version_is_required() {
        let (_d, p) = write(r#"{"orchard": {}}"#);
        assert!(matches!(ConfigFile::load(Some(&p)), Err(Error::Config(_))));
        let (_d, p) = write(r#"{"schema_version": 2}"#);
        assert!(matches!(ConfigFile::load(Some(&p)), Err(Error::Config(_))));
        let (_d, p) = write("not json");
        assert!(matches!(ConfigFile::load(Some(&p)), Err(Error::Config(_))));
    }
}
