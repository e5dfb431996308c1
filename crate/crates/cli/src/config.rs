//! Flat key=value configuration files.
//!
//! One shared namespace covers generation and training keys, so a single file
//! can drive a whole experiment end to end. Lines are `key=value`, `#` starts
//! a comment, blank lines are ignored, and unknown keys are errors — silent
//! typos in experiment configs are how results stop meaning anything.
//! Command-line flags override file values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sdmtl::datagen::GenConfig;
use sdmtl::trainer::TrainConfig;

const KNOWN_KEYS: &[&str] = &[
    // shared
    "seed",
    "out_dir",
    // training
    "model",
    "batch_size",
    "lr",
    "epochs",
    "weights",
    "sigmas",
    "embed_dim",
    "heads",
    "inducing_points",
    "ps_layers",
    "selector_hidden",
    "tower_hidden",
    "single_hidden",
    "bottom_hidden",
    "expert_count",
    "expert_dim",
    "expert_hidden",
    "funnel_policy",
    "data_dir",
    // generation
    "rows",
    "fields",
    "tasks",
    "values_per_field",
    "vocab",
    "strength",
    "biases",
];

/// Parsed key=value file. An absent file (no `--config`) is an empty map.
#[derive(Debug, Default)]
pub struct FileConfig {
    map: BTreeMap<String, String>,
    source: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    lineno + 1
                ));
            };
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(format!(
                    "{}:{}: unknown key {key:?} (known: {})",
                    path.display(),
                    lineno + 1,
                    KNOWN_KEYS.join(", ")
                ));
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(format!("{}:{}: duplicate key {key:?}", path.display(), lineno + 1));
            }
        }
        Ok(FileConfig { map, source: Some(path.to_path_buf()) })
    }

    fn context(&self, key: &str) -> String {
        match &self.source {
            Some(p) => format!("{}: key {key}", p.display()),
            None => format!("key {key}"),
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| format!("{}: cannot parse {raw:?}: {e}", self.context(key))),
        }
    }

    fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, String>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) if raw.is_empty() => Ok(Some(Vec::new())),
            Some(raw) => raw
                .split(',')
                .map(|part| {
                    part.trim()
                        .parse::<T>()
                        .map_err(|e| format!("{}: cannot parse {part:?}: {e}", self.context(key)))
                })
                .collect::<Result<Vec<T>, String>>()
                .map(Some),
        }
    }

    /// Overlay this file's training keys onto `cfg`.
    pub fn apply_train(&self, cfg: &mut TrainConfig) -> Result<(), String> {
        if let Some(v) = self.get("model")? {
            cfg.model = v;
        }
        if let Some(v) = self.get("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = self.get("lr")? {
            cfg.lr = v;
        }
        if let Some(v) = self.get("epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = self.get("seed")? {
            cfg.seed = v;
        }
        if let Some(v) = self.get_list("weights")? {
            cfg.weights = v;
        }
        if let Some(v) = self.get_list("sigmas")? {
            cfg.sigmas = v;
        }
        if let Some(v) = self.get("embed_dim")? {
            cfg.hyper.embed_dim = v;
        }
        if let Some(v) = self.get("heads")? {
            cfg.hyper.heads = v;
        }
        if let Some(v) = self.get("inducing_points")? {
            cfg.hyper.inducing_points = v;
        }
        if let Some(v) = self.get("ps_layers")? {
            cfg.hyper.ps_layers = v;
        }
        if let Some(v) = self.get_list("selector_hidden")? {
            cfg.hyper.selector_hidden = v;
        }
        if let Some(v) = self.get("tower_hidden")? {
            cfg.hyper.tower_hidden = v;
        }
        if let Some(v) = self.get_list("single_hidden")? {
            cfg.hyper.single_hidden = v;
        }
        if let Some(v) = self.get_list("bottom_hidden")? {
            cfg.hyper.bottom_hidden = v;
        }
        if let Some(v) = self.get("expert_count")? {
            cfg.hyper.expert_count = v;
        }
        if let Some(v) = self.get("expert_dim")? {
            cfg.hyper.expert_dim = v;
        }
        if let Some(v) = self.get("expert_hidden")? {
            cfg.hyper.expert_hidden = v;
        }
        if let Some(v) = self.get("funnel_policy")? {
            cfg.funnel_policy = v;
        }
        if let Some(v) = self.get::<PathBuf>("data_dir")? {
            cfg.data_dir = v;
        }
        if let Some(v) = self.get::<PathBuf>("out_dir")? {
            cfg.out_dir = v;
        }
        Ok(())
    }

    /// Overlay this file's generation keys onto `cfg`.
    pub fn apply_gen(&self, cfg: &mut GenConfig) -> Result<(), String> {
        if let Some(v) = self.get("rows")? {
            cfg.rows = v;
        }
        if let Some(v) = self.get("fields")? {
            cfg.fields = v;
        }
        if let Some(v) = self.get("tasks")? {
            cfg.tasks = v;
        }
        if let Some(v) = self.get("values_per_field")? {
            cfg.values_per_field = v;
        }
        if let Some(v) = self.get("vocab")? {
            cfg.vocab = v;
        }
        if let Some(v) = self.get("strength")? {
            cfg.strength = v;
        }
        if let Some(v) = self.get_list("biases")? {
            cfg.biases = v;
        }
        if let Some(v) = self.get("seed")? {
            cfg.seed = v;
        }
        Ok(())
    }

    /// Value of out_dir, if the file sets one.
    pub fn out_dir(&self) -> Result<Option<PathBuf>, String> {
        self.get("out_dir")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sdmtl::model::ModelKind;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.cfg");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn parses_and_applies() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "# experiment\nmodel = mmoe\nepochs=3\nsigmas=0.5,1.5\nrows=1234\nbiases=-0.1,0.2\n",
        );
        let fc = FileConfig::load(&p).unwrap();
        let mut t = TrainConfig::default();
        fc.apply_train(&mut t).unwrap();
        assert_eq!(t.model, ModelKind::Mmoe);
        assert_eq!(t.epochs, 3);
        assert_eq!(t.sigmas, vec![0.5, 1.5]);
        let mut g = GenConfig::default();
        fc.apply_gen(&mut g).unwrap();
        assert_eq!(g.rows, 1234);
        assert_eq!(g.biases, vec![-0.1, 0.2]);
    }

    #[test]
    fn unknown_and_malformed_keys_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "modle=apem\n");
        assert!(FileConfig::load(&p).unwrap_err().contains("unknown key"));
        let p = write(dir.path(), "just a line\n");
        assert!(FileConfig::load(&p).unwrap_err().contains("key=value"));
        let p = write(dir.path(), "epochs=3\nepochs=4\n");
        assert!(FileConfig::load(&p).unwrap_err().contains("duplicate"));
        let p = write(dir.path(), "epochs=many\n");
        let fc = FileConfig::load(&p).unwrap();
        let mut t = TrainConfig::default();
        assert!(fc.apply_train(&mut t).unwrap_err().contains("cannot parse"));
    }
}
