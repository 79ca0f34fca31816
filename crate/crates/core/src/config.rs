//! Run configuration shared by every command: checked-in defaults, an
//! optional JSON file merged over them, then explicit overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::em::EMConfig;
use crate::error::{Error, Result};
use crate::segmentation::SegmentationParams;
use crate::selection::SelectionConfig;
use crate::synth::GeneratorSpec;

/// The checked-in defaults.
pub const DEFAULTS_JSON: &str = include_str!("../defaults.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scenario preset for `generate`.
    pub preset: String,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub flat: bool,
    /// Primary input directory (maps for `segment`, a dataset for
    /// `learn`/`select`/`eval`, a model for `export`).
    pub input: Option<PathBuf>,
    /// Dataset directory used by `export` overlays.
    pub dataset: Option<PathBuf>,
    /// Map directory used by `export` overlays.
    pub maps: Option<PathBuf>,
    pub out: PathBuf,
    pub segmentation: SegmentationParams,
    pub em: EMConfig,
    pub selection: SelectionConfig,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

impl RunConfig {
    pub fn defaults() -> Self {
        serde_json::from_str(DEFAULTS_JSON).expect("checked-in defaults parse")
    }

    /// Defaults with the JSON object in `path` merged over them. Keys the
    /// file leaves out keep their default; unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let over: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let mut base: Value = serde_json::from_str(DEFAULTS_JSON).expect("checked-in defaults parse");
        merge(&mut base, over);
        serde_json::from_value(base).map_err(|e| Error::json(path, e))
    }

    /// The EM settings actually used: the top-level seed, and penalties taken
    /// from the selection block.
    pub fn em_config(&self) -> EMConfig {
        EMConfig {
            seed: self.seed,
            penalty_n: self.selection.penalty_n,
            penalty_m: self.selection.penalty_m,
            ..self.em.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.em_config().validate()?;
        if self.selection.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be at least 1".into()));
        }
        if self.selection.penalty_n < 0.0 || self.selection.penalty_m < 0.0 {
            return Err(Error::InvalidParameter("penalties must be non-negative".into()));
        }
        if self.n == Some(0) || self.m == Some(0) {
            return Err(Error::InvalidParameter("N and M must be at least 1".into()));
        }
        if let (Some(n), Some(m)) = (self.n, self.m) {
            if m > n && !self.flat {
                return Err(Error::InvalidParameter(format!("need M <= N, got N = {n}, M = {m}")));
            }
        }
        GeneratorSpec::preset(&self.preset)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::to_json`].
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Writes `run_config.json` recording the command, the full config, and its digest.
    pub fn record(&self, command: &str, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let doc = serde_json::json!({
            "command": command,
            "config_sha256": self.digest(),
            "config": self,
        });
        let path = dir.join("run_config.json");
        let text = serde_json::to_string_pretty(&doc).expect("config serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_module_defaults() {
        let d = RunConfig::defaults();
        assert_eq!(d.em, EMConfig::default());
        assert_eq!(d.segmentation, SegmentationParams::default());
        assert_eq!(d.selection, SelectionConfig::default());
        d.validate().unwrap();
    }

    #[test]
    fn partial_file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 9, "em": {"gamma": 0.5, "pose_grid": {"radius": 2}}}"#).unwrap();
        let c = RunConfig::from_file(&path).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.em.gamma, 0.5);
        assert_eq!(c.em.pose_grid.radius, 2);
        assert_eq!(c.em.pose_grid.rot_step, EMConfig::default().pose_grid.rot_step);
        assert_eq!(c.em.sigma, 0.15);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"sede": 9}"#).unwrap();
        assert!(RunConfig::from_file(&path).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::defaults();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::defaults();
        c.em.gamma = 1.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::defaults();
        c.selection.restarts = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::defaults();
        c.preset = "nowhere".into();
        assert!(c.validate().is_err());
    }
}
