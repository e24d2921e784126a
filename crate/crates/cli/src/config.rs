//! Harness configuration file. Every field is optional; command-line flags
//! take precedence over values read here.

use std::path::{Path, PathBuf};

use mirrorlink::evaluator::PolicySpec;
use mirrorlink::motion_filter::FilterConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct HarnessConfig {
    pub bind: Option<String>,
    pub tick_hz: Option<f64>,
    pub teleop_hz_expected: Option<f64>,
    pub filter: Option<FilterConfig>,
    /// Directory of `<task>.json` manifests overriding the bundled ones.
    pub task_dir: Option<PathBuf>,
    pub dataset_dir: Option<PathBuf>,
    pub policy: Option<PolicySpec>,
    pub eval_plan: Option<PathBuf>,
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg: HarnessConfig = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if let Some(f) = &cfg.filter {
            f.validate().map_err(|e| format!("{}: filter: {e}", path.display()))?;
        }
        // Relative paths resolve against the config file, not the caller.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.task_dir, &mut cfg.dataset_dir, &mut cfg.eval_plan].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"tickHz": 120, "tickhz": 90}"#).unwrap();
        assert!(HarnessConfig::load(&p).unwrap_err().contains("tickhz"));
        std::fs::write(&p, r#"{"filter": {"joint_jump_max": 0.1, "ee_lin_mx": 1}}"#).unwrap();
        assert!(HarnessConfig::load(&p).is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"datasetDir": "data", "policy": "null"}"#).unwrap();
        let c = HarnessConfig::load(&p).unwrap();
        assert_eq!(c.dataset_dir.unwrap(), dir.path().join("data"));
        assert_eq!(c.policy, Some(PolicySpec::Null));
    }
}
