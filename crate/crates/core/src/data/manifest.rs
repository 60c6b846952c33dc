use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dataset listing: patients, their scan files and scan labels. Scan paths
/// are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub patients: Vec<PatientEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub id: String,
    pub scans: Vec<ScanEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub path: String,
    pub label: String,
    /// Ground-truth degradation parameters, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.validate().map_err(|d| Error::format(path, d))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.patients {
            if !seen.insert(&p.id) {
                return Err(format!("duplicate patient id {}", p.id));
            }
        }
        Ok(())
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.id.clone()).collect()
    }

    pub fn patient(&self, id: &str) -> Option<&PatientEntry> {
        self.patients.iter().find(|p| p.id == id)
    }

    pub fn resolve(manifest_path: &Path, scan: &ScanEntry) -> PathBuf {
        let p = Path::new(&scan.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}
