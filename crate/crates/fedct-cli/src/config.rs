//! Experiment configuration: a single TOML file wiring the dataset,
//! model, federation, provider, and output settings, plus built-in presets.

use fedct::federation::FederationConfig;
use fedct::model::ModelConfig;
use fedct::protocol::{builtin_known_protocols, builtin_unseen_protocols, Protocol};
use fedct::report::ProviderConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientSpec {
    pub client_id: u32,
    /// 1-based index into the built-in known-protocol table; mutually
    /// exclusive with `protocol`.
    pub builtin: Option<usize>,
    pub protocol: Option<Protocol>,
    pub train_patient_seeds: Vec<u64>,
    pub test_patient_seeds: Vec<u64>,
    pub train_slices: usize,
    pub test_slices: usize,
}

impl Default for ClientSpec {
    fn default() -> Self {
        ClientSpec {
            client_id: 0,
            builtin: None,
            protocol: None,
            train_patient_seeds: Vec::new(),
            test_patient_seeds: Vec::new(),
            train_slices: 8,
            test_slices: 4,
        }
    }
}

impl ClientSpec {
    pub fn resolve_protocol(&self) -> Result<Protocol, String> {
        match (self.builtin, self.protocol) {
            (Some(idx), None) => {
                let table = builtin_known_protocols();
                if idx == 0 || idx > table.len() {
                    Err(format!(
                        "client {}: builtin index {idx} out of range 1..={}",
                        self.client_id,
                        table.len()
                    ))
                } else {
                    Ok(table[idx - 1])
                }
            }
            (None, Some(p)) => Ok(p),
            (Some(_), Some(_)) => Err(format!(
                "client {}: give either builtin or protocol, not both",
                self.client_id
            )),
            (None, None) => Err(format!(
                "client {}: missing protocol (set builtin or protocol)",
                self.client_id
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub seed: u64,
    pub clients: Vec<ClientSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 64,
            seed: 7,
            clients: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct UnseenSpec {
    pub name: String,
    /// 1-based index into the built-in unseen-protocol table.
    pub builtin_unseen: Option<usize>,
    pub protocol: Option<Protocol>,
    pub patient_seeds: Vec<u64>,
    pub slices: usize,
}

impl Default for UnseenSpec {
    fn default() -> Self {
        UnseenSpec {
            name: String::new(),
            builtin_unseen: None,
            protocol: None,
            patient_seeds: Vec::new(),
            slices: 4,
        }
    }
}

impl UnseenSpec {
    pub fn resolve_protocol(&self) -> Result<Protocol, String> {
        match (self.builtin_unseen, self.protocol) {
            (Some(idx), None) => {
                let table = builtin_unseen_protocols();
                if idx == 0 || idx > table.len() {
                    Err(format!(
                        "unseen {}: builtin_unseen index {idx} out of range 1..={}",
                        self.name,
                        table.len()
                    ))
                } else {
                    Ok(table[idx - 1])
                }
            }
            (None, Some(p)) => Ok(p),
            (Some(_), Some(_)) => Err(format!(
                "unseen {}: give either builtin_unseen or protocol, not both",
                self.name
            )),
            (None, None) => Err(format!("unseen {}: missing protocol", self.name)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: String,
    /// Write an intermediate checkpoint every k rounds (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: "runs/exp".into(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub provider: ProviderConfig,
    pub output: OutputConfig,
    pub unseen: Vec<UnseenSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig, String> {
        toml::from_str(text).map_err(|e| format!("config parse error: {e}"))
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dataset.clients.is_empty() {
            return Err("dataset.clients is empty".into());
        }
        if self.dataset.image_size < 16 {
            return Err(format!(
                "image_size must be at least 16 (ssim window plus margin), got {}",
                self.dataset.image_size
            ));
        }
        let mut ids = BTreeSet::new();
        for c in &self.dataset.clients {
            if !ids.insert(c.client_id) {
                return Err(format!("duplicate client_id {}", c.client_id));
            }
            c.resolve_protocol()?;
            if c.train_patient_seeds.is_empty() || c.test_patient_seeds.is_empty() {
                return Err(format!(
                    "client {}: train and test patient seed lists must be non-empty",
                    c.client_id
                ));
            }
            if c.train_slices == 0 || c.test_slices == 0 {
                return Err(format!("client {}: slice counts must be positive", c.client_id));
            }
        }
        if self.model.image_size != self.dataset.image_size {
            return Err(format!(
                "model.image_size {} must match dataset.image_size {}",
                self.model.image_size, self.dataset.image_size
            ));
        }
        self.model.validate().map_err(|e| e.to_string())?;
        self.federation.validate().map_err(|e| e.to_string())?;
        self.provider.validate().map_err(|e| e.to_string())?;
        if self.provider.d != self.model.report_dim {
            return Err(format!(
                "provider.d {} must match model.report_dim {}",
                self.provider.d, self.model.report_dim
            ));
        }
        for u in &self.unseen {
            u.resolve_protocol()?;
            if u.name.is_empty() {
                return Err("unseen block missing name".into());
            }
            if u.patient_seeds.is_empty() || u.slices == 0 {
                return Err(format!("unseen {}: needs patient seeds and slices", u.name));
            }
        }
        Ok(())
    }

    pub fn client_ids(&self) -> Vec<u32> {
        self.dataset.clients.iter().map(|c| c.client_id).collect()
    }
}

/// Built-in presets reproducing the standard experiment shapes.
pub fn preset(name: &str) -> Result<ExperimentConfig, String> {
    match name {
        // Four heterogeneous clients spanning sparse-view and low-dose
        // regimes, desk scale.
        "desk4" => Ok(make_preset(&[1, 3, 5, 6], "runs/desk4")),
        // The full eight-client table at desk image size.
        "paper8" => Ok(make_preset(&[1, 2, 3, 4, 5, 6, 7, 8], "runs/paper8")),
        other => Err(format!("unknown preset {other}; available: desk4, paper8")),
    }
}

fn make_preset(builtin_ids: &[usize], out_dir: &str) -> ExperimentConfig {
    let clients = builtin_ids
        .iter()
        .map(|&idx| ClientSpec {
            client_id: idx as u32,
            builtin: Some(idx),
            train_patient_seeds: vec![idx as u64 * 100 + 1, idx as u64 * 100 + 2],
            test_patient_seeds: vec![idx as u64 * 100 + 51],
            train_slices: 8,
            test_slices: 4,
            ..Default::default()
        })
        .collect();
    let unseen = (1..=4usize)
        .map(|idx| UnseenSpec {
            name: format!("unseen{idx}"),
            builtin_unseen: Some(idx),
            patient_seeds: vec![9000 + idx as u64],
            slices: 4,
            ..Default::default()
        })
        .collect();
    ExperimentConfig {
        dataset: DatasetConfig {
            image_size: 64,
            seed: 7,
            clients,
        },
        model: ModelConfig::default(),
        federation: FederationConfig::default(),
        provider: ProviderConfig::default(),
        output: OutputConfig {
            dir: out_dir.into(),
            checkpoint_every: 0,
        },
        unseen,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["desk4", "paper8"] {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn desk4_uses_expected_clients() {
        let cfg = preset("desk4").unwrap();
        assert_eq!(cfg.client_ids(), vec![1, 3, 5, 6]);
        assert_eq!(cfg.unseen.len(), 4);
        // Train seeds are disjoint across clients.
        let mut all = BTreeSet::new();
        for c in &cfg.dataset.clients {
            for &s in &c.train_patient_seeds {
                assert!(all.insert(s));
            }
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = preset("desk4").unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.client_ids(), cfg.client_ids());
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn validation_catches_duplicates_and_missing_protocols() {
        let mut cfg = preset("desk4").unwrap();
        cfg.dataset.clients[1].client_id = 1;
        assert!(cfg.validate().unwrap_err().contains("duplicate"));

        let mut cfg2 = preset("desk4").unwrap();
        cfg2.dataset.clients[0].builtin = Some(99);
        assert!(cfg2.validate().is_err());

        let mut cfg3 = preset("desk4").unwrap();
        cfg3.dataset.clients[0].builtin = None;
        assert!(cfg3.validate().unwrap_err().contains("missing protocol"));
    }
}
