//! The merged, serializable run configuration and its fingerprint.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::client::EndpointConfig;
use crate::crco::CrcoConfig;
use crate::d3t::{D3TConfig, SingleRoundConfig};
use crate::glce::GlceConfig;
use crate::mock::MockBehaviorProfile;
use crate::model::BandingScheme;
use crate::seeds;

/// Synthetic-scene settings used by the mock model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub profile: MockBehaviorProfile,
    /// Disk radius, in pixels, of scene objects.
    pub object_radius: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            profile: MockBehaviorProfile::default(),
            object_radius: 15.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputPaths {
    pub corpus: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub d3t: D3TConfig,
    pub single_round: SingleRoundConfig,
    pub crco: CrcoConfig,
    pub glce: GlceConfig,
    pub endpoint: EndpointConfig,
    pub banding: BandingScheme,
    pub mock: MockConfig,
    pub outputs: OutputPaths,
}

impl RunConfig {
    /// Canonical JSON of everything that can change an artifact's content.
    /// Output locations are left out so moving a run does not change it.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.outputs = OutputPaths::default();
        serde_json::to_string(&c).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_json`].
    pub fn fingerprint(&self) -> String {
        seeds::sha256_hex(self.canonical_json().as_bytes())[..16].to_string()
    }
}
