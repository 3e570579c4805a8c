use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const DEFAULT_LEASE_SECONDS: u64 = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Address to bind, e.g. `127.0.0.1:8080`. Port 0 picks a free port.
    pub listen: String,
    pub make_model_model: Option<PathBuf>,
    pub color_model: Option<PathBuf>,
    /// Review queue file; review endpoints answer 503 without one.
    pub queue: Option<PathBuf>,
    pub lease_seconds: u64,
    /// Largest accepted request body.
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            make_model_model: None,
            color_model: None,
            queue: None,
            lease_seconds: DEFAULT_LEASE_SECONDS,
            max_body_bytes: 32 << 20,
        }
    }
}

impl ServiceConfig {
    pub fn lease(&self) -> Duration {
        Duration::from_secs(self.lease_seconds)
    }
}
