use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyClass {
    /// Substring matched against the request path.
    pub pattern: String,
    pub base_ms: u64,
}

/// Per-endpoint-class base latency with deterministic, seeded jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyProfile {
    /// Checked in order; first match wins.
    pub classes: Vec<LatencyClass>,
    pub default_ms: u64,
    /// Relative jitter amplitude: latency is uniform in `base * (1 ± jitter)`.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for LatencyProfile {
    fn default() -> Self {
        let class = |pattern: &str, base_ms| LatencyClass { pattern: pattern.to_string(), base_ms };
        Self {
            classes: vec![
                class("/search/", 80),
                class("/issues", 120),
                class("/releases", 60),
                class("/tags", 60),
                class("/stargazers", 30),
            ],
            default_ms: 20,
            jitter: 0.2,
            seed: 42,
        }
    }
}

impl LatencyProfile {
    /// Same latency for every path, no jitter.
    pub fn flat(ms: u64) -> Self {
        Self { classes: Vec::new(), default_ms: ms, jitter: 0.0, seed: 0 }
    }

    pub fn base_for(&self, path: &str) -> Duration {
        let path = path.split('?').next().unwrap_or(path);
        let ms = self.classes.iter().find(|c| path.contains(&c.pattern)).map_or(self.default_ms, |c| c.base_ms);
        Duration::from_millis(ms)
    }

    /// Latency for one request; a pure function of (seed, path and query).
    pub fn latency_for(&self, path_and_query: &str) -> Duration {
        let base = self.base_for(path_and_query);
        if self.jitter <= 0.0 || base.is_zero() {
            return base;
        }
        let unit = unit_hash(self.seed, path_and_query);
        let factor = 1.0 + self.jitter * (2.0 * unit - 1.0);
        base.mul_f64(factor.max(0.0))
    }
}

/// Uniform value in [0, 1) derived from the seed and the key.
fn unit_hash(seed: u64, key: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
}
