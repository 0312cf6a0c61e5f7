//! Cluster configuration and scheduler snapshot files (TOML, versioned).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controlplane::LinkModel;
use crate::perfmodel::{CurveRole, ModelShape, PerfCurve, PerfModel};
use crate::scheduler::{InstanceSnapshot, SchedulerConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancesConfig {
    pub count: u32,
    pub capacity_blocks: u64,
    /// Largest number of concurrently running requests per instance.
    pub max_batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvesConfig {
    /// GEMM rate vs batch size.
    pub gemm: PerfCurve,
    /// Attention rate vs instance context tokens.
    pub attention: PerfCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPlaneConfig {
    pub heartbeat_period_s: f64,
    pub reservation_timeout_s: f64,
    /// Instances not heard from for this long are left out of planning.
    pub stale_after_s: f64,
    pub link: LinkModel,
    /// Bytes of one remote-attention query (and of its returned partial).
    pub exchange_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationConfig {
    /// Tokens per decode step a transfer can move without slowing the step.
    pub cap_tokens: u64,
    /// Tokens actually moved per decode step.
    pub chunk_tokens: u64,
    /// Relative step slowdown per token moved above the cap.
    pub overflow_penalty_per_token: f64,
}

impl MigrationConfig {
    pub fn chunk_blocks(&self, block_size_tokens: u64) -> u64 {
        (self.chunk_tokens / block_size_tokens).max(1)
    }

    /// Step-latency multiplier when a step moves `tokens`.
    pub fn step_factor(&self, tokens: u64) -> f64 {
        if tokens <= self.cap_tokens {
            1.0
        } else {
            1.0 + self.overflow_penalty_per_token * (tokens - self.cap_tokens) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub prefill_time_per_token_s: f64,
    pub sample_interval_s: f64,
    /// Context size the planner assumes for requests it will admit, until
    /// completed requests provide a running mean.
    pub expected_request_tokens: u64,
    /// Run a blockwise-attention spot check every this many decode steps
    /// (0 disables).
    pub spot_check_every_steps: u64,
    pub spot_check_max_tokens: u64,
    pub max_sim_time_s: f64,
    /// Keep one metrics row per decode step.
    pub record_steps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub instances: InstancesConfig,
    pub model: ModelShape,
    pub curves: CurvesConfig,
    pub scheduler: SchedulerConfig,
    pub controlplane: ControlPlaneConfig,
    pub migration: MigrationConfig,
    pub sim: SimConfig,
}

impl ClusterConfig {
    /// Four small instances of a 7B-class model with synthetic curves.
    pub fn desk_default() -> Self {
        let gemm = PerfCurve::saturating(4e13, 8.0, 128).expect("valid curve");
        let attention = PerfCurve::constant(1.5e12).expect("valid curve");
        let model = ModelShape::llama_7b();
        let perf = PerfModel::new(model.clone(), gemm.clone(), attention.clone()).expect("valid model");
        // Ten decode steps of a lightly loaded instance.
        let nominal_step = f64::from(model.n_layers) * (perf.gemm_time(8) + perf.attention_time(8 * 1024, 8 * 1024));
        let heartbeat = (10.0 * nominal_step * 1e4).round() / 1e4;
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            instances: InstancesConfig {
                count: 4,
                capacity_blocks: 2048,
                max_batch: 64,
            },
            scheduler: SchedulerConfig {
                planning_period_s: 2.0 * heartbeat,
                ..SchedulerConfig::derived_from(&gemm)
            },
            model,
            curves: CurvesConfig { gemm, attention },
            controlplane: ControlPlaneConfig {
                heartbeat_period_s: heartbeat,
                reservation_timeout_s: 2.0 * heartbeat,
                stale_after_s: 3.0 * heartbeat,
                link: LinkModel {
                    latency_s: 5e-6,
                    bandwidth_bytes_per_s: 2.5e10,
                },
                exchange_bytes: 8192,
            },
            migration: MigrationConfig {
                cap_tokens: 16,
                chunk_tokens: 16,
                overflow_penalty_per_token: 0.086 / 16.0,
            },
            sim: SimConfig {
                prefill_time_per_token_s: 2e-5,
                sample_interval_s: 1.0,
                expected_request_tokens: 1024,
                spot_check_every_steps: 500,
                spot_check_max_tokens: 256,
                max_sim_time_s: 1e6,
                record_steps: true,
            },
        }
    }

    pub fn perf_model(&self) -> Result<PerfModel> {
        PerfModel::new(self.model.clone(), self.curves.gemm.clone(), self.curves.attention.clone())
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn block_bytes(&self) -> u64 {
        self.model.kv_bytes_per_token * self.model.block_size_tokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                found: self.schema_version,
            });
        }
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.instances.count == 0 {
            return bad("instances.count must be positive".into());
        }
        if self.instances.capacity_blocks == 0 {
            return bad("instances.capacity_blocks must hold at least one block".into());
        }
        if self.instances.max_batch == 0 {
            return bad("instances.max_batch must be positive".into());
        }
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.curves
            .gemm
            .check_role(CurveRole::Gemm)
            .map_err(|e| ConfigError::Invalid(format!("curves.gemm: {e}")))?;
        self.scheduler
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("scheduler: {e}")))?;
        let cp = &self.controlplane;
        for (name, v) in [
            ("controlplane.heartbeat_period_s", cp.heartbeat_period_s),
            ("controlplane.reservation_timeout_s", cp.reservation_timeout_s),
            ("controlplane.stale_after_s", cp.stale_after_s),
            ("controlplane.link.bandwidth_bytes_per_s", cp.link.bandwidth_bytes_per_s),
            ("sim.sample_interval_s", self.sim.sample_interval_s),
            ("sim.max_sim_time_s", self.sim.max_sim_time_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("controlplane.link.latency_s", cp.link.latency_s),
            ("sim.prefill_time_per_token_s", self.sim.prefill_time_per_token_s),
            (
                "migration.overflow_penalty_per_token",
                self.migration.overflow_penalty_per_token,
            ),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if self.migration.chunk_tokens == 0 || self.migration.cap_tokens == 0 {
            return bad("migration.cap_tokens and migration.chunk_tokens must be positive".into());
        }
        if self.sim.expected_request_tokens == 0 {
            return bad("sim.expected_request_tokens must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, path: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read(path)?, &path.display().to_string())
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Input of a one-shot planning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub schema_version: u32,
    #[serde(default)]
    pub expected_new_request_tokens: Option<u64>,
    pub instances: Vec<InstanceSnapshot>,
}

impl SnapshotFile {
    pub fn from_toml_str(text: &str, path: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            msg: e.to_string(),
        })?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                found: s.schema_version,
            });
        }
        Ok(s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("snapshot serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read(path)?, &path.display().to_string())
    }
}
