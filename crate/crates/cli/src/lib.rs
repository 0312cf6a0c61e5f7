//! Subcommand implementations behind the `distkv` binary.
//!
//! Each command writes its report to the supplied writer and returns
//! `Ok(true)` on success, `Ok(false)` when a checked property failed and
//! `Err` for unusable input.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use distkv_core::attention::verify::{run_verification, VerifyParams};
use distkv_core::config::{ClusterConfig, SnapshotFile};
use distkv_core::scheduler::{plan_moves, PlanContext};
use distkv_core::sim::{run_simulation, Policy, SimError};
use distkv_core::trace::{generate_trace, read_trace, write_trace, TraceSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failure(_) => 1,
            CliError::Input(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn input<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Input(format!("{context}: {e}"))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ClusterConfig> {
    let mut cfg = match path {
        Some(p) => ClusterConfig::load(p).map_err(|e| CliError::Input(e.to_string()))?,
        None => ClusterConfig::desk_default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Input(e.to_string()))?;
    Ok(cfg)
}

pub fn cmd_verify_attention(params: &VerifyParams, out: &mut dyn Write) -> Result<bool> {
    let report = run_verification(params).map_err(input("verify-attention"))?;
    writeln!(out, "{report}").map_err(input("stdout"))?;
    Ok(report.passed())
}

pub fn cmd_gen_trace(spec_path: &Path, out_path: &Path, seed: Option<u64>) -> Result<usize> {
    let text = fs::read_to_string(spec_path).map_err(io_err(spec_path))?;
    let mut spec: TraceSpec =
        toml::from_str(&text).map_err(input(&spec_path.display().to_string()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let reqs = generate_trace(&spec).map_err(input(&spec_path.display().to_string()))?;
    write_trace(out_path, &reqs).map_err(input(&out_path.display().to_string()))?;
    Ok(reqs.len())
}

pub fn cmd_plan(snapshot_path: &Path, config: &ClusterConfig, out: &mut dyn Write) -> Result<bool> {
    let snap = SnapshotFile::load(snapshot_path).map_err(|e| CliError::Input(e.to_string()))?;
    let ctx = PlanContext {
        model: config.perf_model().map_err(input("config"))?,
        cfg: config.scheduler.clone(),
        expected_new_request_tokens: snap
            .expected_new_request_tokens
            .unwrap_or(config.sim.expected_request_tokens),
        query_transfer_s: config.controlplane.link.delay(config.controlplane.exchange_bytes),
    };
    let plan = plan_moves(&snap.instances, &ctx).map_err(input(&snapshot_path.display().to_string()))?;
    let w = |e: std::io::Error| CliError::Input(format!("stdout: {e}"));
    writeln!(out, "request\tsrc\tdst\tblocks\tgain_tokens_per_s").map_err(w)?;
    let mut gain = 0.0;
    for m in &plan.moves {
        let d = m.directive;
        gain += m.estimated_gain;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}",
            d.request_id, d.src_instance, d.dst_instance, d.num_blocks, m.estimated_gain
        )
        .map_err(w)?;
    }
    writeln!(out, "directives: {}", plan.moves.len()).map_err(w)?;
    writeln!(out, "total gain: {gain:.6}").map_err(w)?;
    writeln!(out, "tps before: {:.6}", plan.tps_before).map_err(w)?;
    writeln!(out, "tps after: {:.6}", plan.tps_after).map_err(w)?;
    let ok = plan.tps_after >= plan.tps_before && plan.moves.iter().all(|m| m.estimated_gain > 0.0);
    Ok(ok)
}

/// Files written by [`cmd_run`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub summary: PathBuf,
    pub timeseries: PathBuf,
    pub requests: PathBuf,
    pub steps: Option<PathBuf>,
    pub event_log: Option<PathBuf>,
}

pub fn cmd_run(
    config: &ClusterConfig,
    trace_path: &Path,
    policy: Policy,
    out_dir: &Path,
    event_log: Option<&Path>,
) -> Result<RunFiles> {
    let trace = read_trace(trace_path).map_err(input(&trace_path.display().to_string()))?;
    let output = run_simulation(config, &trace, policy).map_err(|e| match e {
        SimError::Invariant { .. } | SimError::SpotCheck { .. } => CliError::Failure(e.to_string()),
        other => CliError::Input(other.to_string()),
    })?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let m = &output.metrics;
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(io_err(&p))?;
        Ok(p)
    };
    let files = RunFiles {
        summary: write("summary.txt", m.summary_text())?,
        timeseries: write("timeseries.tsv", m.timeseries_tsv())?,
        requests: write("requests.tsv", m.requests_tsv())?,
        steps: if config.sim.record_steps {
            Some(write("steps.tsv", m.steps_tsv())?)
        } else {
            None
        },
        event_log: match event_log {
            Some(p) => {
                let mut text = output.event_log.join("\n");
                if !text.is_empty() {
                    text.push('\n');
                }
                fs::write(p, text).map_err(io_err(p))?;
                Some(p.to_path_buf())
            }
            None => None,
        },
    };
    Ok(files)
}
