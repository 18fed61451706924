//! Result-file plumbing: provenance headers, artifact names, dependency
//! checks, and the decisions table format shared between subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use splitsim_core::bilevel::SplitDecision;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const PRIVACY_TABLE: &str = "privacy_table.tsv";
pub const NOISE_TABLE: &str = "noise_table.tsv";
pub const OPTIMIZE_TRACE: &str = "optimize_trace.jsonl";
pub const DECISIONS: &str = "decisions.tsv";
pub const TRAINING_RECORD: &str = "training_record.jsonl";
pub const RECON_RECORDS: &str = "recon_records.tsv";
pub const RECON_OUTCOMES: &str = "recon_outcomes.jsonl";
pub const MIA_RECORD: &str = "mia_record.jsonl";
pub const REPORT: &str = "report.tsv";
pub const SCALING: &str = "scaling.tsv";

pub fn energy_profile_name(client_id: usize) -> String {
    format!("energy_{client_id}.tsv")
}

/// Header block stamped on every result file.
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn comment_header(&self) -> String {
        format!(
            "# splitsim {TOOL_VERSION}\n# config sha256 {}\n# seed {}\n",
            self.config_sha256, self.seed
        )
    }

    /// Single-line JSON header for .jsonl artifacts. Starts with the
    /// tool_version key so record parsers can recognize and skip it.
    pub fn json_header(&self) -> String {
        format!(
            "{{\"tool_version\":\"{TOOL_VERSION}\",\"config_sha256\":\"{}\",\"seed\":{}}}",
            self.config_sha256, self.seed
        )
    }
}

pub fn write_artifact(out_dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let path = out_dir.join(name);
    fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Reads a prerequisite artifact, naming the producing subcommand when it is
/// missing.
pub fn read_prerequisite(out_dir: &Path, name: &str, produced_by: &str) -> Result<String> {
    let path = out_dir.join(name);
    if !path.exists() {
        bail!(
            "missing prerequisite artifact {}; run `splitsim {produced_by}` first",
            path.display()
        );
    }
    fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))
}

pub fn decisions_to_text(decisions: &[SplitDecision], extra_comments: &str) -> String {
    let mut out = String::from(extra_comments);
    out.push_str("client\ts\tsigma\tobjective\tfeasible_lo\tfeasible_hi\n");
    for d in decisions {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            d.client_id, d.split_point, d.sigma, d.objective, d.feasible.0, d.feasible.1
        ));
    }
    out
}

pub fn decisions_from_text(text: &str) -> Result<Vec<SplitDecision>> {
    let mut decisions = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("client\t") {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            bail!("decisions row {line:?} has {} columns, expected 6", cols.len());
        }
        let field = |i: usize| -> Result<f64> {
            cols[i]
                .parse()
                .map_err(|_| anyhow!("decisions row {line:?}: bad number {:?}", cols[i]))
        };
        let index = |i: usize| -> Result<usize> {
            cols[i]
                .parse()
                .map_err(|_| anyhow!("decisions row {line:?}: bad index {:?}", cols[i]))
        };
        decisions.push(SplitDecision {
            client_id: index(0)?,
            split_point: index(1)?,
            sigma: field(2)?,
            objective: field(3)?,
            feasible: (index(4)?, index(5)?),
        });
    }
    if decisions.is_empty() {
        bail!("decisions table has no rows");
    }
    Ok(decisions)
}
