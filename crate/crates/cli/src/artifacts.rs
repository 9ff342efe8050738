//! Run execution and the artifact directory layout.
//!
//! A completed run directory holds:
//!
//! ```text
//! config.toml             resolved configuration echo (minus the out dir)
//! manifest.txt            everything the numbers depend on, one line each
//! metrics_summary.json    machine-readable reports, forgetting, digests
//! metrics_session_T.txt   human-readable per-session tables
//! dump_session_T.txt      prediction records of the accumulated eval set
//! curve_session_T.tsv     calibration sweep points for external plotting
//! forgetting.txt          the forgetting matrix rendered as text
//! checkpoints/            one checkpoint per session (optional)
//! ```
//!
//! While a run is in flight the directory holds an `INCOMPLETE` marker;
//! readers treat its presence as "partial artifacts, do not consume". No
//! file is overwritten unless the caller forces it.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use cczsl_core::continual::{run_protocol, RunOutput};
use cczsl_core::eval::{self, EvalScope, ForgettingMatrix, MetricsReport};
use cczsl_core::rng::fnv64;
use cczsl_core::world::{to_split_file, validate_splits, CompositionSpace, SessionSpec};

use crate::config::{ExperimentConfig, SplitSource};
use crate::CliError;

pub const SUMMARY_FORMAT: &str = "czsl-metrics v1";
const MARKER: &str = "INCOMPLETE";

/// Machine-readable metrics for one session: the accumulated continual
/// evaluation plus every origin slice under that session's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: usize,
    pub czs: MetricsReport,
    pub slices: Vec<MetricsReport>,
}

/// The one file a consumer needs: every metric of a run plus the digests
/// that make two runs comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format: String,
    /// Digest of the fully-resolved session split; equal digests mean the
    /// runs solved the same problem.
    pub split_digest: u64,
    pub split_label: String,
    pub config: ExperimentConfig,
    pub sessions: Vec<SessionSummary>,
    #[serde(default)]
    pub forgetting: Option<ForgettingMatrix>,
    pub teacher_hashes: Vec<u64>,
}

/// Digest of a resolved split, independent of how it was sourced.
pub fn split_digest(space: &CompositionSpace, splits: &[SessionSpec]) -> Result<u64, CliError> {
    let canon = to_split_file("digest", space, splits);
    let text = serde_json::to_string(&canon)
        .map_err(|e| CliError::Corrupt { what: format!("split digest serialization: {e}") })?;
    Ok(fnv64(text.as_bytes()))
}

fn guard_fresh(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(CliError::Collision { path: dir.to_path_buf() });
        }
    }
    Ok(())
}

/// Executes a configured run and writes the artifact directory. Returns the
/// summary that was written.
pub fn execute_run(
    config: &ExperimentConfig,
    out_dir: &Path,
    force: bool,
) -> Result<RunSummary, CliError> {
    config.validate()?;
    let (space, splits) = config.splits.resolve()?;
    let digest = split_digest(&space, &splits)?;
    let train = config.resolved_train();

    guard_fresh(out_dir, force)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(MARKER), b"run in flight; artifacts below are partial\n")?;

    let ckpt_dir = out_dir.join("checkpoints");
    let output = run_protocol(
        &space,
        &splits,
        &train,
        &config.inference,
        config.checkpoints.then(|| ckpt_dir.as_path()),
    )?;

    // Echo the configuration, minus the output location: artifacts must not
    // depend on where they were written.
    let mut echo = config.clone();
    echo.out_dir = None;
    let toml_text = toml::to_string_pretty(&echo)
        .map_err(|e| CliError::Corrupt { what: format!("config echo: {e}") })?;
    fs::write(out_dir.join("config.toml"), toml_text)?;

    let mut manifest = output.manifest.clone();
    manifest.push_str(&format!("split\t{}\n", config.splits.label()));
    manifest.push_str(&format!("split-digest\t{digest:016x}\n"));
    let infer_json = serde_json::to_string(&config.inference)
        .map_err(|e| CliError::Corrupt { what: format!("manifest inference echo: {e}") })?;
    manifest.push_str(&format!("inference\t{infer_json}\n"));
    let ablation_json = serde_json::to_string(&config.ablation)
        .map_err(|e| CliError::Corrupt { what: format!("manifest ablation echo: {e}") })?;
    manifest.push_str(&format!("ablation\t{ablation_json}\n"));
    fs::write(out_dir.join("manifest.txt"), &manifest)?;

    write_session_artifacts(out_dir, &splits, &output)?;
    fs::write(out_dir.join("forgetting.txt"), render_forgetting(&output.forgetting))?;

    let summary = RunSummary {
        format: SUMMARY_FORMAT.to_string(),
        split_digest: digest,
        split_label: config.splits.label(),
        config: echo,
        sessions: output
            .outcomes
            .iter()
            .map(|o| SessionSummary {
                session: o.session,
                czs: o.czs.clone(),
                slices: o.slices.clone(),
            })
            .collect(),
        forgetting: Some(output.forgetting.clone()),
        teacher_hashes: output.teacher_hashes.clone(),
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Corrupt { what: format!("summary serialization: {e}") })?;
    fs::write(out_dir.join("metrics_summary.json"), format!("{json}\n"))?;

    fs::remove_file(out_dir.join(MARKER))?;
    Ok(summary)
}

fn write_session_artifacts(
    out_dir: &Path,
    splits: &[SessionSpec],
    output: &RunOutput,
) -> Result<(), CliError> {
    let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
    for outcome in &output.outcomes {
        let t = outcome.session;
        seen.extend(splits[t].seen.iter().copied());

        let mut table = String::new();
        table.push_str(&format!("session {t} metrics\n"));
        table.push_str(&report_header());
        table.push_str(&report_row("czs", &outcome.czs));
        for rep in &outcome.slices {
            let label = match rep.scope {
                EvalScope::Slice { origin } => format!("slice {origin}"),
                _ => "slice ?".to_string(),
            };
            table.push_str(&report_row(&label, rep));
        }
        fs::write(out_dir.join(format!("metrics_session_{t}.txt")), table)?;

        let mut dump = Vec::new();
        eval::write_dump(&mut dump, &outcome.records)?;
        fs::write(out_dir.join(format!("dump_session_{t}.txt")), dump)?;

        let curve = eval::bias_sweep(&outcome.records, &seen)?;
        let mut tsv = String::from("bias\tseen\tunseen\n");
        for p in &curve.points {
            tsv.push_str(&format!("{}\t{}\t{}\n", p.bias, p.seen, p.unseen));
        }
        fs::write(out_dir.join(format!("curve_session_{t}.tsv")), tsv)?;
    }
    Ok(())
}

fn report_header() -> String {
    format!(
        "{:<10}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}\n",
        "scope", "auc", "best-s", "best-u", "hm", "seen@0", "unsn@0", "attr", "obj", "comp"
    )
}

fn report_row(label: &str, r: &MetricsReport) -> String {
    format!(
        "{:<10}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9.4}\n",
        label,
        r.auc,
        r.best_seen,
        r.best_unseen,
        r.hm,
        r.unbiased_seen,
        r.unbiased_unseen,
        r.attr_acc,
        r.obj_acc,
        r.comp_acc
    )
}

fn render_forgetting(m: &ForgettingMatrix) -> String {
    let mut s = String::from("per-origin auc under later models (row i, models i..T-1)\n");
    for (i, row) in m.rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>9.4}")).collect();
        s.push_str(&format!("origin {i}:{}\n", cells.join("")));
    }
    let gaps: Vec<String> = m.per_set.iter().map(|v| format!("{v:.4}")).collect();
    s.push_str(&format!("mean gap per origin: {}\n", gaps.join(" ")));
    s.push_str(&format!(
        "f-auc: {:.6} ({} is better)\n",
        m.f_auc,
        if m.lower_is_better { "lower" } else { "higher" }
    ));
    s
}

/// Reads a run directory's summary, refusing in-flight or partial runs.
pub fn load_summary(dir: &Path) -> Result<RunSummary, CliError> {
    if dir.join(MARKER).exists() {
        return Err(CliError::Incomparable {
            why: format!("{} is marked incomplete", dir.display()),
        });
    }
    let path = dir.join("metrics_summary.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::Missing {
        what: "metrics summary",
        path: path.clone(),
        detail: e.to_string(),
    })?;
    let summary: RunSummary = serde_json::from_str(&text)
        .map_err(|e| CliError::Corrupt { what: format!("{}: {e}", path.display()) })?;
    if summary.format != SUMMARY_FORMAT {
        return Err(CliError::Corrupt {
            what: format!("{}: unknown format {:?}", path.display(), summary.format),
        });
    }
    Ok(summary)
}

/// Per-session metric deltas between two comparable runs (second minus
/// first throughout).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionDelta {
    pub session: usize,
    pub auc_a: f64,
    pub auc_b: f64,
    pub auc_delta: f64,
    pub hm_a: f64,
    pub hm_b: f64,
    pub hm_delta: f64,
    pub best_unseen_a: f64,
    pub best_unseen_b: f64,
    pub best_unseen_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub split_digest: u64,
    pub sessions: Vec<SessionDelta>,
    pub f_auc_a: f64,
    pub f_auc_b: f64,
    /// Second minus first; forgetting is lower-is-better, so a negative
    /// delta means the second run forgets less.
    pub f_auc_delta: f64,
}

impl CompareReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("split digest {:016x}\n", self.split_digest));
        s.push_str(&format!(
            "{:<9}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
            "session", "auc a", "auc b", "d-auc", "hm a", "hm b", "d-hm"
        ));
        for d in &self.sessions {
            s.push_str(&format!(
                "{:<9}{:>10.4}{:>10.4}{:>+10.4}{:>10.4}{:>10.4}{:>+10.4}\n",
                d.session, d.auc_a, d.auc_b, d.auc_delta, d.hm_a, d.hm_b, d.hm_delta
            ));
        }
        s.push_str(&format!(
            "f-auc {:.6} vs {:.6}, delta {:+.6} (lower is better: {} forgets less)\n",
            self.f_auc_a,
            self.f_auc_b,
            self.f_auc_delta,
            if self.f_auc_delta < 0.0 {
                "second"
            } else if self.f_auc_delta > 0.0 {
                "first"
            } else {
                "neither"
            }
        ));
        s
    }
}

/// Compares two completed run directories.
pub fn compare_dirs(a: &Path, b: &Path) -> Result<CompareReport, CliError> {
    let sa = load_summary(a)?;
    let sb = load_summary(b)?;
    if sa.split_digest != sb.split_digest {
        return Err(CliError::Incomparable {
            why: format!(
                "split digests differ ({:016x} vs {:016x}); the runs solved different problems",
                sa.split_digest, sb.split_digest
            ),
        });
    }
    let fa = sa.forgetting.as_ref().ok_or_else(|| CliError::Incomparable {
        why: format!("{} has no forgetting matrix", a.display()),
    })?;
    let fb = sb.forgetting.as_ref().ok_or_else(|| CliError::Incomparable {
        why: format!("{} has no forgetting matrix", b.display()),
    })?;
    if sa.sessions.len() != sb.sessions.len() {
        return Err(CliError::Incomparable {
            why: format!(
                "session counts differ ({} vs {})",
                sa.sessions.len(),
                sb.sessions.len()
            ),
        });
    }
    let sessions = sa
        .sessions
        .iter()
        .zip(&sb.sessions)
        .map(|(ra, rb)| SessionDelta {
            session: ra.session,
            auc_a: ra.czs.auc,
            auc_b: rb.czs.auc,
            auc_delta: rb.czs.auc - ra.czs.auc,
            hm_a: ra.czs.hm,
            hm_b: rb.czs.hm,
            hm_delta: rb.czs.hm - ra.czs.hm,
            best_unseen_a: ra.czs.best_unseen,
            best_unseen_b: rb.czs.best_unseen,
            best_unseen_delta: rb.czs.best_unseen - ra.czs.best_unseen,
        })
        .collect();
    Ok(CompareReport {
        split_digest: sa.split_digest,
        sessions,
        f_auc_a: fa.f_auc,
        f_auc_b: fb.f_auc,
        f_auc_delta: fb.f_auc - fa.f_auc,
    })
}

/// Recomputes metrics from a run's prediction dump. With `check` set, the
/// recomputed report must match the stored summary bit for bit.
pub fn eval_dump(dir: &Path, session: usize, check: bool) -> Result<MetricsReport, CliError> {
    let summary = load_summary(dir)?;
    if session >= summary.sessions.len() {
        return Err(CliError::Config {
            detail: format!(
                "run has sessions 0..{}, asked for {session}",
                summary.sessions.len()
            ),
        });
    }
    let path = dir.join(format!("dump_session_{session}.txt"));
    let text = fs::read(&path).map_err(|e| CliError::Missing {
        what: "prediction dump",
        path: path.clone(),
        detail: e.to_string(),
    })?;
    let records = eval::read_dump(text.as_slice())?;

    let (_, splits) = summary.config.splits.resolve()?;
    let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
    for s in splits.iter().take(session + 1) {
        seen.extend(s.seen.iter().copied());
    }
    let report = eval::report(&records, &seen, session, EvalScope::Czs)?;
    if check {
        let stored = &summary.sessions[session].czs;
        if !reports_bit_equal(&report, stored) {
            return Err(CliError::Corrupt {
                what: format!(
                    "dump recomputation disagrees with the stored summary for session {session}"
                ),
            });
        }
    }
    Ok(report)
}

fn reports_bit_equal(a: &MetricsReport, b: &MetricsReport) -> bool {
    let key = |r: &MetricsReport| -> Vec<u64> {
        [
            r.auc,
            r.best_seen,
            r.best_unseen,
            r.hm,
            r.unbiased_seen,
            r.unbiased_unseen,
            r.attr_acc,
            r.obj_acc,
            r.comp_acc,
        ]
        .iter()
        .map(|v| v.to_bits())
        .collect()
    };
    a.session == b.session && a.scope == b.scope && key(a) == key(b)
}

/// Resolves and validates a split source, returning a human summary of the
/// sessions. Violations come back as a configuration error listing each.
pub fn validate_source(source: &SplitSource) -> Result<String, CliError> {
    let (space, splits) = source.resolve()?;
    let violations = validate_splits(&space, &splits);
    if !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(|v| format!("  {v}")).collect();
        return Err(CliError::Config {
            detail: format!("split violates the protocol:\n{}", lines.join("\n")),
        });
    }
    let mut s = format!(
        "ok: {} sessions over {} attributes x {} objects\n",
        splits.len(),
        space.n_attrs(),
        space.n_objs()
    );
    for sp in &splits {
        s.push_str(&format!(
            "session {}: {} new attrs, {} new objs, {} seen, {} unseen, {} val\n",
            sp.index,
            sp.attrs.len(),
            sp.objs.len(),
            sp.seen.len(),
            sp.unseen.len(),
            sp.val.len()
        ));
    }
    Ok(s)
}

/// Renders one report as the same table row the run artifacts use.
pub fn render_report(label: &str, r: &MetricsReport) -> String {
    format!("{}{}", report_header(), report_row(label, r))
}
