//! Text rendering of a [`ConservationReport`].
//!
//! The first line carries the timestamp; everything after it depends only
//! on the input.

use std::fmt::Write;
use std::time::SystemTime;

use crate::analysis::ConservationReport;
use crate::tail::{sturm_reading, TailVerdict};

pub fn timestamp_line() -> String {
    format!(
        "# genconserve report {}",
        humantime::format_rfc3339_seconds(SystemTime::now())
    )
}

fn tail_lines(out: &mut String, title: &str, v: &Option<TailVerdict>) {
    let _ = match v {
        Some(v) => writeln!(
            out,
            "{title}: {}\n  {}\n  last partial integral {:.6e} at R = {:e}",
            v.classification,
            v.confidence_note,
            v.last_sum(),
            v.partial_sums.last().map_or(f64::NAN, |p| p.0)
        ),
        None => writeln!(out, "{title}: failed"),
    };
}

/// Human-readable body followed by a flat `key = value` section.
pub fn render(report: &ConservationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "manifold: {}", report.spec_digest);
    out.push('\n');
    tail_lines(&mut out, "volume test", &report.volume_verdict);
    tail_lines(&mut out, "time-changed volume test", &report.timechange_verdict);
    match &report.khasminskii {
        Some(k) => {
            let _ = writeln!(out, "khasminskii: {}\n  {}", k.verdict, k.note);
        }
        None => out.push_str("khasminskii: failed\n"),
    }
    match &report.semigroup_plateau {
        Some(p) => {
            let _ = writeln!(
                out,
                "semigroup plateau: {}\n  {}\n  t_probe = {}, H = {:.12}, epsilon_R = {:.3e}",
                p.verdict, p.note, p.t_probe, p.h_plateau, p.epsilon_r
            );
            for s in &p.sweep {
                let _ = writeln!(
                    out,
                    "  R = {:<6} H(r0) = {:.12}  1 - H(r0) = {:.6e}  N(r0) = {:.12}",
                    s.radius, s.h_origin, s.deficit_origin, s.n_origin
                );
            }
        }
        None => out.push_str("semigroup plateau: failed\n"),
    }
    if let Some(s) = &report.sturm {
        let _ = writeln!(
            out,
            "sturm test (informational): {}\n  {}",
            sturm_reading(s),
            s.confidence_note
        );
    }
    out.push_str("\nconsistency:\n");
    for f in &report.consistency {
        let _ = writeln!(
            out,
            "  [{}] {}: {}",
            if f.passed { "pass" } else { "FAIL" },
            f.name,
            f.detail
        );
    }
    if !report.disagreements.is_empty() {
        out.push_str("disagreements:\n");
        for d in &report.disagreements {
            let _ = writeln!(out, "  {d}");
        }
    }
    if !report.errors.is_empty() {
        out.push_str("errors:\n");
        for e in &report.errors {
            let _ = writeln!(out, "  {e}");
        }
    }
    let _ = writeln!(out, "\nfinal: {}", report.final_verdict);
    out.push_str("\n[summary]\n");
    for (k, v) in summary(report) {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

/// Flat key-value pairs in a fixed order.
pub fn summary(report: &ConservationReport) -> Vec<(&'static str, String)> {
    let class = |v: &Option<TailVerdict>| v.as_ref().map_or("error".to_string(), |v| v.classification.to_string());
    let mut kv = vec![
        ("spec", report.spec_digest.clone()),
        ("volume", class(&report.volume_verdict)),
        ("timechange", class(&report.timechange_verdict)),
        (
            "khasminskii",
            report
                .khasminskii
                .as_ref()
                .map_or("error".to_string(), |k| k.verdict.to_string()),
        ),
    ];
    match &report.semigroup_plateau {
        Some(p) => {
            kv.push(("semigroup", p.verdict.to_string()));
            kv.push(("t_probe", format!("{:e}", p.t_probe)));
            kv.push(("h_plateau", format!("{:.16e}", p.h_plateau)));
            kv.push(("epsilon_r", format!("{:.16e}", p.epsilon_r)));
        }
        None => kv.push(("semigroup", "error".to_string())),
    }
    if let Some(d) = &report.dichotomy {
        kv.push(("dichotomy", d.class.to_string()));
    }
    let passed = report.consistency.iter().filter(|f| f.passed).count();
    kv.push(("flags_passed", format!("{passed}/{}", report.consistency.len())));
    kv.push(("errors", report.errors.len().to_string()));
    kv.push(("final", report.final_verdict.to_string()));
    kv
}
