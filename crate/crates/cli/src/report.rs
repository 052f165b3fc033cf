//! Human-readable fit report and its machine-readable twin.

use std::fmt::Write;

use serde::Serialize;

use fragavg::{AveragedModel, FragmentaryDataset, PatternIndex};

#[derive(Debug, Serialize)]
pub struct PatternRow {
    pub k: usize,
    pub columns: Vec<String>,
    /// Subjects whose pattern is exactly this one (1-based).
    pub t: Vec<usize>,
    /// Subjects observing every column of the pattern (1-based).
    pub s: Vec<usize>,
    pub n_k: usize,
    pub p_k: usize,
}

pub fn pattern_rows(data: &FragmentaryDataset, index: &PatternIndex) -> Vec<PatternRow> {
    let one_based = |v: &[usize]| v.iter().map(|i| i + 1).collect::<Vec<_>>();
    index
        .patterns()
        .iter()
        .enumerate()
        .map(|(k, pat)| PatternRow {
            k: k + 1,
            columns: pat.indices.iter().map(|&j| data.column_names()[j].clone()).collect(),
            t: one_based(index.t_set(k)),
            s: one_based(index.s_set(k)),
            n_k: index.n_k(k),
            p_k: index.p_k(k),
        })
        .collect()
}

fn list(v: &[usize]) -> String {
    let parts: Vec<String> = v.iter().map(|i| i.to_string()).collect();
    format!("{{{}}}", parts.join(","))
}

/// Availability grid, one line per pattern, followed by its T and S sets.
pub fn patterns_text(data: &FragmentaryDataset, index: &PatternIndex) -> String {
    let names = data.column_names();
    let widths: Vec<usize> = names.iter().map(|n| n.len().max(1)).collect();
    let mut s = String::new();
    let _ = writeln!(s, "Response patterns: K = {}", index.len());
    let _ = writeln!(s, "n = {}, p = {}", data.n(), data.p());
    let _ = writeln!(s);

    let mut header = format!("{:>4}", "k");
    for (n, w) in names.iter().zip(&widths) {
        let _ = write!(header, " {n:>w$}");
    }
    let _ = write!(header, " {:>5} {:>5}", "n_k", "p_k");
    let _ = writeln!(s, "{header}");
    for k in 0..index.len() {
        let cols = &index.pattern(k).indices;
        let mut line = format!("{:>4}", k + 1);
        for (j, w) in widths.iter().enumerate() {
            let mark = if cols.binary_search(&j).is_ok() { "x" } else { "." };
            let _ = write!(line, " {mark:>w$}");
        }
        let _ = write!(line, " {:>5} {:>5}", index.n_k(k), index.p_k(k));
        let _ = writeln!(s, "{line}");
    }
    let _ = writeln!(s);
    for row in pattern_rows(data, index) {
        let _ = writeln!(s, "T_{} = {}", row.k, list(&row.t));
        let _ = writeln!(s, "S_{} = {}", row.k, list(&row.s));
    }
    s
}

pub fn model_text(model: &AveragedModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Averaged model ({})", model.family);
    let _ = writeln!(
        s,
        "weighting sample n_1 = {}, lambda_n = {:.6}",
        model.n_1, model.lambda_n
    );
    let _ = writeln!(s, "criterion = {:.10}", model.criterion_value);
    let d = &model.diagnostics;
    let _ = writeln!(
        s,
        "optimizer: converged = {}, iterations = {}, KKT residual = {:.3e}",
        d.converged, d.iterations, d.kkt_residual
    );
    if !d.complete_cases {
        let _ = writeln!(s, "note: no subject observes every covariate");
    }
    for p in &d.excluded_patterns {
        let _ = writeln!(s, "excluded (not evaluable on S_1): {p:?}");
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:>4} {:>6} {:>5} {:>10} {:>16}",
        "k", "n_k", "p_k", "weight", "loglik"
    );
    for (k, (c, w)) in model.candidates.iter().zip(model.weights.as_slice()).enumerate() {
        let _ = writeln!(
            s,
            "{:>4} {:>6} {:>5} {:>10.6} {:>16.6}",
            k + 1,
            c.n_k,
            c.p_k,
            w,
            c.loglik
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "combined coefficients:");
    for (name, b) in model.column_names.iter().zip(model.beta_combined.iter()) {
        let _ = writeln!(s, "  {name} = {b:.8}");
    }
    s
}
