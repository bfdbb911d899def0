use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{timing_report, Experiment, Phase, ResultsBundle, TimingReport};
use crate::error::Result;
use crate::stgraph::MetricsReport;

/// Plain text table with columns padded to their widest cell. Numeric
/// columns are right-aligned.
#[derive(Clone, Debug, Default)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(Into::into).collect());
    }

    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut width: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (c, cell) in r.iter().enumerate().take(cols) {
                width[c] = width[c].max(cell.chars().count());
            }
        }
        let numeric = |c: usize| {
            !self.rows.is_empty()
                && self.rows.iter().all(|r| r.get(c).is_some_and(|s| s == "-" || s.parse::<f64>().is_ok()))
        };
        let right: Vec<bool> = (0..cols).map(numeric).collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (c, w) in width.iter().enumerate() {
                let cell = cells.get(c).map(String::as_str).unwrap_or("");
                if c > 0 {
                    s.push_str("  ");
                }
                if right[c] {
                    let _ = write!(s, "{cell:>w$}");
                } else {
                    let _ = write!(s, "{cell:<w$}");
                }
            }
            s.trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

fn num(x: f64) -> String {
    format!("{x:.4}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| "-".into())
}

fn phase_name(p: &Phase) -> &'static str {
    match p {
        Phase::Full => "full",
        Phase::Unlearned => "unlearned",
    }
}

/// One row per seed, method and phase.
fn metric_rows(bundle: &ResultsBundle) -> Vec<(u64, String, &'static str, &MetricsReport)> {
    let mut out = Vec::new();
    for s in &bundle.seeds {
        for r in &s.runs {
            out.push((s.seed, r.method.name().to_string(), "full", &r.full));
            if let Some(u) = &r.unlearned {
                out.push((s.seed, r.method.name().to_string(), "unlearned", u));
            }
        }
        if let Some(g) = &s.gold {
            out.push((s.seed, "gold".to_string(), "full", g));
        }
    }
    out
}

pub fn accuracy_table(bundle: &ResultsBundle) -> String {
    let mut t = Table::new(["seed", "method", "phase", "MAE", "RMSE", "R2", "trend_F1"]);
    for (seed, method, phase, m) in metric_rows(bundle) {
        t.push([seed.to_string(), method, phase.into(), num(m.mae), num(m.rmse), opt(m.r2), num(m.trend_f1)]);
    }
    t.render()
}

pub fn summary_table(bundle: &ResultsBundle) -> String {
    let mut t = Table::new(["method", "phase", "seeds", "MAE", "MAE_sd", "RMSE", "RMSE_sd", "MAE/gold"]);
    for r in &bundle.summary {
        t.push([
            r.method.clone(),
            phase_name(&r.phase).into(),
            r.seeds.to_string(),
            num(r.mae_mean),
            num(r.mae_std),
            num(r.rmse_mean),
            num(r.rmse_std),
            opt(r.mae_vs_gold),
        ]);
    }
    t.render()
}

pub fn bound_table(bundle: &ResultsBundle) -> String {
    let mut t = Table::new([
        "seed", "M", "delta_cut", "gap_bound", "gap_emp", "gap_ok", "shift_bound", "shift_emp", "shift_ok", "info_intra",
        "total_corr",
    ]);
    let mut note = None;
    for s in &bundle.seeds {
        if let Some(b) = &s.bound {
            t.push([
                s.seed.to_string(),
                b.m.to_string(),
                num(b.delta_cut),
                format!("{:.6}", b.gap_bound),
                format!("{:.6}", b.gap_empirical),
                b.gap_holds.to_string(),
                format!("{:.6}", b.shift_bound),
                format!("{:.6}", b.shift_empirical),
                b.shift_holds.to_string(),
                num(b.info_intra),
                num(b.total_corr),
            ]);
            note.get_or_insert_with(|| {
                let regime = if b.in_regime { "inside" } else { "outside" };
                format!("{}; M={} N={} is {regime} the stated regime (M <= 16, N <= 10^4)\n", b.epsilon_note, b.m, b.nodes)
            });
        }
    }
    let mut out = t.render();
    if let Some(n) = note {
        out.push_str(&n);
    }
    out
}

pub fn timing_table(report: &TimingReport) -> String {
    let mut t =
        Table::new(["method", "seeds", "stage1_sum", "stage1_max", "stage2", "build", "unlearn", "unlearn/scratch"]);
    for r in &report.rows {
        t.push([
            r.method.name().to_string(),
            r.seeds.to_string(),
            format!("{:.3}", r.stage1),
            format!("{:.3}", r.stage1_max),
            format!("{:.3}", r.stage2),
            format!("{:.3}", r.build),
            format!("{:.3}", r.unlearn),
            format!("{:.3}", r.ratio_vs_scratch),
        ]);
    }
    t.render()
}

/// Long-format metrics for plotting.
pub fn metrics_csv(bundle: &ResultsBundle) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "method", "phase", "mae", "mse", "rmse", "r2", "trend_f1"])
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    for (seed, method, phase, m) in metric_rows(bundle) {
        let r2 = m.r2.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            seed.to_string(),
            method,
            phase.to_string(),
            m.mae.to_string(),
            m.mse.to_string(),
            m.rmse.to_string(),
            r2,
            m.trend_f1.to_string(),
        ])
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// All tables of a bundle as one text report.
pub fn render_report(bundle: &ResultsBundle, timings: Option<&TimingReport>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "dataset {} ({} nodes, {} steps)\n", bundle.dataset_digest, bundle.nodes, bundle.timesteps);
    let _ = writeln!(out, "Summary\n{}", summary_table(bundle));
    if let Some(k) = bundle.callosum_beats_sisa {
        let _ = writeln!(out, "callosum MAE <= sisa MAE after unlearning on {k} of {} seeds\n", bundle.seeds.len());
    }
    let _ = writeln!(out, "Per seed\n{}", accuracy_table(bundle));
    if bundle.seeds.iter().any(|s| s.bound.is_some()) {
        let _ = writeln!(out, "Bounds\n{}", bound_table(bundle));
    }
    let certs: Vec<_> = bundle.seeds.iter().filter_map(|s| s.certificate.as_ref().map(|c| (s.seed, c))).collect();
    if !certs.is_empty() {
        let mut t = Table::new(["seed", "deleted", "retrained", "equivalence", "ledger", "probe", "valid"]);
        for (seed, c) in certs {
            t.push([
                seed.to_string(),
                c.request.nodes.len().to_string(),
                format!("{:?}", c.retrained_subgraphs),
                c.equivalence.to_string(),
                c.ledger_clean.to_string(),
                c.influence_probe.map(|b| b.to_string()).unwrap_or_else(|| "-".into()),
                c.valid.to_string(),
            ]);
        }
        let _ = writeln!(out, "Certificates\n{}", t.render());
    }
    if let Some(tr) = timings {
        let _ = writeln!(out, "Wall clock (s)\n{}", timing_table(tr));
    }
    out
}

fn json_bytes<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(value)?;
    b.push(b'\n');
    Ok(b)
}

/// Writes `bundle.json`, `report.txt`, `metrics.csv`, `timings.json` and a
/// `seed-<s>/` directory per seed.
///
/// Each seed directory is assembled under a temporary name and renamed into
/// place. Everything except the two timing files is a pure function of the
/// config and seeds.
pub fn write_outputs(dir: &Path, exp: &Experiment) -> Result<()> {
    fs::create_dir_all(dir)?;
    let timings = timing_report(&exp.timings).ok();
    for s in &exp.bundle.seeds {
        let final_dir = dir.join(format!("seed-{}", s.seed));
        let tmp = dir.join(format!(".seed-{}.tmp", s.seed));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp)?;
        fs::write(tmp.join("result.json"), json_bytes(s)?)?;
        if let Some(c) = &s.certificate {
            fs::write(tmp.join("certificate.json"), json_bytes(c)?)?;
        }
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir)?;
        }
        fs::rename(&tmp, &final_dir)?;
    }
    fs::write(dir.join("bundle.json"), json_bytes(&exp.bundle)?)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&exp.bundle)?)?;
    fs::write(dir.join("report.txt"), render_report(&exp.bundle, None))?;
    let mut timing_json = serde_json::json!({ "records": exp.timings });
    if let Some(t) = &timings {
        timing_json["report"] = serde_json::to_value(t)?;
        fs::write(dir.join("timings.txt"), timing_table(t))?;
    }
    fs::write(dir.join("timings.json"), json_bytes(&timing_json)?)?;
    Ok(())
}
