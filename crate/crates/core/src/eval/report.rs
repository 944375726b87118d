use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, RetrievalMetrics};

pub const CSV_HEADER: [&str; 12] = [
    "run_id",
    "phase",
    "p",
    "mask_fraction",
    "modality",
    "seed",
    "R@1",
    "R@5",
    "R@10",
    "MdR",
    "MnR",
    "gm",
];

/// One evaluated run. `p` and `mask_fraction` are empty for runs without
/// pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub phase: String,
    pub p: Option<f64>,
    pub mask_fraction: Option<f64>,
    pub modality: String,
    pub seed: u64,
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "MdR")]
    pub mdr: f64,
    #[serde(rename = "MnR")]
    pub mnr: f64,
    pub gm: f64,
}

impl ResultRow {
    pub fn new(
        phase: &str,
        p: Option<f64>,
        mask_fraction: Option<f64>,
        modality: &str,
        seed: u64,
        m: &RetrievalMetrics,
    ) -> Self {
        let fmt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |v| format!("{v}"));
        Self {
            run_id: format!("{phase}_p{}_f{}_{modality}_s{seed}", fmt(p), fmt(mask_fraction)),
            phase: phase.to_string(),
            p,
            mask_fraction,
            modality: modality.to_string(),
            seed,
            r1: m.r1,
            r5: m.r5,
            r10: m.r10,
            mdr: m.mdr,
            mnr: m.mnr,
            gm: m.geometric_mean(),
        }
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(super::EvalError::Config(format!(
            "{} does not have the results header {:?}",
            path.display(),
            CSV_HEADER
        )));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed-aggregated results of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub phase: String,
    pub p: Option<f64>,
    pub mask_fraction: Option<f64>,
    pub modality: String,
    pub n_seeds: usize,
    /// (mean, std) for R@1, R@5, R@10, MdR, MnR, gm.
    pub stats: [(f64, f64); 6],
}

impl SummaryRow {
    pub fn r10(&self) -> (f64, f64) {
        self.stats[2]
    }
}

/// Groups rows by (phase, p, mask_fraction, modality) in first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let key = |r: &ResultRow| (r.phase.clone(), r.p.map(f64::to_bits), r.mask_fraction.map(f64::to_bits), r.modality.clone());
    let mut keys = Vec::new();
    for r in rows {
        let k = key(r);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|k| {
            let group: Vec<&ResultRow> = rows.iter().filter(|r| key(r) == k).collect();
            let col = |f: fn(&ResultRow) -> f64| mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                phase: k.0,
                p: k.1.map(f64::from_bits),
                mask_fraction: k.2.map(f64::from_bits),
                modality: k.3,
                n_seeds: group.len(),
                stats: [
                    col(|r| r.r1),
                    col(|r| r.r5),
                    col(|r| r.r10),
                    col(|r| r.mdr),
                    col(|r| r.mnr),
                    col(|r| r.gm),
                ],
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

/// Plain-text table: recalls in percent as `mean ± std`, one row per configuration.
pub fn render_table_txt(summary: &[SummaryRow]) -> String {
    let head = ["phase", "p", "mask", "modality", "seeds", "R@1", "R@5", "R@10", "MdR", "MnR", "gm"];
    let mut cells: Vec<Vec<String>> = vec![head.iter().map(|s| s.to_string()).collect()];
    for s in summary {
        let pct = |(m, sd): (f64, f64)| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * sd);
        let raw = |(m, sd): (f64, f64)| format!("{m:.1} ± {sd:.1}");
        cells.push(vec![
            s.phase.clone(),
            opt(s.p),
            opt(s.mask_fraction),
            s.modality.clone(),
            s.n_seeds.to_string(),
            pct(s.stats[0]),
            pct(s.stats[1]),
            pct(s.stats[2]),
            raw(s.stats[3]),
            raw(s.stats[4]),
            format!("{:.4} ± {:.4}", s.stats[5].0, s.stats[5].1),
        ]);
    }
    let widths: Vec<usize> = (0..head.len())
        .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("  "));
            out.push('\n');
        }
    }
    out
}

/// Writes `table.csv` (mean/std columns) and `table.txt` into `dir`.
pub fn write_report(rows: &[ResultRow], dir: &Path) -> Result<Vec<SummaryRow>> {
    std::fs::create_dir_all(dir)?;
    let summary = summarize(rows);
    let mut w = csv::Writer::from_path(dir.join("table.csv"))?;
    let mut header = vec!["phase", "p", "mask_fraction", "modality", "n_seeds"].into_iter().map(String::from).collect::<Vec<_>>();
    for m in ["R@1", "R@5", "R@10", "MdR", "MnR", "gm"] {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for s in &summary {
        let mut rec = vec![s.phase.clone(), opt(s.p), opt(s.mask_fraction), s.modality.clone(), s.n_seeds.to_string()];
        for (m, sd) in s.stats {
            rec.push(format!("{m:.6}"));
            rec.push(format!("{sd:.6}"));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    std::fs::write(dir.join("table.txt"), render_table_txt(&summary))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(r10: f64) -> RetrievalMetrics {
        RetrievalMetrics {
            r1: r10 / 4.0,
            r5: r10 / 2.0,
            r10,
            r50: 1.0,
            mdr: 12.5,
            mnr: 30.0,
            n_queries: 250,
            n_candidates: 250,
        }
    }

    #[test]
    fn csv_round_trip_and_report_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<ResultRow> = [1.0, 0.8]
            .iter()
            .flat_map(|&p| (0..3).map(move |s| ResultRow::new("finetune", Some(p), Some(1.0), "all", s, &metrics(0.3 + 0.01 * s as f64))))
            .collect();
        let path = dir.path().join("results.csv");
        write_results_csv(&path, &rows).unwrap();
        assert_eq!(read_results_csv(&path).unwrap(), rows);
        let summary = write_report(&rows, &dir.path().join("a")).unwrap();
        assert_eq!(summary.len(), 2);
        assert_eq!(summary[0].n_seeds, 3);
        write_report(&read_results_csv(&path).unwrap(), &dir.path().join("b")).unwrap();
        for f in ["table.csv", "table.txt"] {
            assert_eq!(
                std::fs::read(dir.path().join("a").join(f)).unwrap(),
                std::fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
        let txt = std::fs::read_to_string(dir.path().join("a/table.txt")).unwrap();
        assert_eq!(txt.lines().count(), 4);
        assert!(txt.contains("31.0 ± 1.0"));
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn scratch_rows_leave_p_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_results_csv(&path, &[ResultRow::new("scratch", None, None, "all", 0, &metrics(0.2))]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap() == CSV_HEADER.join(","));
        assert!(text.lines().nth(1).unwrap().starts_with("scratch_pna_fna_all_s0,scratch,,,all,0,"));
    }
}
