//! Report rendering: TSV, Markdown, and JSON lines.

use super::{format_2dp, round_half_up, BenchReport, BenchRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Tsv,
    Markdown,
}

const HEADER: [&str; 4] = ["label", "cipher", "mbit/s", "LLR"];

fn cells(row: &BenchRow) -> [String; 4] {
    match &row.failed {
        Some(_) => [row.label.clone(), row.cipher.clone(), "failed".into(), "-".into()],
        None => [row.label.clone(), row.cipher.clone(), speed_cell(row.mbps), format_2dp(row.llr)],
    }
}

/// Rows in report order: speed as an integer, LLR at two decimals.
/// Whole mbit/s like a printed table, with decimals kept for slow rows.
fn speed_cell(mbps: f64) -> String {
    if mbps >= 10.0 {
        format!("{:.0}", round_half_up(mbps, 0))
    } else {
        format_2dp(mbps)
    }
}

pub fn render_report(report: &BenchReport, format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Tsv => {
            out.push_str(&HEADER.join("\t"));
            out.push('\n');
            for row in &report.rows {
                out.push_str(&cells(row).join("\t"));
                out.push('\n');
            }
        }
        Format::Markdown => {
            out.push_str(&format!("| {} |\n", HEADER.join(" | ")));
            out.push_str("|---|---|---:|---:|\n");
            for row in &report.rows {
                out.push_str(&format!("| {} |\n", cells(row).join(" | ")));
            }
        }
    }
    out
}

/// One JSON object per row with keys label, cipher, mbps, llr, bytes,
/// seconds; failed rows carry `null` speeds and an `error` string.
pub fn render_json(report: &BenchReport) -> String {
    let mut out = String::new();
    for row in &report.rows {
        let v = match &row.failed {
            None => serde_json::json!({
                "label": row.label,
                "cipher": row.cipher,
                "mbps": row.mbps,
                "llr": row.llr,
                "bytes": row.bytes,
                "seconds": row.seconds,
            }),
            Some(err) => serde_json::json!({
                "label": row.label,
                "cipher": row.cipher,
                "mbps": null,
                "llr": null,
                "bytes": row.bytes,
                "seconds": row.seconds,
                "error": err,
            }),
        };
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

/// Parses a Markdown table back into rows of cells, skipping the header
/// and separator lines.
pub fn parse_markdown(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(str::trim)
        .filter(|l| l.starts_with('|') && l.ends_with('|') && l.len() >= 2)
        .map(|l| l[1..l.len() - 1].split('|').map(|c| c.trim().to_string()).collect::<Vec<_>>())
        .filter(|cells| !cells.iter().all(|c| c.chars().all(|ch| ch == '-' || ch == ':')))
        .skip(1)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::DiskProbe;

    fn probe() -> DiskProbe {
        DiskProbe { read_mbps: 3072.0, write_mbps: 1136.0, bytes: 0 }
    }

    #[test]
    fn empty_tsv_is_header() {
        let r = BenchReport { probe: probe(), rows: vec![] };
        assert_eq!(render_report(&r, Format::Tsv), "label\tcipher\tmbit/s\tLLR\n");
    }

    #[test]
    fn markdown_round_trips() {
        let rows = vec![
            BenchRow::from_speed("udrift", "none", 752.4, &probe()).unwrap(),
            BenchRow::from_speed("stop-and-wait", "blowfish", 280.0, &probe()).unwrap(),
            BenchRow::failed("udrift", "blowfish", "timeout".into()),
        ];
        let r = BenchReport { probe: probe(), rows };
        let md = render_report(&r, Format::Markdown);
        let parsed = parse_markdown(&md);
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[0], ["udrift", "none", "752", "0.66"]);
        assert_eq!(parsed[1], ["stop-and-wait", "blowfish", "280", "0.25"]);
        assert_eq!(parsed[2], ["udrift", "blowfish", "failed", "-"]);
    }

    #[test]
    fn slow_rows_keep_decimals() {
        assert_eq!(speed_cell(752.5), "753");
        assert_eq!(speed_cell(10.0), "10");
        assert_eq!(speed_cell(0.105), "0.11");
        assert_eq!(speed_cell(9.994), "9.99");
    }

    #[test]
    fn json_keys() {
        let r = BenchReport { probe: probe(), rows: vec![BenchRow::from_speed("u", "none", 100.0, &probe()).unwrap()] };
        let line = render_json(&r);
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["bytes", "cipher", "label", "llr", "mbps", "seconds"]);
    }
}
