//! Plain-text tables from the sweep and campaign CSVs.

use std::collections::BTreeMap;

use head_core::Error;

use crate::CliError;

pub const KNOWN_CSVS: [&str; 3] = ["sweep_tlast.csv", "sweep_p.csv", "campaign.csv"];

fn cell(raw: &str) -> String {
    match raw.parse::<f64>() {
        Ok(v) if raw.contains('.') || raw.contains('e') => format!("{v:.4}"),
        _ => raw.to_string(),
    }
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn read(bytes: &[u8]) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut reader = csv::Reader::from_reader(bytes);
    let header = reader
        .headers()
        .map_err(Error::from)?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .map_err(Error::from)?;
    Ok((header, rows))
}

/// `sweep_p.csv` pivots to one row per p and one column per t_last.
pub fn render_csv(name: &str, bytes: &[u8]) -> Result<String, CliError> {
    let (header, rows) = read(bytes)?;
    if name == "sweep_p.csv" && header == ["p", "t_last", "saving_cf"] {
        let mut t_lasts: Vec<usize> = Vec::new();
        let mut by_p: BTreeMap<String, BTreeMap<usize, String>> = BTreeMap::new();
        for r in &rows {
            let t: usize = r[1]
                .parse()
                .map_err(|_| CliError::Usage(format!("bad t_last `{}` in {name}", r[1])))?;
            if !t_lasts.contains(&t) {
                t_lasts.push(t);
            }
            by_p.entry(cell(&r[0])).or_default().insert(t, cell(&r[2]));
        }
        t_lasts.sort_unstable();
        let mut head = vec!["p".to_string()];
        head.extend(t_lasts.iter().map(|t| format!("t_last={t}")));
        let body: Vec<Vec<String>> = by_p
            .into_iter()
            .map(|(p, cols)| {
                let mut row = vec![p];
                row.extend(t_lasts.iter().map(|t| cols.get(t).cloned().unwrap_or_default()));
                row
            })
            .collect();
        return Ok(table(&head, &body));
    }
    let body: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(|c| cell(c)).collect()).collect();
    Ok(table(&header, &body))
}
