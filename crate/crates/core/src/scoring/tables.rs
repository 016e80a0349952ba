//! Markdown and CSV emission of aggregated benchmark rows.

use super::{delta_pct, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

/// One metric for the three modes of one model.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ModeColumns {
    pub zs: Option<Summary>,
    pub tr: Option<Summary>,
    pub eo: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub time_min: ModeColumns,
    pub cost_usd: ModeColumns,
    /// Combined score as a fraction; shown as a percentage.
    pub score: ModeColumns,
}

/// Rounds half away from zero at `dp` decimals, after nudging values that
/// sit a hair below a half because of binary representation.
pub fn round_half_up(x: f64, dp: u32) -> f64 {
    let f = 10f64.powi(dp as i32);
    let scaled = x * f;
    let nudged = scaled + scaled.signum() * 1e-9 * scaled.abs().max(1.0);
    nudged.round() / f
}

fn fixed(x: f64, dp: u32) -> String {
    let r = round_half_up(x, dp);
    let s = format!("{r:.*}", dp as usize);
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn cell(s: Option<Summary>, dp: u32, scale: f64) -> String {
    match s {
        None => "—".into(),
        Some(s) => match s.std {
            Some(sd) => format!("{} ± {}", fixed(s.mean * scale, dp), fixed(sd * scale, dp)),
            None => fixed(s.mean * scale, dp),
        },
    }
}

fn delta_cell(c: &ModeColumns) -> String {
    match (c.zs, c.tr) {
        (Some(zs), Some(tr)) => match delta_pct(tr.mean, zs.mean) {
            Ok(d) => {
                let s = fixed(d, 1);
                if d > 0.0 && s != "0.0" {
                    format!("+{s}")
                } else {
                    s
                }
            }
            Err(_) => "n/a".into(),
        },
        _ => "—".into(),
    }
}

/// Emits one row per model with Time, Cost and Score groups. Mode columns
/// appear only for modes present in some row; Δ% appears when both
/// zero-shot and tool-reuse are present. Minutes and percentages use one
/// decimal, dollars two.
pub fn emit_tables(rows: &[TableRow], format: TableFormat) -> String {
    let any = |f: fn(&ModeColumns) -> bool| {
        rows.iter().any(|r| f(&r.time_min) || f(&r.cost_usd) || f(&r.score))
    };
    let has_zs = any(|c| c.zs.is_some());
    let has_tr = any(|c| c.tr.is_some());
    let has_eo = any(|c| c.eo.is_some());
    let has_delta = has_zs && has_tr;
    let no_mode = !(has_zs || has_tr || has_eo);

    let groups: [(&str, u32, f64, fn(&TableRow) -> &ModeColumns); 3] = [
        ("Time (min)", 1, 1.0, |r| &r.time_min),
        ("Cost (USD)", 2, 1.0, |r| &r.cost_usd),
        ("Score (%)", 1, 100.0, |r| &r.score),
    ];
    let mut header = vec!["Model".to_string()];
    for (name, ..) in &groups {
        if has_zs || no_mode {
            header.push(format!("{name} ZS"));
        }
        if has_tr || no_mode {
            header.push(format!("{name} TR"));
        }
        if has_delta || no_mode {
            header.push(format!("{name} Δ%"));
        }
        if has_eo || no_mode {
            header.push(format!("{name} EO"));
        }
    }
    let mut body = Vec::new();
    for r in rows {
        let mut line = vec![r.label.clone()];
        for (_, dp, scale, get) in &groups {
            let c = get(r);
            if has_zs {
                line.push(cell(c.zs, *dp, *scale));
            }
            if has_tr {
                line.push(cell(c.tr, *dp, *scale));
            }
            if has_delta {
                line.push(delta_cell(c));
            }
            if has_eo {
                line.push(cell(c.eo, *dp, *scale));
            }
        }
        body.push(line);
    }

    let mut out = String::new();
    match format {
        TableFormat::Markdown => {
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for line in body {
                out.push_str(&format!("| {} |\n", line.join(" | ")));
            }
        }
        TableFormat::Csv => {
            let mut w = csv_line(&header);
            for line in body {
                w.push_str(&csv_line(&line));
            }
            out = w;
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line(fields: &[String]) -> String {
    let mut s = fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

/// `label,axis,raw,normalized` rows for plotting.
pub fn radar_csv(labels: &[String], axes: &[super::RadarAxis], normalized: &super::NormalizedRadar) -> String {
    let mut out = String::from("label,axis,raw,normalized\n");
    for (a, axis) in axes.iter().enumerate() {
        for (i, label) in labels.iter().enumerate() {
            let (Some(raw), Some(norm)) = (axis.values.get(i), normalized.values[a].get(i)) else {
                continue;
            };
            out.push_str(&csv_line(&[label.clone(), axis.name.clone(), format!("{raw}"), fixed(*norm, 4)]));
        }
    }
    out
}
