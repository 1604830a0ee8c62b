//! The per-round diagnostics table and its machine-readable mirror.

use serde::{Deserialize, Serialize};

/// One row of the progress table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub scans: u64,
    pub restarts: u64,
    pub lambda: f64,
    pub time_s: f64,
    pub log_z_ratio: f64,
    pub min_alpha: f64,
    pub mean_alpha: f64,
}

const COLS: usize = 8;
const WIDTH: usize = 10;

pub fn table_rule() -> String {
    "-".repeat(COLS * WIDTH + COLS - 1)
}

pub fn table_header() -> String {
    let names = [
        "#scans",
        "restarts",
        "Λ",
        "time(s)",
        "allc(B)",
        "log(Z₁/Z₀)",
        "min(α)",
        "mean(α)",
    ];
    let cells: Vec<String> = names.iter().map(|n| pad_left(n, WIDTH)).collect();
    let mut out = cells.join(" ");
    out.push('\n');
    out.push_str(&vec!["-".repeat(WIDTH); COLS].join(" "));
    out
}

pub fn table_row(report: &RoundReport) -> String {
    let cells = [
        format_sig3(report.scans as f64),
        format_sig3(report.restarts as f64),
        format_sig3(report.lambda),
        format_sig3(report.time_s),
        String::new(), // allocation column intentionally blank
        format_sig3(report.log_z_ratio),
        format_sig3(report.min_alpha),
        format_sig3(report.mean_alpha),
    ];
    cells
        .iter()
        .map(|c| pad_left(c, WIDTH))
        .collect::<Vec<_>>()
        .join(" ")
}

fn pad_left(s: &str, width: usize) -> String {
    let len = s.chars().count();
    if len >= width {
        s.to_string()
    } else {
        format!("{}{}", " ".repeat(width - len), s)
    }
}

/// Three-significant-digit formatting in the C `%.3g` style: fixed point
/// for exponents in [-4, 2], scientific (`1.02e+03`) outside, trailing
/// zeros trimmed.
pub fn format_sig3(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".to_string()
        } else if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    let neg = x < 0.0;
    // let the formatter do the correct rounding to 3 significant digits
    let sci = format!("{:.2e}", x.abs());
    let (mantissa, exp_str) = sci.split_once('e').expect("exponential form");
    let exp: i32 = exp_str.parse().expect("exponent");
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let digits = digits.trim_end_matches('0');
    let digits = if digits.is_empty() { "0" } else { digits };

    let body = if !(-4..=2).contains(&exp) {
        let mant = if digits.len() == 1 {
            digits.to_string()
        } else {
            format!("{}.{}", &digits[..1], &digits[1..])
        };
        format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else if exp < 0 {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    } else {
        let point = (exp + 1) as usize;
        if digits.len() <= point {
            format!("{}{}", digits, "0".repeat(point - digits.len()))
        } else {
            format!("{}.{}", &digits[..point], &digits[point..])
        }
    };
    if neg {
        format!("-{body}")
    } else {
        body
    }
}

/// Serialize the table machine-readably: one JSON object per line, in
/// round order, keys matching [`RoundReport`]'s fields.
pub fn report_json(reports: &[RoundReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    out
}
