use std::fmt::Write as _;

use super::{EvalError, EvalReport, ReportRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    /// Tab-separated numeric columns with a header line.
    PlotData,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
            Self::PlotData => "dat",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "plot-data" => Ok(Self::PlotData),
            other => Err(EvalError::UnknownFormat(other.to_string())),
        }
    }
}

/// Rounds to 9 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

const CSV_HEADER: &str = "group,reward,mean,std_error,n,ci_low,ci_high,win_fraction,baseline_mean,diverged";

fn num(x: f64) -> String {
    // shortest round-trip form of an already rounded value
    format!("{}", round_sig(x))
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            out = serde_json::to_string_pretty(report).expect("report serialises");
            out.push('\n');
        }
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in &report.rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    csv_field(&r.group),
                    csv_field(&r.reward),
                    num(r.mean),
                    num(r.std_error),
                    r.n,
                    opt(r.ci_low),
                    opt(r.ci_high),
                    opt(r.win_fraction),
                    opt(r.baseline_mean),
                    r.diverged
                )
                .unwrap();
            }
        }
        ReportFormat::PlotData => {
            out.push_str("x\tmean\tstd_error\tci_low\tci_high\tbaseline_mean\n");
            for (i, r) in report.rows.iter().enumerate() {
                // numeric group suffixes such as `size=250` become the x value
                let x = r
                    .group
                    .rsplit('=')
                    .next()
                    .and_then(|v| v.parse::<f64>().ok())
                    .unwrap_or(i as f64);
                let o = |v: Option<f64>| v.map(num).unwrap_or_else(|| "nan".into());
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    num(x),
                    num(r.mean),
                    num(r.std_error),
                    o(r.ci_low),
                    o(r.ci_high),
                    o(r.baseline_mean)
                )
                .unwrap();
            }
        }
    }
    out
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

/// Rows of a CSV written by [`emit_report`].
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>, EvalError> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(EvalError::Parse("unexpected CSV header".into()));
    }
    let f = |s: &str| -> Result<f64, EvalError> { s.parse().map_err(|_| EvalError::Parse(format!("bad number {s:?}"))) };
    let o = |s: &str| -> Result<Option<f64>, EvalError> { if s.is_empty() { Ok(None) } else { f(s).map(Some) } };
    let u = |s: &str| -> Result<usize, EvalError> { s.parse().map_err(|_| EvalError::Parse(format!("bad count {s:?}"))) };
    lines
        .map(|line| {
            let v = split_csv_line(line);
            if v.len() != 10 {
                return Err(EvalError::Parse(format!("expected 10 fields, got {}", v.len())));
            }
            Ok(ReportRow {
                group: v[0].clone(),
                reward: v[1].clone(),
                mean: f(&v[2])?,
                std_error: f(&v[3])?,
                n: u(&v[4])?,
                ci_low: o(&v[5])?,
                ci_high: o(&v[6])?,
                win_fraction: o(&v[7])?,
                baseline_mean: o(&v[8])?,
                diverged: u(&v[9])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        EvalReport::new(
            "t",
            10,
            vec![1, 2],
            vec![
                ReportRow {
                    group: "size=250".into(),
                    reward: "neg_sq_distance".into(),
                    mean: -0.123_456_789_123,
                    std_error: 0.001,
                    n: 40,
                    ci_low: Some(-0.2),
                    ci_high: None,
                    win_fraction: Some(0.5),
                    baseline_mean: Some(-1.0 / 3.0),
                    diverged: 0,
                },
                ReportRow {
                    group: "a, \"b\"".into(),
                    reward: "r".into(),
                    mean: 12_345.678_901_234,
                    std_error: 0.0,
                    n: 1,
                    ci_low: None,
                    ci_high: None,
                    win_fraction: None,
                    baseline_mean: None,
                    diverged: 2,
                },
            ],
        )
    }

    #[test]
    fn rounding() {
        assert_eq!(round_sig(-0.123_456_789_123), -0.123_456_789);
        assert_eq!(round_sig(12_345.678_901_234), 12345.6789);
        assert_eq!(round_sig(0.0), 0.0);
    }

    #[test]
    fn golden_csv() {
        let csv = emit_report(&report(), ReportFormat::Csv);
        assert_eq!(
            csv,
            "group,reward,mean,std_error,n,ci_low,ci_high,win_fraction,baseline_mean,diverged\n\
             size=250,neg_sq_distance,-0.123456789,0.001,40,-0.2,,0.5,-0.333333333,0\n\
             \"a, \"\"b\"\"\",r,12345.6789,0,1,,,,,2\n"
        );
    }

    #[test]
    fn json_csv_json_round_trip() {
        let r = report();
        let json = emit_report(&r, ReportFormat::Json);
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        let rows = parse_csv(&emit_report(&back, ReportFormat::Csv)).unwrap();
        let rebuilt = EvalReport { rows, ..back.clone() };
        let again: EvalReport = serde_json::from_str(&emit_report(&rebuilt, ReportFormat::Json)).unwrap();
        for (a, b) in r.rows.iter().zip(&again.rows) {
            assert!((a.mean - b.mean).abs() <= 1e-12 * a.mean.abs().max(1.0));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn plot_data_uses_numeric_group() {
        let dat = emit_report(&report(), ReportFormat::PlotData);
        let lines: Vec<&str> = dat.lines().collect();
        assert_eq!(lines[0], "x\tmean\tstd_error\tci_low\tci_high\tbaseline_mean");
        assert!(lines[1].starts_with("250\t-0.123456789\t"));
        assert!(lines[2].starts_with("1\t"));
    }

    #[test]
    fn unknown_format_rejected() {
        assert!(matches!("xlsx".parse::<ReportFormat>(), Err(EvalError::UnknownFormat(_))));
        assert_eq!("plot-data".parse::<ReportFormat>().unwrap(), ReportFormat::PlotData);
    }

    #[test]
    fn runtime_is_not_emitted() {
        let mut a = report();
        let mut b = report();
        a.runtime_secs = 1.0;
        b.runtime_secs = 2.0;
        for f in [ReportFormat::Csv, ReportFormat::Json, ReportFormat::PlotData] {
            assert_eq!(emit_report(&a, f), emit_report(&b, f));
        }
    }
}
