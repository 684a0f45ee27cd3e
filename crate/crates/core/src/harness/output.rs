//! CSV summaries and persisted loss tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::supersample::{LossQuad, LossTable, MembershipVectors};

use super::runner::ExperimentResult;
use super::HarnessError;

pub const CSV_HEADER: &str =
    "config_hash,n,m,t1,t2,trainer,bound,value,empirical_risk,gap,gap_std_err,failures";

/// One parsed summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub config_hash: String,
    pub n: usize,
    pub m: usize,
    pub t1: usize,
    pub t2: usize,
    pub trainer: String,
    pub bound: String,
    pub value: f64,
    pub empirical_risk: f64,
    pub gap: f64,
    pub gap_std_err: f64,
    pub failures: usize,
}

/// Nine significant digits, exponent form.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

pub fn csv_rows(results: &[ExperimentResult]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for r in results {
        let c = &r.config;
        for e in &r.report.entries {
            rows.push(CsvRow {
                config_hash: c.config_hash(),
                n: c.n,
                m: c.m,
                t1: c.t1,
                t2: c.t2,
                trainer: c.trainer.name().to_string(),
                bound: e.name.clone(),
                value: e.value,
                empirical_risk: r.report.empirical_risk,
                gap: r.report.gap,
                gap_std_err: r.report.gap_std_err,
                failures: r.report.failures,
            });
        }
    }
    rows
}

pub fn render_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config_hash,
            r.n,
            r.m,
            r.t1,
            r.t2,
            r.trainer,
            r.bound,
            fmt_float(r.value),
            fmt_float(r.empirical_risk),
            fmt_float(r.gap),
            fmt_float(r.gap_std_err),
            r.failures
        );
    }
    out
}

fn io_error(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_csv(results: &[ExperimentResult], path: &Path) -> Result<(), HarnessError> {
    fs::write(path, render_csv(&csv_rows(results))).map_err(|e| io_error(path, e))
}

fn parse_field<T: std::str::FromStr>(line: usize, name: &str, raw: &str) -> Result<T, HarnessError> {
    raw.parse().map_err(|_| HarnessError::Parse {
        line,
        msg: format!("bad {name} `{raw}`"),
    })
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, HarnessError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(HarnessError::Parse {
                line: 1,
                msg: "missing or unexpected header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (k, line) in lines {
        let no = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(HarnessError::Parse {
                line: no,
                msg: format!("expected 12 fields, found {}", f.len()),
            });
        }
        rows.push(CsvRow {
            config_hash: f[0].to_string(),
            n: parse_field(no, "n", f[1])?,
            m: parse_field(no, "m", f[2])?,
            t1: parse_field(no, "t1", f[3])?,
            t2: parse_field(no, "t2", f[4])?,
            trainer: f[5].to_string(),
            bound: f[6].to_string(),
            value: parse_field(no, "value", f[7])?,
            empirical_risk: parse_field(no, "empirical_risk", f[8])?,
            gap: parse_field(no, "gap", f[9])?,
            gap_std_err: parse_field(no, "gap_std_err", f[10])?,
            failures: parse_field(no, "failures", f[11])?,
        });
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, HarnessError> {
    parse_csv(&fs::read_to_string(path).map_err(|e| io_error(path, e))?)
}

/// One line per cell: `run t1 t2 i j s_tilde_i s_j l00 l11 l10 l01`.
/// Losses use the shortest representation that parses back exactly.
pub fn render_loss_tables<'a, I>(tables: I) -> String
where
    I: IntoIterator<Item = &'a LossTable>,
{
    let mut out = String::from("# run t1 t2 i j s_tilde s l00 l11 l10 l01\n");
    for t in tables {
        for i in 0..t.n {
            for j in 0..t.m {
                let q = t.quad(i, j);
                let _ = writeln!(
                    out,
                    "{} {} {} {} {} {} {} {:?} {:?} {:?} {:?}",
                    t.run_id, t.t1_index, t.t2_index, i, j, t.masks.s_tilde[i], t.masks.s[j], q.l00, q.l11, q.l10, q.l01
                );
            }
        }
    }
    out
}

struct PartialTable {
    key: (usize, usize, usize),
    cells: Vec<(usize, usize, u8, u8, LossQuad)>,
}

fn finish(p: PartialTable) -> Result<LossTable, HarnessError> {
    let n = p.cells.iter().map(|c| c.0).max().map_or(0, |v| v + 1);
    let m = p.cells.iter().map(|c| c.1).max().map_or(0, |v| v + 1);
    let bad = |msg: String| HarnessError::Parse { line: 0, msg };
    if p.cells.len() != n * m {
        return Err(bad(format!("run {} has {} cells, expected {}", p.key.0, p.cells.len(), n * m)));
    }
    let mut quads = vec![None; n * m];
    let mut s_tilde = vec![None; n];
    let mut s = vec![None; m];
    for (i, j, a, b, q) in p.cells {
        if quads[i * m + j].replace(q).is_some() {
            return Err(bad(format!("run {} repeats cell ({i}, {j})", p.key.0)));
        }
        for (slot, v) in [(&mut s_tilde[i], a), (&mut s[j], b)] {
            if slot.is_some_and(|old| old != v) {
                return Err(bad(format!("run {} has inconsistent masks", p.key.0)));
            }
            *slot = Some(v);
        }
    }
    Ok(LossTable {
        run_id: p.key.0,
        t1_index: p.key.1,
        t2_index: p.key.2,
        n,
        m,
        quads: quads.into_iter().map(|q| q.expect("all cells present")).collect(),
        masks: MembershipVectors::new(
            s_tilde.into_iter().map(|v| v.expect("set")).collect(),
            s.into_iter().map(|v| v.expect("set")).collect(),
        ),
    })
}

pub fn parse_loss_tables(text: &str) -> Result<Vec<LossTable>, HarnessError> {
    let mut tables = Vec::new();
    let mut current: Option<PartialTable> = None;
    for (k, line) in text.lines().enumerate() {
        let no = k + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 11 {
            return Err(HarnessError::Parse {
                line: no,
                msg: format!("expected 11 fields, found {}", f.len()),
            });
        }
        let key = (
            parse_field(no, "run", f[0])?,
            parse_field(no, "t1", f[1])?,
            parse_field(no, "t2", f[2])?,
        );
        let bit = |raw: &str| -> Result<u8, HarnessError> {
            match raw {
                "0" => Ok(0),
                "1" => Ok(1),
                _ => Err(HarnessError::Parse {
                    line: no,
                    msg: format!("mask bit `{raw}`"),
                }),
            }
        };
        let cell = (
            parse_field(no, "i", f[3])?,
            parse_field(no, "j", f[4])?,
            bit(f[5])?,
            bit(f[6])?,
            LossQuad::new(
                parse_field(no, "l00", f[7])?,
                parse_field(no, "l11", f[8])?,
                parse_field(no, "l10", f[9])?,
                parse_field(no, "l01", f[10])?,
            ),
        );
        match current.as_mut() {
            Some(p) if p.key == key => p.cells.push(cell),
            _ => {
                if let Some(p) = current.take() {
                    tables.push(finish(p)?);
                }
                current = Some(PartialTable { key, cells: vec![cell] });
            }
        }
    }
    if let Some(p) = current {
        tables.push(finish(p)?);
    }
    Ok(tables)
}

pub fn write_loss_tables<'a, I>(tables: I, path: &Path) -> Result<(), HarnessError>
where
    I: IntoIterator<Item = &'a LossTable>,
{
    fs::write(path, render_loss_tables(tables)).map_err(|e| io_error(path, e))
}

pub fn read_loss_tables(path: &Path) -> Result<Vec<LossTable>, HarnessError> {
    parse_loss_tables(&fs::read_to_string(path).map_err(|e| io_error(path, e))?)
}
