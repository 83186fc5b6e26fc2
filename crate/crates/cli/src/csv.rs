//! Plain CSV emitters and parsers for reports, training logs and sweep
//! curves. Floats use the shortest representation that parses back to the
//! same value.

use anyhow::{bail, ensure, Context, Result};
use rfga_core::wsol::WsolReport;

fn fields(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

fn num(s: &str, line: usize) -> Result<f64> {
    s.parse().with_context(|| format!("line {line}: bad number '{s}'"))
}

/// Splits text into blank-line separated blocks of `(line number, line)`.
fn blocks(text: &str) -> Vec<Vec<(usize, &str)>> {
    let mut out = vec![Vec::new()];
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            if !out.last().unwrap().is_empty() {
                out.push(Vec::new());
            }
        } else {
            out.last_mut().unwrap().push((i + 1, l));
        }
    }
    out.retain(|b| !b.is_empty());
    out
}

fn expect_header(block: &[(usize, &str)], header: &str) -> Result<()> {
    let (line, h) = block.first().context("empty block")?;
    ensure!(*h == header, "line {line}: expected header '{header}', got '{h}'");
    Ok(())
}

/// Rows of a numeric block with a fixed column count.
fn numeric_rows(block: &[(usize, &str)], header: &str) -> Result<Vec<Vec<f64>>> {
    expect_header(block, header)?;
    let width = header.split(',').count();
    block[1..]
        .iter()
        .map(|&(line, l)| {
            let f = fields(l);
            ensure!(f.len() == width, "line {line}: expected {width} fields, got {}", f.len());
            f.iter().map(|s| num(s, line)).collect()
        })
        .collect()
}

pub const REPORT_GRID_HEADER: &str = "delta,tau,acc";
pub const REPORT_SUMMARY_HEADER: &str = "delta,max_box_acc,optimal_tau";
pub const REPORT_MIOU_HEADER: &str = "tau,miou";

/// Full (δ, τ) grid, per-δ summary, the mIoU curve and the two scalars.
pub fn emit_report(r: &WsolReport) -> String {
    let mut s = String::from(REPORT_GRID_HEADER);
    s.push('\n');
    for (d, row) in r.deltas.iter().zip(&r.acc) {
        for (t, a) in r.tau_grid.iter().zip(row) {
            s += &format!("{d},{t},{a}\n");
        }
    }
    s += &format!("\n{REPORT_SUMMARY_HEADER}\n");
    for ((d, m), t) in r.deltas.iter().zip(&r.max_box_acc).zip(&r.optimal_tau) {
        s += &format!("{d},{m},{t}\n");
    }
    s += &format!("\n{REPORT_MIOU_HEADER}\n");
    for (t, m) in r.tau_grid.iter().zip(&r.miou_curve) {
        s += &format!("{t},{m}\n");
    }
    s += &format!(
        "\noverall_optimal_tau,{}\nmiou,{}\n",
        r.overall_optimal_tau, r.miou_at_optimal_tau
    );
    s
}

pub fn parse_report(text: &str) -> Result<WsolReport> {
    let b = blocks(text);
    ensure!(b.len() == 4, "expected 4 blocks in report, got {}", b.len());
    let grid = numeric_rows(&b[0], REPORT_GRID_HEADER)?;
    let summary = numeric_rows(&b[1], REPORT_SUMMARY_HEADER)?;
    let miou = numeric_rows(&b[2], REPORT_MIOU_HEADER)?;
    let deltas: Vec<f64> = summary.iter().map(|r| r[0]).collect();
    let tau_grid: Vec<f64> = miou.iter().map(|r| r[0]).collect();
    ensure!(
        grid.len() == deltas.len() * tau_grid.len(),
        "grid has {} rows, expected {}",
        grid.len(),
        deltas.len() * tau_grid.len()
    );
    let mut acc = Vec::new();
    for (i, &d) in deltas.iter().enumerate() {
        let rows = &grid[i * tau_grid.len()..(i + 1) * tau_grid.len()];
        for (r, &t) in rows.iter().zip(&tau_grid) {
            ensure!(r[0] == d && r[1] == t, "grid row ({}, {}) out of order", r[0], r[1]);
        }
        acc.push(rows.iter().map(|r| r[2]).collect());
    }
    let mut scalars = [None, None];
    for &(line, l) in &b[3] {
        let f = fields(l);
        ensure!(f.len() == 2, "line {line}: expected 'key,value'");
        let slot = match f[0] {
            "overall_optimal_tau" => 0,
            "miou" => 1,
            k => bail!("line {line}: unknown key '{k}'"),
        };
        scalars[slot] = Some(num(f[1], line)?);
    }
    let [Some(overall_optimal_tau), Some(miou_at_optimal_tau)] = scalars else {
        bail!("report lacks overall_optimal_tau or miou");
    };
    Ok(WsolReport {
        tau_grid,
        deltas,
        acc,
        max_box_acc: summary.iter().map(|r| r[1]).collect(),
        optimal_tau: summary.iter().map(|r| r[2]).collect(),
        overall_optimal_tau,
        miou_curve: miou.iter().map(|r| r[1]).collect(),
        miou_at_optimal_tau,
    })
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_top1: f64,
    /// On the logged test subset; absent when per-epoch evaluation is off.
    pub test_top1: Option<f64>,
    /// Mean-over-δ MaxBoxAcc on the logged test subset.
    pub test_max_box_acc: Option<f64>,
    pub last: bool,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,loss,train_top1,test_top1,test_max_box_acc,last";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn emit_epoch_row(r: &EpochRow) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        r.epoch,
        r.lr,
        r.loss,
        r.train_top1,
        opt(r.test_top1),
        opt(r.test_max_box_acc),
        u8::from(r.last)
    )
}

pub fn emit_train_log(rows: &[EpochRow]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    rows.iter().for_each(|r| s += &emit_epoch_row(r));
    s
}

pub fn parse_train_log(text: &str) -> Result<Vec<EpochRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h == TRAIN_LOG_HEADER => {}
        other => bail!("bad training log header {:?}", other.map(|o| o.1)),
    }
    lines
        .map(|(i, l)| {
            let line = i + 1;
            let f = fields(l);
            ensure!(f.len() == 7, "line {line}: expected 7 fields, got {}", f.len());
            let optional = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s, line).map(Some)
                }
            };
            Ok(EpochRow {
                epoch: f[0].parse().with_context(|| format!("line {line}: bad epoch"))?,
                lr: num(f[1], line)?,
                loss: num(f[2], line)?,
                train_top1: num(f[3], line)?,
                test_top1: optional(f[4])?,
                test_max_box_acc: optional(f[5])?,
                last: match f[6] {
                    "0" => false,
                    "1" => true,
                    s => bail!("line {line}: bad last flag '{s}'"),
                },
            })
        })
        .collect()
}

pub const CURVES_HEADER: &str = "variant,tau,acc";

/// `(variant, tau, acc)` rows.
pub fn emit_curves(rows: &[(String, f64, f64)]) -> String {
    let mut s = format!("{CURVES_HEADER}\n");
    for (v, t, a) in rows {
        s += &format!("{v},{t},{a}\n");
    }
    s
}

pub fn parse_curves(text: &str) -> Result<Vec<(String, f64, f64)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CURVES_HEADER => {}
        other => bail!("bad curves header {:?}", other.map(|o| o.1)),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f = fields(l);
            ensure!(f.len() == 3, "line {}: expected 3 fields", i + 1);
            Ok((f[0].to_string(), num(f[1], i + 1)?, num(f[2], i + 1)?))
        })
        .collect()
}
