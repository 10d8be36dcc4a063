//! CSV and JSON output.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use crate::fmt17;
use crate::inverse::{Diagnostics, ReconstructionResult};
use crate::problem::TimeGrid;

use super::{ConvergenceTable, NoiseRow};

pub const KERNEL_HEADER: &str = "t,K_rec,K_ref,abs_err";
pub const TABLE_HEADER: &str = "n,tau,err_inf,err_l2,err_u,eoc";
pub const NOISE_HEADER: &str = "sigma,err_inf,err_l2,amplification";
pub const MEASUREMENT_HEADER: &str = "t,M,m_prime";

/// Placeholder for an undefined order of convergence.
pub const NO_EOC: &str = "—";

pub fn kernel_csv(kernel: &[f64], reference: Option<&[f64]>, time: &TimeGrid) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{KERNEL_HEADER}");
    for (i, k) in kernel.iter().enumerate() {
        let (r, e) = match reference {
            Some(r) => (fmt17(r[i]), fmt17((k - r[i]).abs())),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(out, "{},{},{},{}", fmt17(time.t(i)), fmt17(*k), r, e);
    }
    out
}

pub fn table_csv(table: &ConvergenceTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{TABLE_HEADER}");
    for row in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.n,
            fmt17(row.tau),
            fmt17(row.err_inf),
            fmt17(row.err_l2),
            row.err_u.map(fmt17).unwrap_or_default(),
            row.eoc.map(fmt17).unwrap_or_else(|| NO_EOC.to_string()),
        );
    }
    out
}

pub fn noise_csv(rows: &[NoiseRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{NOISE_HEADER}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt17(r.sigma),
            fmt17(r.err_inf),
            fmt17(r.err_l2),
            r.amplification.map(fmt17).unwrap_or_default()
        );
    }
    out
}

/// Human-readable table for the terminal.
pub fn table_text(table: &ConvergenceTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6}  {:>10}  {:>12}  {:>12}  {:>12}  {:>6}",
        "n", "tau", "err_inf", "err_l2", "err_u", "eoc"
    );
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{:>6}  {:>10.3e}  {:>12.4e}  {:>12.4e}  {:>12}  {:>6}",
            r.n,
            r.tau,
            r.err_inf,
            r.err_l2,
            r.err_u.map(|e| format!("{e:.4e}")).unwrap_or_else(|| "-".into()),
            r.eoc.map(|e| format!("{e:.3}")).unwrap_or_else(|| NO_EOC.into()),
        );
    }
    out
}

/// Non-finite numbers become `null`.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

/// Every field, always present, under fixed names.
pub fn diagnostics_json(d: &Diagnostics) -> Value {
    json!({
        "max_kernel": num(d.max_kernel),
        "max_l2_sq": num(d.max_l2_sq),
        "grad_energy": num(d.grad_energy),
        "increment_sq": num(d.increment_sq),
        "max_grad_sq": num(d.max_grad_sq),
        "rate_energy": num(d.rate_energy),
        "grad_increment_sq": num(d.grad_increment_sq),
        "laplacian_energy": num(d.laplacian_energy),
        "kernel_rate_energy": num(d.kernel_rate_energy),
        "min_denominator": num(d.min_denominator),
    })
}

pub fn reconstruction_json(result: &ReconstructionResult) -> Value {
    json!({
        "diagnostics": diagnostics_json(&result.diagnostics),
        "threshold": {
            "omega": num(result.threshold.omega),
            "m0": num(result.threshold.m0),
            "tau": num(result.threshold.tau),
            "tau0": num(result.threshold.tau0),
            "margin": num(result.threshold.margin),
            "passed": result.threshold.passed,
        },
        "derivative_source": result.derivative_source.to_string(),
        "denominator_sign": match result.sign {
            crate::inverse::DenominatorSign::Plus => "plus",
            crate::inverse::DenominatorSign::Minus => "minus",
        },
        "max_compatibility_residual": num(result.max_residual()),
        "warnings": result.warnings,
    })
}

pub fn write(path: &Path, text: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)
}
