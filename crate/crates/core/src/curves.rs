//! Sampled scalar curves for plotting: barrier shapes, gradient/Hessian norm
//! ratios, Gauss-Newton curvatures and the mollified eigenvalues.
//!
//! All curves use `d_hat = 1`, `kappa = 1`.

use serde::{Deserialize, Serialize};

use crate::barrier::{
    barrier_value, filtered_norm_ratio, gn_scalar_comparison, ipc_barrier_d, norm_diagnostics, BarrierForm,
    BarrierParams,
};
use crate::mollifier::mollified_eigensystem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    Barrier,
    Norms,
    GnCompare,
    MollifierEigs,
}

impl std::str::FromStr for CurveKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "barrier" => Ok(CurveKind::Barrier),
            "norms" => Ok(CurveKind::Norms),
            "gn-compare" => Ok(CurveKind::GnCompare),
            "mollifier-eigs" => Ok(CurveKind::MollifierEigs),
            _ => Err(format!(
                "unknown curve '{s}', expected barrier, norms, gn-compare or mollifier-eigs"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

/// `n` points spaced evenly in log10 between `lo` and `hi`.
fn log_space(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(move |i| 10f64.powf(a + (b - a) * i as f64 / (n.max(2) - 1) as f64))
}

fn unit(form: BarrierForm) -> BarrierParams {
    let mut p = BarrierParams::new(1.0, 1.0);
    p.form = form;
    p
}

/// Rows of `(d, ipc, ipc_squared, log_gap, stiffened)` for `d` in `(0, 1)`.
pub fn barrier_curves(samples: usize) -> Table {
    let mut t = Table::new(&["d", "ipc", "ipc_squared", "log_gap", "stiffened"]);
    for i in 1..samples {
        let d = i as f64 / samples as f64;
        let g = d * d;
        let ipc = ipc_barrier_d(d, 1.0, 1.0).0;
        // the classic barrier written in squared distance
        let ipc_sq = -(g - 1.0).powi(2) * g.ln();
        t.rows.push(vec![
            d,
            ipc,
            ipc_sq,
            barrier_value(g, &unit(BarrierForm::Log)),
            barrier_value(g, &unit(BarrierForm::Stiffened)),
        ]);
    }
    t
}

/// Gradient and Hessian norms of the stiffened barrier over `g` in `[1e-8, 1)`.
pub fn norm_curves(samples: usize) -> Table {
    let p = unit(BarrierForm::Stiffened);
    let mut t = Table::new(&["g", "grad_norm", "lambda1", "ratio", "filtered_ratio"]);
    for g in log_space(1e-8, 0.999, samples) {
        let (gn, hn, r) = norm_diagnostics(g, &p);
        t.rows.push(vec![g, gn, hn, r, filtered_norm_ratio(g, &p)]);
    }
    t
}

/// Normal curvature of the gap model next to plain Gauss-Newton for the classic barrier.
pub fn gn_compare_curves(samples: usize) -> Table {
    let p = BarrierParams::new(1.0, 1.0);
    let mut t = Table::new(&["d", "gap_model", "classic_gn"]);
    for d in log_space(1e-4, 0.999, samples) {
        let (a, b) = gn_scalar_comparison(d, &p);
        t.rows.push(vec![d, a, b]);
    }
    t
}

/// Mollified eigenvalues over `c / eps_x` in `(0, 1.2]` at fixed `g`.
pub fn mollifier_curves(samples: usize, g: f64) -> Table {
    let p = unit(BarrierForm::Stiffened);
    let eps = 1.0;
    let mut t = Table::new(&[
        "c_over_eps",
        "g",
        "lambda_gamma1",
        "lambda_gamma2",
        "lambda_g1",
        "lambda_g2",
        "lambda7p",
        "lambda8p",
    ]);
    for i in 1..=samples {
        let c = 1.2 * i as f64 / samples as f64;
        let e = mollified_eigensystem(g, c * eps, &p, eps);
        t.rows.push(vec![
            c,
            g,
            e.lambda_gamma[0],
            e.lambda_gamma[1],
            e.lambda_g[0],
            e.lambda_g[1],
            e.lambda7p,
            e.lambda8p,
        ]);
    }
    t
}

/// Gap values at which the mollifier curves are sampled.
pub const MOLLIFIER_G: [f64; 5] = [1e-3, 0.01, 0.1, 0.25, 0.9];

pub fn curve(kind: CurveKind, samples: usize) -> Table {
    match kind {
        CurveKind::Barrier => barrier_curves(samples),
        CurveKind::Norms => norm_curves(samples),
        CurveKind::GnCompare => gn_compare_curves(samples),
        CurveKind::MollifierEigs => {
            let mut t = mollifier_curves(samples, MOLLIFIER_G[0]);
            for &g in &MOLLIFIER_G[1..] {
                t.rows.extend(mollifier_curves(samples, g).rows);
            }
            t
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn barriers_vanish_at_d_hat_and_blow_up_or_not() {
        let t = barrier_curves(1000);
        let last = t.rows.last().unwrap();
        for v in &last[1..] {
            assert!(v.abs() < 1e-4, "{v}");
        }
        let first = &t.rows[0];
        // the squared-distance barriers grow faster near contact
        assert!(first[2] > first[1]);
        assert!(first[4] > first[3]);
    }

    #[test]
    fn filtered_ratio_bounded_where_raw_ratio_decays() {
        let t = norm_curves(200);
        let g = t.column("g").unwrap();
        let raw = t.column("ratio").unwrap();
        let filt = t.column("filtered_ratio").unwrap();
        assert!(raw[0] < raw[raw.len() / 2]);
        for i in 0..g.len() {
            if g[i] >= 0.01 {
                assert!((raw[i] - filt[i]).abs() < 1e-12 * raw[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn mollifier_curve_ends_decoupled() {
        let t = mollifier_curves(12, 0.25);
        let last = t.rows.last().unwrap();
        // c >= eps: the mollifier is flat and the gamma channel vanishes
        assert_eq!(last[2], 0.0);
        assert_eq!(last[3], 0.0);
        assert!(last[7] > 0.0);
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("gn-compare".parse::<CurveKind>().unwrap(), CurveKind::GnCompare);
        assert!("bogus".parse::<CurveKind>().is_err());
    }
}
