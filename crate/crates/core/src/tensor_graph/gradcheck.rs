//! Finite-difference verification of reverse-mode gradients (64-bit only).

use super::{Graph, Matrix, Var};
use crate::error::Result;

/// Step for [`five_point`]. Small enough to stay clear of ReLU kinks in
/// practice, large enough that round-off stays near 1e-11.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`], below which differences are
/// compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Fourth-order central difference of `f` at offset 0.
pub fn five_point(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

/// Worst entry of a gradient comparison.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub worst: f64,
    /// Which entry produced `worst`, with both derivative values.
    pub location: String,
    pub entries: usize,
}

impl GradCheck {
    pub fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let err = relative_error(analytic, numeric);
        self.entries += 1;
        if err > self.worst || self.entries == 1 {
            self.worst = err;
            self.location = format!("{} analytic {analytic:e} numeric {numeric:e}", at());
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        if other.worst > self.worst || self.entries == 0 {
            self.worst = other.worst;
            self.location = other.location;
        }
        self.entries += other.entries;
    }
}

/// Compares the gradient of a `1×1` output built by `build` with respect to
/// every entry of every input against [`five_point`] differences.
pub fn check_graph(
    inputs: &[Matrix<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;

    let eval = |k: usize, idx: usize, delta: f64| -> f64 {
        let mut shifted = inputs.to_vec();
        shifted[k].data_mut()[idx] += delta;
        let mut g = Graph::new();
        let vars: Vec<Var> = shifted.into_iter().map(|x| g.param(x)).collect();
        let out = build(&mut g, &vars).expect("build succeeded at the base point");
        g.value(out).get(0, 0)
    };
    let mut report = GradCheck::default();
    for (k, (x, &v)) in inputs.iter().zip(&vars).enumerate() {
        for idx in 0..x.data().len() {
            let analytic = g.grad(v).map_or(0.0, |m| m.data()[idx]);
            let numeric = five_point(|d| eval(k, idx, d), FD_STEP);
            report.record(analytic, numeric, || format!("input {k}[{idx}]"));
        }
    }
    Ok(report)
}
