//! Interpolation tables for general-order Matérn correlations.
//!
//! For a fixed ν the correlation and its β-derivative are smooth functions
//! of the scaled distance x, so they can be read off a fine grid instead of
//! evaluating two Bessel functions per matrix entry. Two functions are
//! stored on a grid uniform in s = ln x:
//!
//! q(x) = ln(x^ν K_ν(x)) + x,       q'(x) = 1 - r(x),
//! r(x) = K_{ν-1}(x) / K_ν(x),      r'(x) = r² + (2ν - 1) r / x - 1,
//!
//! and interpolated by cubic Hermite polynomials using those exact
//! derivatives. Then ρ = c_ν e^{q - x} and ∂ρ/∂β = ρ x r / β.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use super::bessel;

/// Range of x covered by the table; outside it callers evaluate directly.
pub(crate) const X_LO: f64 = 0.5;
pub(crate) const X_HI: f64 = 64.0;
/// Nodes per unit of ln x. Interpolation error is about STEP⁴/384 times a
/// fourth derivative of order one.
const NODES_PER_UNIT: f64 = 512.0;

#[derive(Debug)]
pub(crate) struct MaternTable {
    s0: f64,
    inv_h: f64,
    h: f64,
    /// (q, dq/ds, r, dr/ds) per node.
    nodes: Vec<[f64; 4]>,
}

impl MaternTable {
    fn build(nu: f64) -> Self {
        let s0 = X_LO.ln();
        let s1 = X_HI.ln();
        let n = ((s1 - s0) * NODES_PER_UNIT).ceil() as usize;
        let h = (s1 - s0) / n as f64;
        let nodes = (0..=n)
            .map(|i| {
                let x = (s0 + i as f64 * h).exp();
                let (k_lower, k_nu) = bessel::bessel_k_adjacent_scaled(nu, x).expect("x inside the table is positive");
                // Scaled values share the factor e^x, which cancels in r and
                // is exactly the +x in q.
                let q = nu * x.ln() + k_nu.ln();
                let r = k_lower / k_nu;
                let dq = x * (1.0 - r);
                let dr = x * (r * r - 1.0) + (2.0 * nu - 1.0) * r;
                [q, dq, r, dr]
            })
            .collect();
        MaternTable { s0, inv_h: 1.0 / h, h, nodes }
    }

    /// (q(x), r(x)) for x in [X_LO, X_HI].
    pub(crate) fn eval(&self, x: f64) -> (f64, f64) {
        let u = (x.ln() - self.s0) * self.inv_h;
        let i = (u.floor() as usize).min(self.nodes.len() - 2);
        let t = u - i as f64;
        let (a, b) = (&self.nodes[i], &self.nodes[i + 1]);
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let q = h00 * a[0] + h10 * self.h * a[1] + h01 * b[0] + h11 * self.h * b[1];
        let r = h00 * a[2] + h10 * self.h * a[3] + h01 * b[2] + h11 * self.h * b[3];
        (q, r)
    }
}

/// The shared table for order `nu`, built on first use.
pub(crate) fn table_for(nu: f64) -> Arc<MaternTable> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<MaternTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap_or_else(|poisoned| poisoned.into_inner());
    guard.entry(nu.to_bits()).or_insert_with(|| Arc::new(MaternTable::build(nu))).clone()
}
