//! Two-sided geometric noise for metric differential privacy on lookup
//! grids, and an auditor for the access patterns it produces.
//!
//! Distances are measured in grid steps of the table being queried.

use std::collections::HashMap;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::ring64::RingElem;
use crate::sharing::share_vec;
use crate::tables_single::TableKey;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricParams {
    pub epsilon: f64,
    /// Samples are clamped to `[-clamp_bound, clamp_bound]`.
    pub clamp_bound: u64,
}

impl GeometricParams {
    pub fn new(epsilon: f64, clamp_bound: u64) -> Result<Self> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::ConfigInvalid(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(GeometricParams {
            epsilon,
            clamp_bound,
        })
    }

    /// Default clamp of `2^frac_bits` grid steps.
    pub fn for_grid(epsilon: f64, frac_bits: u32) -> Result<Self> {
        Self::new(epsilon, 1u64 << frac_bits)
    }

    /// Unclamped probability of `k`.
    pub fn pmf(&self, k: i64) -> f64 {
        let q = (-self.epsilon).exp();
        (1.0 - q) / (1.0 + q) * q.powf(k.unsigned_abs() as f64)
    }

    /// Probability mass the clamp moves onto the two end points.
    pub fn clamped_mass(&self) -> f64 {
        let q = (-self.epsilon).exp();
        2.0 * q.powf(self.clamp_bound as f64 + 1.0) / (1.0 + q)
    }
}

/// Uniform in `[0, 1)` with 53 random bits.
fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (-53f64).exp2()
}

/// Inverse-CDF draw from the two-sided geometric distribution.
pub fn sample_geometric(p: &GeometricParams, rng: &mut impl RngCore) -> i64 {
    let u = unit(rng);
    let q = (-p.epsilon).exp();
    let lq = -p.epsilon;
    // P(X <= -m) = q^m / (1 + q) for m >= 1; P(X <= k) = 1 - q^(k+1) / (1 + q) for k >= 0.
    let raw = if u < q / (1.0 + q) {
        let m = ((u * (1.0 + q)).ln() / lq).floor();
        -m
    } else {
        let l = (((1.0 - u) * (1.0 + q)).ln() / lq).ceil() - 1.0;
        l.max(0.0)
    };
    let b = p.clamp_bound as f64;
    raw.clamp(-b, b) as i64
}

/// Shares of `count` noise values in grid units.
pub fn gen_noise_shares(
    p: &GeometricParams,
    count: usize,
    rng: &mut impl RngCore,
) -> (Vec<RingElem>, Vec<RingElem>) {
    let noise: Vec<u64> = (0..count)
        .map(|_| sample_geometric(p, rng) as u64)
        .collect();
    share_vec(&noise, rng)
}

/// One observed lookup, with the plaintext input known to the test harness.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessRecord {
    pub c: u64,
    pub key: TableKey,
    pub input: i64,
}

#[derive(Clone, Debug, Default)]
pub struct AccessTrace {
    pub records: Vec<AccessRecord>,
}

impl AccessTrace {
    pub fn push(&mut self, c: u64, key: TableKey, input: i64) {
        self.records.push(AccessRecord { c, key, input });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-table key counts.
    pub fn histogram(&self) -> HashMap<u64, HashMap<TableKey, u64>> {
        let mut h: HashMap<u64, HashMap<TableKey, u64>> = HashMap::new();
        for r in &self.records {
            *h.entry(r.c).or_default().entry(r.key).or_default() += 1;
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct AuditReport {
    /// Largest empirical likelihood ratio over input pairs and keys.
    pub max_ratio: f64,
    /// `e^(eps * d)` for the pair attaining `max_ratio`.
    pub bound_at_max: f64,
    /// Largest `ratio / e^(eps d)` over all compared cells.
    pub max_excess: f64,
    pub cells_compared: usize,
    pub clamped_mass: f64,
    /// `(table, eps * queries on it)`.
    pub spend: Vec<(u64, f64)>,
}

impl AuditReport {
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "max_ratio={:.6}\nbound_at_max={:.6}\nmax_excess={:.6}\ncells_compared={}\nclamped_mass={:.3e}\n",
            self.max_ratio, self.bound_at_max, self.max_excess, self.cells_compared, self.clamped_mass
        );
        for (c, e) in &self.spend {
            s.push_str(&format!("spend_table_{c}={e:.6}\n"));
        }
        s
    }
}

/// Compares key distributions between every pair of distinct inputs.
///
/// Only cells where both inputs observed at least `min_count` hits on the
/// same key of the same table are compared, which bounds the relative
/// sampling error of each ratio.
pub fn audit_trace(
    trace: &AccessTrace,
    p: &GeometricParams,
    min_count: u64,
) -> Result<AuditReport> {
    let mut by_input: HashMap<i64, HashMap<(u64, TableKey), u64>> = HashMap::new();
    let mut totals: HashMap<i64, u64> = HashMap::new();
    let mut per_table: HashMap<u64, u64> = HashMap::new();
    for r in &trace.records {
        *by_input
            .entry(r.input)
            .or_default()
            .entry((r.c, r.key))
            .or_default() += 1;
        *totals.entry(r.input).or_default() += 1;
        *per_table.entry(r.c).or_default() += 1;
    }
    let mut inputs: Vec<i64> = by_input.keys().copied().collect();
    inputs.sort_unstable();
    let mut max_ratio = 1.0f64;
    let mut bound_at_max = 1.0f64;
    let mut max_excess = 0.0f64;
    let mut cells = 0usize;
    for (i, &x) in inputs.iter().enumerate() {
        for &y in &inputs[i + 1..] {
            let bound = (p.epsilon * (x - y).unsigned_abs() as f64).exp();
            let (hx, hy) = (&by_input[&x], &by_input[&y]);
            let (nx, ny) = (totals[&x] as f64, totals[&y] as f64);
            for (cell, &cx) in hx {
                let Some(&cy) = hy.get(cell) else { continue };
                if cx < min_count || cy < min_count {
                    continue;
                }
                cells += 1;
                let px = cx as f64 / nx;
                let py = cy as f64 / ny;
                let ratio = (px / py).max(py / px);
                if ratio > max_ratio {
                    max_ratio = ratio;
                    bound_at_max = bound;
                }
                max_excess = max_excess.max(ratio / bound);
            }
        }
    }
    if cells == 0 {
        return Err(Error::InsufficientSamples(format!(
            "no key was seen {min_count} times under two different inputs"
        )));
    }
    let mut spend: Vec<(u64, f64)> = per_table
        .into_iter()
        .map(|(c, n)| (c, n as f64 * p.epsilon))
        .collect();
    spend.sort_by_key(|s| s.0);
    Ok(AuditReport {
        max_ratio,
        bound_at_max,
        max_excess,
        cells_compared: cells,
        clamped_mass: p.clamped_mass(),
        spend,
    })
}
