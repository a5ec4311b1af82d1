//! Plaintext fixed-point reference trainer.
//!
//! Written separately from the engine-based loops on purpose: it shares
//! only the public inputs with them (data encoding, batch schedule, initial
//! weights) and recomputes the table functions from their definitions.
//! Truncations are exact floor shifts.

use super::{initial_weights, schedule, Dataset, Model, TrainConfig};
use crate::error::{Error, Result};
use crate::ring64::{FixedCfg, Mat};

const F: u32 = 13;

/// Signed matrix, row-major, with ring (wrapping) arithmetic.
#[derive(Clone, Debug, PartialEq)]
struct M {
    r: usize,
    c: usize,
    v: Vec<i64>,
}

impl M {
    fn zeros(r: usize, c: usize) -> M {
        M {
            r,
            c,
            v: vec![0; r * c],
        }
    }

    fn from_ring(m: &Mat) -> M {
        M {
            r: m.rows,
            c: m.cols,
            v: m.data.iter().map(|&x| x as i64).collect(),
        }
    }

    fn to_ring(&self) -> Mat {
        Mat {
            rows: self.r,
            cols: self.c,
            data: self.v.iter().map(|&x| x as u64).collect(),
        }
    }

    fn at(&self, i: usize, j: usize) -> i64 {
        self.v[i * self.c + j]
    }

    fn rows(&self, idx: &[usize]) -> M {
        let mut v = Vec::with_capacity(idx.len() * self.c);
        for &i in idx {
            v.extend_from_slice(&self.v[i * self.c..(i + 1) * self.c]);
        }
        M {
            r: idx.len(),
            c: self.c,
            v,
        }
    }

    fn t(&self) -> M {
        let mut o = M::zeros(self.c, self.r);
        for i in 0..self.r {
            for j in 0..self.c {
                o.v[j * self.r + i] = self.at(i, j);
            }
        }
        o
    }

    fn mm(&self, b: &M) -> M {
        assert_eq!(self.c, b.r);
        let mut o = M::zeros(self.r, b.c);
        for i in 0..self.r {
            for k in 0..self.c {
                let a = self.at(i, k);
                if a == 0 {
                    continue;
                }
                for j in 0..b.c {
                    let p = &mut o.v[i * b.c + j];
                    *p = p.wrapping_add(a.wrapping_mul(b.at(k, j)));
                }
            }
        }
        o
    }

    fn zip(&self, b: &M, f: impl Fn(i64, i64) -> i64) -> M {
        assert_eq!((self.r, self.c), (b.r, b.c));
        M {
            r: self.r,
            c: self.c,
            v: self.v.iter().zip(&b.v).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    fn map(&self, f: impl Fn(i64) -> i64) -> M {
        M {
            r: self.r,
            c: self.c,
            v: self.v.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Sign-extends the low `bits` bits.
fn wrap(v: i64, bits: u32) -> i64 {
    (v << (64 - bits)) >> (64 - bits)
}

fn quant(y: f64) -> i64 {
    (y * 8192.0).round() as i64
}

fn sigmoid_at(g: i64, layout: FixedCfg) -> i64 {
    let x = g as f64 / (layout.frac_bits as f64).exp2();
    quant(1.0 / (1.0 + (-x).exp()))
}

fn exp_at(g: i64, shift: f64) -> i64 {
    quant((g as f64 / 1024.0 - shift).exp())
}

fn inverse_at(g: i64) -> i64 {
    let x = if g <= 0 { 0.25 } else { g as f64 / 4.0 };
    quant(1.0 / x)
}

/// Sigmoid of values with `2F` fractional bits, via the table grid.
fn sigmoid_2f(z: i64, layout: FixedCfg) -> i64 {
    let g = wrap(z >> (2 * F - layout.frac_bits), layout.total_bits);
    sigmoid_at(g, layout)
}

/// 1 where `z > 0` for `z` with `F` fractional bits, through the
/// one-fractional-bit grid.
fn drelu(z: i64) -> i64 {
    let g = wrap((z + (1 << F) - 1) >> (F - 1), 5);
    (g >= 2) as i64
}

fn softmax(z: &M, shift: f64) -> M {
    let e = z.map(|v| exp_at(wrap(v >> (F - 10), 16), shift));
    let mut p = M::zeros(z.r, z.c);
    for i in 0..z.r {
        let s = (0..z.c).fold(0i64, |a, j| a.wrapping_add(e.at(i, j)));
        let inv = inverse_at(wrap(s >> (F - 2), 16));
        for j in 0..z.c {
            p.v[i * z.c + j] = e.at(i, j).wrapping_mul(inv) >> F;
        }
    }
    p
}

/// Trajectory and final weights of a plaintext run.
#[derive(Clone, Debug)]
pub struct OracleRun {
    pub weights: Vec<Mat>,
    /// Weights after every iteration, if requested.
    pub trajectory: Vec<Vec<Mat>>,
}

/// Encoded training data in the oracle's form.
pub struct Prepared {
    x: M,
    y: M,
}

impl Prepared {
    pub fn new(ds: &Dataset, cfg: &TrainConfig) -> Result<Prepared> {
        let outputs = *cfg
            .widths(ds.features, ds.classes)
            .last()
            .expect("at least one layer");
        let smoothing = if outputs == 1 {
            0.0
        } else {
            cfg.label_smoothing
        };
        Ok(Prepared {
            x: M::from_ring(&ds.encode_x()?),
            y: M::from_ring(&ds.encode_targets(outputs, smoothing)?),
        })
    }
}

/// One SGD step from weights `ws` on batch `rows`.
pub fn step(p: &Prepared, cfg: &TrainConfig, ws: &[Mat], rows: &[usize]) -> Vec<Mat> {
    let ws: Vec<M> = ws.iter().map(M::from_ring).collect();
    let shift = cfg.update_shift();
    let xb = p.x.rows(rows);
    let yb = p.y.rows(rows);
    let out = match cfg.model {
        Model::Lr => {
            let w = &ws[0];
            let s = xb.mm(w).map(|z| sigmoid_2f(z, cfg.sigmoid_cfg));
            let d = s.zip(&yb, i64::wrapping_sub);
            let g = xb.t().mm(&d);
            vec![w.zip(&g, |w, g| w.wrapping_sub(g >> shift))]
        }
        Model::Nn { .. } => {
            let l = ws.len();
            let mut zs = vec![xb.mm(&ws[0]).map(|v| v >> F)];
            let mut acts = Vec::new();
            for w in &ws[1..] {
                let z = zs.last().unwrap();
                let a = z.map(|v| v * drelu(v));
                zs.push(a.mm(w).map(|v| v >> F));
                acts.push(a);
            }
            let p = softmax(zs.last().unwrap(), cfg.exp_shift);
            let mut delta = p.zip(&yb, i64::wrapping_sub);
            let mut grads = vec![M::zeros(0, 0); l];
            for k in (1..l).rev() {
                grads[k] = acts[k - 1].t().mm(&delta);
                let back = delta.mm(&ws[k].t()).map(|v| v >> F);
                delta = back.zip(&zs[k - 1], |b, z| b * drelu(z));
            }
            grads[0] = xb.t().mm(&delta);
            ws.iter()
                .zip(&grads)
                .map(|(w, g)| w.zip(g, |w, g| w.wrapping_sub(g >> shift)))
                .collect()
        }
    };
    out.iter().map(M::to_ring).collect()
}

/// Trains on `ds` exactly as the shared run would with exact truncation.
pub fn train(ds: &Dataset, cfg: &TrainConfig, keep_trajectory: bool) -> Result<OracleRun> {
    cfg.validate()?;
    let p = Prepared::new(ds, cfg)?;
    let mut ws = initial_weights(cfg, &cfg.widths(ds.features, ds.classes))?;
    let mut trajectory = Vec::new();
    for rows in schedule(cfg, ds.len()) {
        ws = step(&p, cfg, &ws, &rows);
        if keep_trajectory {
            trajectory.push(ws.clone());
        }
    }
    Ok(OracleRun {
        weights: ws,
        trajectory,
    })
}

/// Model outputs for every row of `ds`: sigmoid scores (LR) or output
/// logits (network), with `F` fractional bits.
pub fn scores(cfg: &TrainConfig, ws: &[Mat], ds: &Dataset) -> Result<Mat> {
    let x = M::from_ring(&ds.encode_x()?);
    let ws: Vec<M> = ws.iter().map(M::from_ring).collect();
    if ws.first().map(|w| w.r) != Some(ds.features) {
        return Err(Error::DimensionMismatch(
            "model input width differs from the dataset".into(),
        ));
    }
    let out = match cfg.model {
        Model::Lr => x.mm(&ws[0]).map(|z| sigmoid_2f(z, cfg.sigmoid_cfg)),
        Model::Nn { .. } => {
            let mut z = x.mm(&ws[0]).map(|v| v >> F);
            for w in &ws[1..] {
                z = z.map(|v| v * drelu(v)).mm(w).map(|v| v >> F);
            }
            z
        }
    };
    Ok(out.to_ring())
}

/// Predicted class per row of a score matrix.
pub fn predictions(scores: &Mat) -> Vec<u32> {
    (0..scores.rows)
        .map(|i| {
            let row = scores.row(i);
            if row.len() == 1 {
                return ((row[0] as i64) >= 1 << (F - 1)) as u32;
            }
            let mut best = 0;
            for j in 1..row.len() {
                if (row[j] as i64) > (row[best] as i64) {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Fraction of rows of `ds` the model labels correctly.
pub fn accuracy(cfg: &TrainConfig, ws: &[Mat], ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let pred = predictions(&scores(cfg, ws, ds)?);
    let hits = pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ds.len() as f64)
}
