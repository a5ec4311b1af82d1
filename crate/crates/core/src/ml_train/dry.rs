use std::collections::HashMap;

use super::{forward, initial_weights, schedule, train_loop, Engine, LookupMode, TrainConfig};
use crate::activations::FuncId;
use crate::csp_offline::{FuncPlan, Plan, PlannedItem, Request};
use crate::error::{Error, Result};
use crate::ring64::Mat;
use crate::tables_multi::BudgetState;

type Shape = (usize, usize);

struct FuncState {
    plan: FuncPlan,
    budget: Option<BudgetState>,
    /// Tables requested so far.
    next_c: u64,
}

/// Walks a training or inference loop on shapes, recording every piece of
/// offline material the real run will consume, in order.
pub struct DryRun {
    batch: u32,
    items: Vec<PlannedItem>,
    funcs: HashMap<FuncId, FuncState>,
    order: Vec<FuncId>,
    pending_backward: Option<Shape>,
    features: usize,
    outputs: usize,
}

impl DryRun {
    pub fn new(cfg: &TrainConfig, features: usize, outputs: usize) -> Result<Self> {
        cfg.validate()?;
        let mut funcs = HashMap::new();
        let mut order = Vec::new();
        for spec in cfg.func_specs() {
            let budget = match cfg.mode {
                LookupMode::Single => None,
                LookupMode::Multi {
                    epsilon,
                    epsilon_total,
                } => Some(BudgetState::new(epsilon, epsilon_total)?),
            };
            let plan = FuncPlan {
                spec,
                mode: cfg.mode,
                lookups: 0,
                tables: 0,
            };
            funcs.insert(
                spec.func,
                FuncState {
                    plan,
                    budget,
                    next_c: 0,
                },
            );
            order.push(spec.func);
        }
        Ok(DryRun {
            batch: 0,
            items: Vec::new(),
            funcs,
            order,
            pending_backward: None,
            features,
            outputs,
        })
    }

    fn push(&mut self, req: Request) {
        self.items.push(PlannedItem {
            batch: self.batch,
            req,
        });
    }

    fn lookups(&mut self, func: FuncId, n: usize) -> Result<()> {
        let st = self
            .funcs
            .get_mut(&func)
            .ok_or_else(|| Error::ConfigInvalid(format!("model does not use {}", func.name())))?;
        st.plan.lookups += n as u64;
        let batch = self.batch;
        match &mut st.budget {
            None => {
                let first_c = st.next_c;
                st.next_c += n as u64;
                st.plan.tables = st.next_c;
                self.items.push(PlannedItem {
                    batch,
                    req: Request::Single {
                        func,
                        first_c,
                        count: n as u64,
                    },
                });
            }
            Some(b) => {
                let bits = st.plan.spec.cfg.total_bits;
                for _ in 0..n {
                    let c = b.charge();
                    if c >= st.next_c {
                        self.items.push(PlannedItem {
                            batch,
                            req: Request::Multi { func, c },
                        });
                        st.next_c = c + 1;
                    }
                }
                st.plan.tables = st.next_c;
                self.items.push(PlannedItem {
                    batch,
                    req: Request::Noise { func, n },
                });
                self.items.push(PlannedItem {
                    batch,
                    req: Request::Conversion { n, bits },
                });
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Plan {
        let funcs = self.order.iter().map(|f| self.funcs[f].plan).collect();
        let batches = self.items.iter().map(|i| i.batch + 1).max().unwrap_or(0);
        Plan {
            items: self.items,
            funcs,
            batches,
        }
    }
}

fn same(a: &Shape, b: &Shape, op: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{op} of {a:?} and {b:?}")));
    }
    Ok(())
}

impl Engine for DryRun {
    type M = Shape;

    fn shape(&self, a: &Shape) -> (usize, usize) {
        *a
    }

    fn public(&mut self, m: &Mat) -> Shape {
        (m.rows, m.cols)
    }

    fn add(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        same(a, b, "sum")?;
        Ok(*a)
    }

    fn sub(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        same(a, b, "difference")?;
        Ok(*a)
    }

    fn transpose(&mut self, a: &Shape) -> Shape {
        (a.1, a.0)
    }

    fn trunc(&mut self, a: &Shape, _bits: u32) -> Result<Shape> {
        Ok(*a)
    }

    fn mul(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        same(a, b, "product")?;
        self.push(Request::Beaver { n: a.0 * a.1 });
        Ok(*a)
    }

    fn matmul(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        if a.1 != b.0 {
            return Err(Error::DimensionMismatch(format!(
                "matrix product {a:?} x {b:?}"
            )));
        }
        self.push(Request::Product {
            m: a.0,
            k: a.1,
            n: b.1,
        });
        Ok((a.0, b.1))
    }

    fn data_rows(&mut self, rows: &[usize]) -> Result<Shape> {
        Ok((rows.len(), self.features))
    }

    fn data_forward(&mut self, rows: &[usize], w: &Shape) -> Result<Shape> {
        self.push(Request::Masked {
            rows: rows.to_vec(),
            n_out: w.1,
        });
        self.pending_backward = Some((rows.len(), w.1));
        Ok((rows.len(), w.1))
    }

    fn data_backward(&mut self, rows: &[usize], d: &Shape) -> Result<Shape> {
        let want = self.pending_backward.take();
        if want != Some(*d) {
            return Err(Error::DimensionMismatch(format!(
                "backward product {d:?} after forward {want:?}"
            )));
        }
        if d.0 != rows.len() {
            return Err(Error::DimensionMismatch(format!(
                "backward product over {} rows",
                d.0
            )));
        }
        Ok((self.features, d.1))
    }

    fn labels(&mut self, rows: &[usize]) -> Result<Shape> {
        Ok((rows.len(), self.outputs))
    }

    fn sigmoid(&mut self, z: &Shape, _z_frac: u32) -> Result<Shape> {
        self.lookups(FuncId::Sigmoid, z.0 * z.1)?;
        Ok(*z)
    }

    fn drelu(&mut self, z: &Shape) -> Result<Shape> {
        self.lookups(FuncId::Drelu, z.0 * z.1)?;
        Ok(*z)
    }

    fn softmax(&mut self, z: &Shape) -> Result<Shape> {
        self.lookups(FuncId::Exp, z.0 * z.1)?;
        self.lookups(FuncId::Inverse, z.0)?;
        self.push(Request::Fan {
            rows: z.0,
            cols: z.1,
        });
        Ok(*z)
    }

    fn begin_batch(&mut self, tag: u32) -> Result<()> {
        self.batch = tag;
        Ok(())
    }

    fn end_iteration(&mut self, _iteration: usize, _weights: &[Shape]) -> Result<()> {
        Ok(())
    }
}

/// Offline plan for training on `n` examples of `features` inputs.
pub fn plan(cfg: &TrainConfig, n: usize, features: usize, classes: usize) -> Result<Plan> {
    let widths = cfg.widths(features, classes);
    let mut e = DryRun::new(cfg, features, *widths.last().unwrap())?;
    let sched = schedule(cfg, n);
    let init = initial_weights(cfg, &widths)?;
    train_loop(&mut e, cfg, &sched, &init)?;
    Ok(e.finish())
}

/// Offline plan for one forward pass over `n` inputs.
pub fn plan_inference(
    cfg: &TrainConfig,
    n: usize,
    features: usize,
    classes: usize,
) -> Result<Plan> {
    let widths = cfg.widths(features, classes);
    let mut e = DryRun::new(cfg, features, *widths.last().unwrap())?;
    let ws: Vec<Shape> = widths.windows(2).map(|w| (w[0], w[1])).collect();
    let x = (n, features);
    forward(&mut e, &cfg.model, &ws, &x)?;
    Ok(e.finish())
}
