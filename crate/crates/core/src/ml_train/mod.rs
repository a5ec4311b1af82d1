//! Secret-shared SGD for logistic regression and fully connected networks.
//!
//! The training loops are written once against [`Engine`]. A [`DryRun`]
//! engine walks them on shapes alone to produce the offline plan, and
//! [`PartyEngine`] runs them for real on shares. The [`oracle`] module is a
//! separate plaintext fixed-point trainer used to check the shared runs.

mod data;
mod dry;
mod local;
pub mod oracle;
mod party;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::activations::{FuncTableSpec, SIGMOID_CFG};
use crate::error::{Error, Result};
use crate::ring64::{encode_fixed, FixedCfg, Mat, FRAC_BITS};

pub use data::{load_csv, load_mnist_idx, Dataset};
pub use dry::{plan, plan_inference, DryRun};
pub use local::{infer_local, prepare_training, run_local, train_party, LocalRun, RunOptions};
pub use party::{Observer, PartyEngine};

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Lr,
    /// Hidden layer widths; ReLU after each, softmax at the output.
    Nn {
        hidden: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LookupMode {
    Single,
    /// Per-query and per-table budgets; `epsilon_total` may be infinite.
    Multi {
        epsilon: f64,
        epsilon_total: f64,
    },
}

/// How shares are truncated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TruncMode {
    /// Local share shifts, off by at most one in the last place.
    Local,
    /// Test harness only: open, floor-shift, re-share. Leaks every value.
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: Model,
    /// Power of two.
    pub batch: usize,
    /// Learning rate is `2^-lr_shift`.
    pub lr_shift: u32,
    pub epochs: usize,
    /// Stop after this many iterations even if epochs remain.
    pub max_iterations: Option<usize>,
    pub seed: u64,
    pub mode: LookupMode,
    pub sigmoid_cfg: FixedCfg,
    /// EXP tables store `e^(x - exp_shift)`.
    pub exp_shift: f64,
    /// Targets become `(1 - s) onehot + s / classes`.
    pub label_smoothing: f64,
    /// Initial weights are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    pub trunc: TruncMode,
}

impl TrainConfig {
    pub fn lr() -> Self {
        TrainConfig {
            model: Model::Lr,
            batch: 32,
            lr_shift: 2,
            epochs: 5,
            max_iterations: None,
            seed: 1,
            mode: LookupMode::Single,
            sigmoid_cfg: FixedCfg::new(5, 11),
            exp_shift: 1.0,
            label_smoothing: 0.0,
            init_scale: 0.0,
            trunc: TruncMode::Local,
        }
    }

    pub fn nn() -> Self {
        TrainConfig {
            model: Model::Nn {
                hidden: vec![128, 128],
            },
            sigmoid_cfg: SIGMOID_CFG,
            label_smoothing: 0.1,
            init_scale: 0.05,
            ..Self::lr()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.batch == 0 || !self.batch.is_power_of_two() {
            return bad(format!("batch size {} is not a power of two", self.batch));
        }
        self.sigmoid_cfg.validate()?;
        if self.sigmoid_cfg.total_bits > 20 || self.sigmoid_cfg.frac_bits > 2 * FRAC_BITS {
            return bad(format!(
                "sigmoid layout {:?} is too wide for a table",
                self.sigmoid_cfg
            ));
        }
        if let Model::Nn { hidden } = &self.model {
            if hidden.contains(&0) {
                return bad("zero-width hidden layer".into());
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        if let LookupMode::Multi {
            epsilon,
            epsilon_total,
        } = self.mode
        {
            crate::tables_multi::BudgetState::new(epsilon, epsilon_total)?;
        }
        Ok(())
    }

    /// Total right shift applied to a raw gradient (`2 * FRAC_BITS`
    /// fractional bits) to get the weight update: back to `FRAC_BITS`, then
    /// `alpha / |B|`.
    pub fn update_shift(&self) -> u32 {
        FRAC_BITS + self.batch.trailing_zeros() + self.lr_shift
    }

    /// Lookup functions the model evaluates.
    pub fn func_specs(&self) -> Vec<FuncTableSpec> {
        match self.model {
            Model::Lr => vec![FuncTableSpec::sigmoid_with(self.sigmoid_cfg)],
            Model::Nn { .. } => vec![
                FuncTableSpec::drelu(),
                FuncTableSpec::exp(self.exp_shift),
                FuncTableSpec::inverse(),
            ],
        }
    }

    /// Layer widths from input to output.
    pub fn widths(&self, features: usize, classes: usize) -> Vec<usize> {
        match &self.model {
            Model::Lr => vec![features, 1],
            Model::Nn { hidden } => {
                let mut w = vec![features];
                w.extend(hidden);
                w.push(classes);
                w
            }
        }
    }
}

/// Public mini-batch schedule: a seeded permutation per epoch, cut into
/// batches; the last batch of an epoch may be short.
pub fn schedule(cfg: &TrainConfig, n: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    'epochs: for _ in 0..cfg.epochs {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for chunk in perm.chunks(cfg.batch) {
            if cfg.max_iterations.is_some_and(|m| out.len() >= m) {
                break 'epochs;
            }
            out.push(chunk.to_vec());
        }
    }
    out
}

/// Public initial weights, one matrix per layer, encoded with `FRAC_BITS`.
pub fn initial_weights(cfg: &TrainConfig, widths: &[usize]) -> Result<Vec<Mat>> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x1a17_5eed);
    let mut out = Vec::with_capacity(widths.len() - 1);
    for w in widths.windows(2) {
        let mut m = Mat::zeros(w[0], w[1]);
        if cfg.init_scale > 0.0 {
            use rand::Rng;
            for v in m.data.iter_mut() {
                *v = encode_fixed(
                    rng.gen_range(-cfg.init_scale..=cfg.init_scale),
                    FixedCfg::RING,
                )?;
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Operations a training loop needs from its backend.
///
/// Values carry `FRAC_BITS` fractional bits unless a method says otherwise.
pub trait Engine {
    type M: Clone;

    fn shape(&self, a: &Self::M) -> (usize, usize);
    /// A public matrix as a sharing.
    fn public(&mut self, m: &Mat) -> Self::M;
    fn add(&mut self, a: &Self::M, b: &Self::M) -> Result<Self::M>;
    fn sub(&mut self, a: &Self::M, b: &Self::M) -> Result<Self::M>;
    fn transpose(&mut self, a: &Self::M) -> Self::M;
    fn trunc(&mut self, a: &Self::M, bits: u32) -> Result<Self::M>;
    /// Elementwise product (fractional bits add).
    fn mul(&mut self, a: &Self::M, b: &Self::M) -> Result<Self::M>;
    /// Matrix product of two secrets (fractional bits add).
    fn matmul(&mut self, a: &Self::M, b: &Self::M) -> Result<Self::M>;
    /// Dataset rows `rows` as a sharing.
    fn data_rows(&mut self, rows: &[usize]) -> Result<Self::M>;
    /// `X_B W` against the pre-opened dataset mask.
    fn data_forward(&mut self, rows: &[usize], w: &Self::M) -> Result<Self::M>;
    /// `X_B^T D`, using the second half of the triple from `data_forward`.
    fn data_backward(&mut self, rows: &[usize], d: &Self::M) -> Result<Self::M>;
    fn labels(&mut self, rows: &[usize]) -> Result<Self::M>;
    /// Sigmoid of an input with `z_frac` fractional bits.
    fn sigmoid(&mut self, z: &Self::M, z_frac: u32) -> Result<Self::M>;
    /// 0/1 sign indicator (no fractional bits).
    fn drelu(&mut self, z: &Self::M) -> Result<Self::M>;
    /// Row-wise softmax.
    fn softmax(&mut self, z: &Self::M) -> Result<Self::M>;
    fn begin_batch(&mut self, tag: u32) -> Result<()>;
    fn end_iteration(&mut self, iteration: usize, weights: &[Self::M]) -> Result<()>;
}

/// Runs the configured training loop, returning the final weight sharings.
pub fn train_loop<E: Engine>(
    e: &mut E,
    cfg: &TrainConfig,
    sched: &[Vec<usize>],
    init: &[Mat],
) -> Result<Vec<E::M>> {
    let mut ws: Vec<E::M> = init.iter().map(|m| e.public(m)).collect();
    let shift = cfg.update_shift();
    for (it, rows) in sched.iter().enumerate() {
        e.begin_batch(it as u32)?;
        ws = match cfg.model {
            Model::Lr => lr_step(e, &ws[0], rows, shift)?,
            Model::Nn { .. } => nn_step(e, &ws, rows, shift)?,
        };
        e.end_iteration(it, &ws)?;
    }
    Ok(ws)
}

fn lr_step<E: Engine>(e: &mut E, w: &E::M, rows: &[usize], shift: u32) -> Result<Vec<E::M>> {
    let z = e.data_forward(rows, w)?;
    let s = e.sigmoid(&z, 2 * FRAC_BITS)?;
    let y = e.labels(rows)?;
    let d = e.sub(&s, &y)?;
    let g = e.data_backward(rows, &d)?;
    let u = e.trunc(&g, shift)?;
    Ok(vec![e.sub(w, &u)?])
}

fn nn_step<E: Engine>(e: &mut E, ws: &[E::M], rows: &[usize], shift: u32) -> Result<Vec<E::M>> {
    let layers = ws.len();
    let mut acts = Vec::with_capacity(layers - 1);
    let mut signs = Vec::with_capacity(layers - 1);
    let raw = e.data_forward(rows, &ws[0])?;
    let mut z = e.trunc(&raw, FRAC_BITS)?;
    for w in &ws[1..] {
        let d = e.drelu(&z)?;
        let a = e.mul(&z, &d)?;
        let raw = e.matmul(&a, w)?;
        signs.push(d);
        acts.push(a);
        z = e.trunc(&raw, FRAC_BITS)?;
    }
    let p = e.softmax(&z)?;
    let y = e.labels(rows)?;
    let mut delta = e.sub(&p, &y)?;

    let mut grads: Vec<Option<E::M>> = vec![None; layers];
    for l in (1..layers).rev() {
        let at = e.transpose(&acts[l - 1]);
        grads[l] = Some(e.matmul(&at, &delta)?);
        let wt = e.transpose(&ws[l]);
        let back = e.matmul(&delta, &wt)?;
        let back = e.trunc(&back, FRAC_BITS)?;
        delta = e.mul(&back, &signs[l - 1])?;
    }
    grads[0] = Some(e.data_backward(rows, &delta)?);

    let mut out = Vec::with_capacity(layers);
    for (w, g) in ws.iter().zip(grads) {
        let u = e.trunc(&g.expect("every layer has a gradient"), shift)?;
        out.push(e.sub(w, &u)?);
    }
    Ok(out)
}

/// One forward pass over `x`: sigmoid scores for LR, output-layer logits for
/// a network (argmax is left to whoever reconstructs them).
pub fn forward<E: Engine>(e: &mut E, model: &Model, ws: &[E::M], x: &E::M) -> Result<E::M> {
    match model {
        Model::Lr => {
            let z = e.matmul(x, &ws[0])?;
            e.sigmoid(&z, 2 * FRAC_BITS)
        }
        Model::Nn { .. } => {
            let raw = e.matmul(x, &ws[0])?;
            let mut z = e.trunc(&raw, FRAC_BITS)?;
            for w in &ws[1..] {
                let d = e.drelu(&z)?;
                let a = e.mul(&z, &d)?;
                let raw = e.matmul(&a, w)?;
                z = e.trunc(&raw, FRAC_BITS)?;
            }
            Ok(z)
        }
    }
}
