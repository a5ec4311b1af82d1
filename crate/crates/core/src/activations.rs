//! Activation functions evaluated through table lookups: DReLU, ReLU,
//! sigmoid and softmax.
//!
//! Inputs arrive as ring shares with some number of fractional bits and are
//! locally truncated onto the table's grid before the lookup. Table outputs
//! are ring values with `FRAC_BITS` fractional bits, except DReLU which
//! returns a plain 0/1.

use crate::error::{Error, Result};
use crate::net::Session;
use crate::ring64::{encode_fixed_sat, truncate_share, FixedCfg, Mat, RingElem, FRAC_BITS};
use crate::sharing::{beaver_mul, beaver_mul_fan, BeaverTriple, FanTriple, Ledger};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum FuncId {
    /// Returns the grid integer itself; used for toy tables and tests.
    Identity = 0,
    Sigmoid = 1,
    Drelu = 2,
    Exp = 3,
    Inverse = 4,
}

impl FuncId {
    pub fn from_u16(v: u16) -> Option<FuncId> {
        Some(match v {
            0 => FuncId::Identity,
            1 => FuncId::Sigmoid,
            2 => FuncId::Drelu,
            3 => FuncId::Exp,
            4 => FuncId::Inverse,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            FuncId::Identity => "identity",
            FuncId::Sigmoid => "sigmoid",
            FuncId::Drelu => "drelu",
            FuncId::Exp => "exp",
            FuncId::Inverse => "inverse",
        }
    }
}

/// A univariate function tabulated over a fixed-point input grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FuncTableSpec {
    pub func: FuncId,
    /// Input grid layout.
    pub cfg: FixedCfg,
    /// EXP stores `e^(x - shift)`.
    pub shift: f64,
}

pub const SIGMOID_CFG: FixedCfg = FixedCfg::new(3, 13);
pub const DRELU_CFG: FixedCfg = FixedCfg::new(4, 1);
pub const EXP_CFG: FixedCfg = FixedCfg::new(6, 10);
pub const INVERSE_CFG: FixedCfg = FixedCfg::new(14, 2);

impl FuncTableSpec {
    pub const fn sigmoid() -> Self {
        Self::sigmoid_with(SIGMOID_CFG)
    }

    pub const fn sigmoid_with(cfg: FixedCfg) -> Self {
        FuncTableSpec {
            func: FuncId::Sigmoid,
            cfg,
            shift: 0.0,
        }
    }

    pub const fn drelu() -> Self {
        FuncTableSpec {
            func: FuncId::Drelu,
            cfg: DRELU_CFG,
            shift: 0.0,
        }
    }

    pub const fn exp(shift: f64) -> Self {
        FuncTableSpec {
            func: FuncId::Exp,
            cfg: EXP_CFG,
            shift,
        }
    }

    pub const fn inverse() -> Self {
        FuncTableSpec {
            func: FuncId::Inverse,
            cfg: INVERSE_CFG,
            shift: 0.0,
        }
    }

    pub const fn identity(cfg: FixedCfg) -> Self {
        FuncTableSpec {
            func: FuncId::Identity,
            cfg,
            shift: 0.0,
        }
    }

    /// Table values over the whole grid, in grid order.
    pub fn values(&self) -> Vec<RingElem> {
        self.cfg.grid().map(|v| self.value(v)).collect()
    }

    /// Table value for grid integer `v`.
    pub fn value(&self, v: i64) -> RingElem {
        let x = v as f64 / (self.cfg.frac_bits as f64).exp2();
        match self.func {
            FuncId::Identity => v as u64,
            FuncId::Drelu => (v >= (2 << self.cfg.frac_bits) / 2) as u64,
            FuncId::Sigmoid => encode_fixed_sat(1.0 / (1.0 + (-x).exp()), FixedCfg::RING),
            FuncId::Exp => encode_fixed_sat((x - self.shift).exp(), FixedCfg::RING),
            FuncId::Inverse => {
                // Non-positive sums only arise from truncation error; use the
                // smallest positive grid point.
                let x = if v <= 0 {
                    1.0 / (self.cfg.frac_bits as f64).exp2()
                } else {
                    x
                };
                encode_fixed_sat(1.0 / x, FixedCfg::RING)
            }
        }
    }
}

/// Anything that can answer a vector of lookups for one function.
pub trait TableSource {
    fn spec(&self) -> FuncTableSpec;
    /// `xs` are this party's shares of grid integers.
    fn lookup(
        &mut self,
        session: &mut Session,
        ledger: &mut Ledger,
        xs: &[RingElem],
    ) -> Result<Vec<RingElem>>;
}

impl TableSource for crate::tables_single::SingleTableSet {
    fn spec(&self) -> FuncTableSpec {
        self.spec
    }

    fn lookup(
        &mut self,
        session: &mut Session,
        _ledger: &mut Ledger,
        xs: &[RingElem],
    ) -> Result<Vec<RingElem>> {
        self.query(session, xs)
    }
}

/// Moves shares with `from_frac` fractional bits onto a grid with
/// `to_frac`, truncating locally when bits are dropped.
pub fn rescale_shares(xs: &[RingElem], from_frac: u32, to_frac: u32, party: u8) -> Vec<RingElem> {
    if from_frac >= to_frac {
        xs.iter()
            .map(|&x| truncate_share(x, from_frac - to_frac, party))
            .collect()
    } else {
        xs.iter().map(|&x| x << (to_frac - from_frac)).collect()
    }
}

/// Looks up `f(x)` for shares carrying `x_frac` fractional bits.
pub fn lookup_fixed(
    session: &mut Session,
    ledger: &mut Ledger,
    xs: &[RingElem],
    x_frac: u32,
    tables: &mut dyn TableSource,
) -> Result<Vec<RingElem>> {
    let cfg = tables.spec().cfg;
    let grid = rescale_shares(xs, x_frac, cfg.frac_bits, session.party());
    tables.lookup(session, ledger, &grid)
}

/// DReLU lookup input: `floor(x + i (2^l_d - 1))` keeping one fractional bit.
pub fn drelu_input(x: RingElem, x_frac: u32, party: u8) -> RingElem {
    let bias = if party == 1 { (1u64 << x_frac) - 1 } else { 0 };
    truncate_share(x.wrapping_add(bias), x_frac - 1, party)
}

/// Shares of 1 where `x > 0`, else 0.
pub fn drelu(
    session: &mut Session,
    ledger: &mut Ledger,
    xs: &[RingElem],
    x_frac: u32,
    tables: &mut dyn TableSource,
) -> Result<Vec<RingElem>> {
    if tables.spec().func != FuncId::Drelu || tables.spec().cfg.frac_bits != 1 {
        return Err(Error::ConfigInvalid(
            "drelu needs the one-fractional-bit DReLU table".into(),
        ));
    }
    let party = session.party();
    let ys: Vec<u64> = xs.iter().map(|&x| drelu_input(x, x_frac, party)).collect();
    tables.lookup(session, ledger, &ys)
}

/// `x * DReLU(x)` with one Beaver round.
pub fn relu(
    session: &mut Session,
    ledger: &mut Ledger,
    xs: &[RingElem],
    drelu_shares: &[RingElem],
    triple: &BeaverTriple,
) -> Result<Vec<RingElem>> {
    beaver_mul(session, ledger, xs, drelu_shares, triple)
}

pub fn sigmoid(
    session: &mut Session,
    ledger: &mut Ledger,
    xs: &[RingElem],
    x_frac: u32,
    tables: &mut dyn TableSource,
) -> Result<Vec<RingElem>> {
    if tables.spec().func != FuncId::Sigmoid {
        return Err(Error::ConfigInvalid("sigmoid needs a sigmoid table".into()));
    }
    lookup_fixed(session, ledger, xs, x_frac, tables)
}

/// Row-wise softmax of `x` (rows = examples), inputs with `FRAC_BITS`.
///
/// Exponentials of all entries in one lookup round, one inverse lookup per
/// row on the local row sum, then one round of products.
pub fn softmax(
    session: &mut Session,
    ledger: &mut Ledger,
    x: &Mat,
    exp_tables: &mut dyn TableSource,
    inv_tables: &mut dyn TableSource,
    triple: &FanTriple,
) -> Result<Mat> {
    if exp_tables.spec().func != FuncId::Exp || inv_tables.spec().func != FuncId::Inverse {
        return Err(Error::ConfigInvalid(
            "softmax needs EXP and INVERSE tables".into(),
        ));
    }
    let party = session.party();
    let e = lookup_fixed(session, ledger, &x.data, FRAC_BITS, exp_tables)?;
    let e = Mat::from_vec(x.rows, x.cols, e)?;
    let sums: Vec<u64> = (0..x.rows)
        .map(|r| e.row(r).iter().fold(0u64, |a, &b| a.wrapping_add(b)))
        .collect();
    let inv = lookup_fixed(session, ledger, &sums, FRAC_BITS, inv_tables)?;
    let prod = beaver_mul_fan(session, ledger, &e, &inv, triple)?;
    Ok(prod.map(|v| truncate_share(v, FRAC_BITS, party)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring64::decode_fixed;

    #[test]
    fn table_values() {
        assert_eq!(FuncTableSpec::sigmoid().value(0), 4096);
        assert_eq!(FuncTableSpec::drelu().value(2), 1);
        assert_eq!(FuncTableSpec::drelu().value(1), 0);
        assert_eq!(FuncTableSpec::drelu().value(-16), 0);
        assert_eq!(FuncTableSpec::exp(0.0).value(0), 8192);
        assert_eq!(FuncTableSpec::inverse().value(4), 8192);
        assert_eq!(FuncTableSpec::inverse().value(0), 4 * 8192);
        assert_eq!(FuncTableSpec::inverse().value(-3), 4 * 8192);
        let top = EXP_CFG.max_int();
        let want = (top as f64 / 1024.0).exp();
        let big = FuncTableSpec::exp(0.0).value(top);
        assert!((decode_fixed(big, FixedCfg::RING) - want).abs() / want < 1e-9);
    }

    #[test]
    fn drelu_input_random_splits() {
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        for x in [-40000i64, -4097, -3, 0, 1, 2, 8191, 8192, 20000] {
            for _ in 0..1000 {
                let s0 = rng.next_u64();
                let s1 = (x as u64).wrapping_sub(s0);
                let y = drelu_input(s0, 13, 0).wrapping_add(drelu_input(s1, 13, 1)) as i64;
                let exact = (x + 8191).div_euclid(4096);
                assert!(y == exact || y == exact + 1, "x={x} y={y}");
                if x > 0 || x <= -4096 {
                    assert_eq!(FuncTableSpec::drelu().value(y) == 1, x > 0);
                }
            }
        }
    }
}
