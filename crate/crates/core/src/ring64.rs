//! Arithmetic in Z_{2^64} with a two's-complement fixed-point reading.
//!
//! Every operation wraps. Narrow grids (16-bit table domains, the 5-bit
//! DReLU domain) are embedded by sign extension, so a grid value and its
//! 64-bit embedding compare equal as signed integers.

use crate::error::{Error, Result};

pub type RingElem = u64;

/// Fractional bits used for ring values throughout training.
pub const FRAC_BITS: u32 = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FixedCfg {
    /// Integer bits, sign included.
    pub int_bits: u32,
    pub frac_bits: u32,
    pub total_bits: u32,
}

impl FixedCfg {
    pub const fn new(int_bits: u32, frac_bits: u32) -> Self {
        FixedCfg {
            int_bits,
            frac_bits,
            total_bits: int_bits + frac_bits,
        }
    }

    /// Full 64-bit ring with `FRAC_BITS` fractional bits.
    pub const RING: FixedCfg = FixedCfg::new(64 - FRAC_BITS, FRAC_BITS);

    pub fn validate(&self) -> Result<()> {
        if self.int_bits + self.frac_bits != self.total_bits
            || self.total_bits == 0
            || self.total_bits > 64
            || self.int_bits == 0
        {
            return Err(Error::ConfigInvalid(format!(
                "bad fixed-point layout {self:?}"
            )));
        }
        Ok(())
    }

    /// Number of grid points, `2^total_bits`.
    pub fn grid_size(&self) -> u64 {
        if self.total_bits >= 64 {
            u64::MAX
        } else {
            1u64 << self.total_bits
        }
    }

    /// `2^total_bits - 1`; grid inputs are read modulo `2^total_bits`.
    pub fn mask(&self) -> u64 {
        if self.total_bits >= 64 {
            u64::MAX
        } else {
            (1u64 << self.total_bits) - 1
        }
    }

    /// Smallest representable signed integer on the grid.
    pub fn min_int(&self) -> i64 {
        if self.total_bits >= 64 {
            i64::MIN
        } else {
            -(1i64 << (self.total_bits - 1))
        }
    }

    /// Largest representable signed integer on the grid.
    pub fn max_int(&self) -> i64 {
        if self.total_bits >= 64 {
            i64::MAX
        } else {
            (1i64 << (self.total_bits - 1)) - 1
        }
    }

    pub fn contains(&self, v: i64) -> bool {
        v >= self.min_int() && v <= self.max_int()
    }

    /// Iterates the grid as signed integers in increasing order.
    pub fn grid(&self) -> impl Iterator<Item = i64> {
        assert!(self.total_bits < 64);
        self.min_int()..=self.max_int()
    }

    /// Position of a grid value counted from the most negative point.
    pub fn index_of(&self, v: i64) -> u64 {
        v.wrapping_sub(self.min_int()) as u64
    }
}

/// Round half away from zero, then embed as a two's-complement ring element.
pub fn encode_fixed(x: f64, cfg: FixedCfg) -> Result<RingElem> {
    let scaled = (x * (cfg.frac_bits as f64).exp2()).round();
    let err = || Error::Range {
        value: x,
        int_bits: cfg.int_bits,
        frac_bits: cfg.frac_bits,
    };
    if !scaled.is_finite() || scaled < cfg.min_int() as f64 || scaled > cfg.max_int() as f64 {
        return Err(err());
    }
    Ok(scaled as i64 as u64)
}

/// Encode, saturating at the ends of the grid instead of failing.
pub fn encode_fixed_sat(x: f64, cfg: FixedCfg) -> RingElem {
    let scaled = (x * (cfg.frac_bits as f64).exp2()).round();
    if scaled.is_nan() {
        return 0;
    }
    let v = scaled.clamp(cfg.min_int() as f64, cfg.max_int() as f64) as i64;
    v as u64
}

pub fn decode_fixed(e: RingElem, cfg: FixedCfg) -> f64 {
    (e as i64) as f64 / (cfg.frac_bits as f64).exp2()
}

/// Local share truncation by `t` bits.
///
/// Party 0 shifts its share, party 1 shifts the negation of its share and
/// negates back, so the pair reconstructs to `floor(x / 2^t)` or one more.
pub fn truncate_share(s: RingElem, t: u32, party: u8) -> RingElem {
    if t == 0 {
        return s;
    }
    if party == 0 {
        s >> t
    } else {
        (s.wrapping_neg() >> t).wrapping_neg()
    }
}

/// Exact arithmetic shift of a plaintext ring value.
pub fn shift_floor(x: RingElem, t: u32) -> RingElem {
    ((x as i64) >> t) as u64
}

/// Row-major matrix over the ring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<RingElem>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<RingElem>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> RingElem {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: RingElem) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[RingElem] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn check_same(&self, o: &Mat, what: &str) -> Result<()> {
        if self.rows != o.rows || self.cols != o.cols {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, o.rows, o.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, o: &Mat) -> Result<Mat> {
        self.check_same(o, "add")?;
        Ok(self.zip(o, |a, b| a.wrapping_add(b)))
    }

    pub fn sub(&self, o: &Mat) -> Result<Mat> {
        self.check_same(o, "sub")?;
        Ok(self.zip(o, |a, b| a.wrapping_sub(b)))
    }

    pub fn hadamard(&self, o: &Mat) -> Result<Mat> {
        self.check_same(o, "hadamard")?;
        Ok(self.zip(o, |a, b| a.wrapping_mul(b)))
    }

    fn zip(&self, o: &Mat, f: impl Fn(u64, u64) -> u64) -> Mat {
        let data = self
            .data
            .iter()
            .zip(&o.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(u64) -> u64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn add_assign(&mut self, o: &Mat) -> Result<()> {
        self.check_same(o, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&o.data) {
            *a = a.wrapping_add(b);
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, o: &Mat) -> Result<()> {
        self.check_same(o, "sub_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&o.data) {
            *a = a.wrapping_sub(b);
        }
        Ok(())
    }

    pub fn matmul(&self, o: &Mat) -> Result<Mat> {
        if self.cols != o.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul: {}x{} by {}x{}",
                self.rows, self.cols, o.rows, o.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, o.cols);
        let n = o.cols;
        for i in 0..self.rows {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0 {
                    continue;
                }
                let brow = &o.data[k * n..(k + 1) * n];
                for (acc, &b) in orow.iter_mut().zip(brow) {
                    *acc = acc.wrapping_add(a.wrapping_mul(b));
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn decode(&self, cfg: FixedCfg) -> Vec<f64> {
        self.data.iter().map(|&v| decode_fixed(v, cfg)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIG: FixedCfg = FixedCfg::new(3, 13);

    #[test]
    fn encode_examples() {
        assert_eq!(encode_fixed(0.5, SIG).unwrap(), 4096);
        assert_eq!(encode_fixed(0.0, SIG).unwrap(), 0);
        assert_eq!(encode_fixed(-1.0, SIG).unwrap(), 0u64.wrapping_sub(8192));
        assert!(matches!(encode_fixed(4.0, SIG), Err(Error::Range { .. })));
        assert!(encode_fixed(-4.0, SIG).is_ok());
        // half away from zero
        assert_eq!(encode_fixed(1.5 / 8192.0, SIG).unwrap(), 2);
        assert_eq!(encode_fixed(-1.5 / 8192.0, SIG).unwrap() as i64, -2);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_fixed(4096, SIG), 0.5);
        assert_eq!(decode_fixed(0, SIG), 0.0);
        assert_eq!(decode_fixed(0u64.wrapping_sub(8192), SIG), -1.0);
    }

    #[test]
    fn grid_roundtrip() {
        for v in SIG.grid() {
            let x = decode_fixed(v as u64, SIG);
            assert_eq!(encode_fixed(x, SIG).unwrap(), v as u64);
        }
    }

    #[test]
    fn truncate_identity_at_zero_shift() {
        assert_eq!(
            truncate_share(0, 0, 0).wrapping_add(truncate_share(12345, 0, 1)),
            12345
        );
    }

    #[test]
    fn small_matmul() {
        let a = Mat::from_vec(2, 2, vec![1, 2, 3, 4]).unwrap();
        let b = Mat::from_vec(2, 1, vec![5, 6]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data, vec![17, 39]);
        assert!(b.matmul(&b).is_err());
    }
}
