//! Additive sharing over Z_{2^64}, Beaver products, masked matrix products
//! and conversion of small shared values to shares modulo the curve order.

use k256::elliptic_curve::ff::{Field, PrimeField};
use k256::Scalar;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::net::{MsgType, Session};
use crate::ring64::{Mat, RingElem};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShareValue {
    Ring(RingElem),
    /// Element of Z_N, N the secp256k1 group order.
    CurveN(Scalar),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Share {
    pub value: ShareValue,
    pub party: u8,
}

impl Share {
    pub fn ring(v: RingElem, party: u8) -> Self {
        Share {
            value: ShareValue::Ring(v),
            party,
        }
    }

    pub fn curve(v: Scalar, party: u8) -> Self {
        Share {
            value: ShareValue::CurveN(v),
            party,
        }
    }

    pub fn as_ring(&self) -> Result<RingElem> {
        match self.value {
            ShareValue::Ring(v) => Ok(v),
            ShareValue::CurveN(_) => Err(Error::TagMismatch),
        }
    }
}

/// Splits `x` as `(r, x - r)` with `r` uniform.
pub fn make_shares(x: RingElem, rng: &mut impl RngCore) -> (Share, Share) {
    let r = rng.next_u64();
    (Share::ring(r, 0), Share::ring(x.wrapping_sub(r), 1))
}

pub fn reconstruct(s0: Share, s1: Share) -> Result<ShareValue> {
    match (s0.value, s1.value) {
        (ShareValue::Ring(a), ShareValue::Ring(b)) => Ok(ShareValue::Ring(a.wrapping_add(b))),
        (ShareValue::CurveN(a), ShareValue::CurveN(b)) => Ok(ShareValue::CurveN(a + b)),
        _ => Err(Error::TagMismatch),
    }
}

/// Splits every element of a vector; returns party 0's and party 1's halves.
pub fn share_vec(xs: &[RingElem], rng: &mut impl RngCore) -> (Vec<RingElem>, Vec<RingElem>) {
    let s0: Vec<u64> = xs.iter().map(|_| rng.next_u64()).collect();
    let s1 = xs
        .iter()
        .zip(&s0)
        .map(|(x, r)| x.wrapping_sub(*r))
        .collect();
    (s0, s1)
}

pub fn share_mat(m: &Mat, rng: &mut impl RngCore) -> (Mat, Mat) {
    let (a, b) = share_vec(&m.data, rng);
    (
        Mat {
            rows: m.rows,
            cols: m.cols,
            data: a,
        },
        Mat {
            rows: m.rows,
            cols: m.cols,
            data: b,
        },
    )
}

pub fn reconstruct_vec(a: &[RingElem], b: &[RingElem]) -> Vec<RingElem> {
    a.iter().zip(b).map(|(x, y)| x.wrapping_add(*y)).collect()
}

/// Tracks consumption of correlated randomness.
///
/// Every provisioned item carries an id, and ids increase in consumption
/// order, so a high-water mark is enough to detect reuse.
#[derive(Clone, Debug, Default)]
pub struct Ledger {
    next: u64,
}

impl Ledger {
    pub fn consume(&mut self, id: u64) -> Result<()> {
        if id < self.next {
            return Err(Error::TripleReuse { id });
        }
        self.next = id + 1;
        Ok(())
    }
}

/// One party's half of a vector of Beaver triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BeaverTriple {
    pub id: u64,
    pub a: Vec<RingElem>,
    pub b: Vec<RingElem>,
    pub c: Vec<RingElem>,
}

impl BeaverTriple {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// Opens shared words: both parties learn the sum.
pub fn open(session: &mut Session, shares: &[RingElem]) -> Result<Vec<RingElem>> {
    let peer = session.exchange_words(MsgType::Words, shares)?;
    Ok(reconstruct_vec(shares, &peer))
}

/// Elementwise product of shared vectors, one round.
pub fn beaver_mul(
    session: &mut Session,
    ledger: &mut Ledger,
    x: &[RingElem],
    y: &[RingElem],
    t: &BeaverTriple,
) -> Result<Vec<RingElem>> {
    let n = x.len();
    if y.len() != n || t.len() != n || t.b.len() != n || t.c.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "beaver on {} x {} with a triple of {}",
            n,
            y.len(),
            t.len()
        )));
    }
    ledger.consume(t.id)?;
    let mut msg = Vec::with_capacity(2 * n);
    msg.extend(x.iter().zip(&t.a).map(|(x, a)| x.wrapping_sub(*a)));
    msg.extend(y.iter().zip(&t.b).map(|(y, b)| y.wrapping_sub(*b)));
    let opened = open(session, &msg)?;
    let (d, e) = opened.split_at(n);
    let i = session.party() as u64;
    Ok((0..n)
        .map(|k| {
            x[k].wrapping_mul(e[k])
                .wrapping_add(y[k].wrapping_mul(d[k]))
                .wrapping_add(t.c[k])
                .wrapping_sub(i.wrapping_mul(d[k].wrapping_mul(e[k])))
        })
        .collect())
}

/// Triple for row-wise products `x_jk * y_j` sharing one factor per row:
/// `c_jk = a_jk * b_j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FanTriple {
    pub id: u64,
    pub a: Mat,
    pub b: Vec<RingElem>,
    pub c: Mat,
}

/// Multiplies row `j` of `x` by `y[j]`; opens `x - a` and `y - b` in one round.
pub fn beaver_mul_fan(
    session: &mut Session,
    ledger: &mut Ledger,
    x: &Mat,
    y: &[RingElem],
    t: &FanTriple,
) -> Result<Mat> {
    if (t.a.rows, t.a.cols) != (x.rows, x.cols) || y.len() != x.rows || t.b.len() != x.rows {
        return Err(Error::DimensionMismatch(format!(
            "fan product of {}x{} by {} with a {}x{} triple",
            x.rows,
            x.cols,
            y.len(),
            t.a.rows,
            t.a.cols
        )));
    }
    ledger.consume(t.id)?;
    let mut msg = x.sub(&t.a)?.data;
    msg.extend(y.iter().zip(&t.b).map(|(y, b)| y.wrapping_sub(*b)));
    let opened = open(session, &msg)?;
    let (d, e) = opened.split_at(x.len());
    let i = session.party() as u64;
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        for k in 0..x.cols {
            let j = r * x.cols + k;
            let v = x.data[j]
                .wrapping_mul(e[r])
                .wrapping_add(y[r].wrapping_mul(d[j]))
                .wrapping_add(t.c.data[j])
                .wrapping_sub(i.wrapping_mul(d[j].wrapping_mul(e[r])));
            out.data[j] = v;
        }
    }
    Ok(out)
}

/// Matrix Beaver triple `C = A x B` for products of two secret matrices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProductTriple {
    pub id: u64,
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
}

/// `X x Y` for secret X and Y, one round opening `X - A` and `Y - B`.
pub fn beaver_matmul(
    session: &mut Session,
    ledger: &mut Ledger,
    x: &Mat,
    y: &Mat,
    t: &ProductTriple,
) -> Result<Mat> {
    let shape = |m: &Mat| (m.rows, m.cols);
    if shape(x) != shape(&t.a) || shape(y) != shape(&t.b) || x.cols != y.rows {
        return Err(Error::DimensionMismatch(format!(
            "matrix product {:?} x {:?} with triple {:?} x {:?}",
            shape(x),
            shape(y),
            shape(&t.a),
            shape(&t.b)
        )));
    }
    ledger.consume(t.id)?;
    let mut msg = x.sub(&t.a)?.data;
    msg.extend(y.sub(&t.b)?.data);
    let opened = open(session, &msg)?;
    let (e, f) = opened.split_at(x.len());
    let e = Mat::from_vec(x.rows, x.cols, e.to_vec())?;
    let f = Mat::from_vec(y.rows, y.cols, f.to_vec())?;
    combine(session.party(), x, y, &e, &f, &t.c)
}

/// `X F + E Y + Z - i E F`.
fn combine(party: u8, x: &Mat, y: &Mat, e: &Mat, f: &Mat, z: &Mat) -> Result<Mat> {
    let mut out = x.matmul(f)?;
    if party == 1 {
        // E x (Y - F) saves one product over E Y - E F.
        out.add_assign(&e.matmul(&y.sub(f)?)?)?;
    } else {
        out.add_assign(&e.matmul(y)?)?;
    }
    out.add_assign(z)?;
    Ok(out)
}

/// Per-batch randomness for masked products against a dataset mask U.
///
/// Forward: `Z = U_B x V`. Backward: `Z' = U_B^T x V'`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatrixTriple {
    pub id: u64,
    pub v: Mat,
    pub z: Mat,
    pub v_prime: Mat,
    pub z_prime: Mat,
}

/// `X x W` where `E = X - U` was opened earlier; opens only `F = W - V`.
///
/// `x` and `e` may be the transposed data block for the backward product,
/// with `v`/`z` then taken from the primed half of the triple.
pub fn masked_matmul(
    session: &mut Session,
    x: &Mat,
    w: &Mat,
    v: &Mat,
    z: &Mat,
    e: &Mat,
) -> Result<Mat> {
    if (x.rows, x.cols) != (e.rows, e.cols)
        || (w.rows, w.cols) != (v.rows, v.cols)
        || x.cols != w.rows
        || (z.rows, z.cols) != (x.rows, w.cols)
    {
        return Err(Error::DimensionMismatch(format!(
            "masked product {}x{} by {}x{}",
            x.rows, x.cols, w.rows, w.cols
        )));
    }
    let f = open(session, &w.sub(v)?.data)?;
    let f = Mat::from_vec(w.rows, w.cols, f)?;
    combine(session.party(), x, w, e, &f, z)
}

/// One party's halves of a random `r < 2^bits` shared both mod 2^64 and
/// mod N.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConversionPair {
    pub r_small: RingElem,
    pub r_big: Scalar,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConversionBatch {
    pub id: u64,
    pub pairs: Vec<ConversionPair>,
}

fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Re-shares `x mod 2^bits` modulo the curve order in one round.
///
/// Only `x - r mod 2^bits` is opened. The result is a sharing of either
/// `x mod 2^bits` or `x mod 2^bits + 2^bits`, depending on whether the
/// subtraction wrapped; callers must accept both.
pub fn share_convert(
    session: &mut Session,
    ledger: &mut Ledger,
    x: &[RingElem],
    batch: &ConversionBatch,
    bits: u32,
) -> Result<Vec<Scalar>> {
    if batch.pairs.len() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} conversions with {} pairs",
            x.len(),
            batch.pairs.len()
        )));
    }
    ledger.consume(batch.id)?;
    let mask = low_mask(bits);
    let msg: Vec<u64> = x
        .iter()
        .zip(&batch.pairs)
        .map(|(x, p)| x.wrapping_sub(p.r_small) & mask)
        .collect();
    let peer = session.exchange_words(MsgType::Convert, &msg)?;
    let party = session.party();
    Ok(msg
        .iter()
        .zip(&peer)
        .zip(&batch.pairs)
        .map(|((a, b), p)| {
            if party == 0 {
                Scalar::from(a.wrapping_add(*b) & mask) + p.r_big
            } else {
                p.r_big
            }
        })
        .collect())
}

/// CSP side: `count` conversion pairs for masks below `2^bits`.
pub fn gen_conversion_pairs(
    count: usize,
    bits: u32,
    rng: &mut impl RngCore,
) -> (Vec<ConversionPair>, Vec<ConversionPair>) {
    let mask = low_mask(bits);
    let mut a = Vec::with_capacity(count);
    let mut b = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rng.next_u64() & mask;
        let s0 = rng.next_u64();
        let big0 = Scalar::random(&mut *rng);
        a.push(ConversionPair {
            r_small: s0,
            r_big: big0,
        });
        b.push(ConversionPair {
            r_small: r.wrapping_sub(s0),
            r_big: Scalar::from(r) - big0,
        });
    }
    (a, b)
}

pub fn scalar_to_bytes(s: &Scalar) -> [u8; 32] {
    s.to_repr().into()
}

pub fn scalar_from_bytes(b: &[u8; 32]) -> Option<Scalar> {
    Option::from(Scalar::from_repr((*b).into()))
}
