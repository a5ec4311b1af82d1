//! Reusable lookup tables keyed by a two-party PRF on secp256k1.
//!
//! The key of grid index `j` in table `c` is
//! `H(k0 k1 (j + s0^c + s1^c) G)`, with `k_i`, `s_i` held by party `i` and
//! `s_i^c` derived from `s_i` per table. Generation walks the grid by point
//! addition, so a run of `m` tables needs `m + 1` scalar multiplications.
//! Online, each party contributes one scalar multiplication on its own
//! share and one on the peer's point.
//!
//! Indices are `x - min_int` modulo `2^t` for a `t`-bit grid. Share
//! conversion may deliver either lift `j` or `j + 2^t` of an index, so each
//! table holds keys for both, `2^(t+1)` entries mapping onto `2^t` values.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::sync::Arc;

use k256::elliptic_curve::group::Curve;
use k256::elliptic_curve::sec1::{FromEncodedPoint, ToEncodedPoint};
use k256::elliptic_curve::Field;
use k256::{AffinePoint, EncodedPoint, ProjectivePoint, Scalar};
use rand::seq::SliceRandom;
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::activations::{FuncId, FuncTableSpec};
use crate::error::{Error, Result};
use crate::net::{MsgType, Session};
use crate::ring64::{FixedCfg, RingElem};
use crate::sharing::{scalar_from_bytes, scalar_to_bytes, share_convert, ConversionBatch, Ledger};
use crate::tables_single::{
    check_count, read_entries, read_exact, read_header, write_header, TableKey,
};

pub const MULTI_MAGIC: &[u8; 4] = b"HWK2";
pub const POINT_LEN: usize = 33;

/// `s^c = H(s || c)` reduced to a scalar by rejection, retrying with a counter.
pub fn derive_sc(s: &Scalar, c: u64) -> Scalar {
    let sb = scalar_to_bytes(s);
    let mut counter: u32 = 0;
    loop {
        let mut h = Sha256::new();
        h.update(sb);
        h.update(c.to_be_bytes());
        if counter > 0 {
            h.update(counter.to_be_bytes());
        }
        let d: [u8; 32] = h.finalize().into();
        if let Some(v) = scalar_from_bytes(&d) {
            return v;
        }
        counter += 1;
    }
}

pub fn random_nonzero_scalar(rng: &mut impl RngCore) -> Scalar {
    loop {
        let s = Scalar::random(&mut *rng);
        if s != Scalar::ZERO {
            return s;
        }
    }
}

pub fn encode_point(p: &AffinePoint) -> [u8; POINT_LEN] {
    let enc = p.to_encoded_point(true);
    let mut out = [0u8; POINT_LEN];
    let b = enc.as_bytes();
    out[..b.len()].copy_from_slice(b);
    out
}

/// Parses a compressed point, rejecting anything off the curve or the identity.
pub fn decode_point(b: &[u8]) -> Result<AffinePoint> {
    if b.len() != POINT_LEN || !(b[0] == 2 || b[0] == 3) {
        return Err(Error::InvalidPoint);
    }
    let enc = EncodedPoint::from_bytes(b).map_err(|_| Error::InvalidPoint)?;
    let p: Option<AffinePoint> = AffinePoint::from_encoded_point(&enc).into();
    match p {
        Some(p) if p != AffinePoint::IDENTITY => Ok(p),
        _ => Err(Error::InvalidPoint),
    }
}

pub fn point_key(p: &AffinePoint) -> TableKey {
    Sha256::digest(encode_point(p)).into()
}

/// Per-party PRF key material.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiKeys {
    pub k: Scalar,
    pub s: Scalar,
}

#[derive(Clone, Debug)]
pub struct MultiTable {
    pub func: FuncId,
    pub cfg: FixedCfg,
    pub c: u64,
    pub epsilon: f64,
    pub epsilon_total: f64,
    keys: Vec<TableKey>,
    values: Vec<RingElem>,
    index: HashMap<TableKey, u32>,
}

impl PartialEq for MultiTable {
    fn eq(&self, o: &Self) -> bool {
        self.func == o.func
            && self.cfg == o.cfg
            && self.c == o.c
            && self.epsilon.to_bits() == o.epsilon.to_bits()
            && self.epsilon_total.to_bits() == o.epsilon_total.to_bits()
            && self.keys == o.keys
            && self.values == o.values
    }
}

impl MultiTable {
    pub fn from_entries(
        func: FuncId,
        cfg: FixedCfg,
        c: u64,
        eps: (f64, f64),
        entries: Vec<(TableKey, RingElem)>,
    ) -> Self {
        let (keys, values): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let index = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (*k, i as u32))
            .collect();
        MultiTable {
            func,
            cfg,
            c,
            epsilon: eps.0,
            epsilon_total: eps.1,
            keys,
            values,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[TableKey] {
        &self.keys
    }

    pub fn get(&self, key: &TableKey) -> Option<RingElem> {
        self.index.get(key).map(|&i| self.values[i as usize])
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, MULTI_MAGIC, self.func, self.cfg, self.c, self.len())?;
        w.write_all(&self.epsilon.to_le_bytes())?;
        w.write_all(&self.epsilon_total.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.len() * 40);
        for (k, v) in self.keys.iter().zip(&self.values) {
            buf.extend_from_slice(k);
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let h = read_header(r, MULTI_MAGIC)?;
        check_count(&h, 2)?;
        let mut eps = [0u8; 16];
        read_exact(r, &mut eps)?;
        let e = f64::from_le_bytes(eps[..8].try_into().unwrap());
        let et = f64::from_le_bytes(eps[8..].try_into().unwrap());
        let entries = read_entries(r, h.count)?;
        Ok(MultiTable::from_entries(
            h.func,
            h.cfg,
            h.c,
            (e, et),
            entries,
        ))
    }
}

/// Operation counts from table generation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenStats {
    pub scalar_mults: u64,
    pub point_adds: u64,
}

/// CSP-side generator holding both parties' key material.
pub struct MultiGenerator {
    pub spec: FuncTableSpec,
    pub keys: (MultiKeys, MultiKeys),
    pub eps: (f64, f64),
    base: Option<ProjectivePoint>,
    pub stats: GenStats,
}

impl MultiGenerator {
    pub fn new(spec: FuncTableSpec, keys: (MultiKeys, MultiKeys), eps: (f64, f64)) -> Self {
        MultiGenerator {
            spec,
            keys,
            eps,
            base: None,
            stats: GenStats::default(),
        }
    }

    /// `(k0 k1) G`, computed once.
    fn base(&mut self) -> ProjectivePoint {
        if let Some(b) = self.base {
            return b;
        }
        let b = ProjectivePoint::GENERATOR * (self.keys.0.k * self.keys.1.k);
        self.stats.scalar_mults += 1;
        self.base = Some(b);
        b
    }

    /// Keys for both lifts of every grid index of table `c`, in index order.
    pub fn table_keys(&mut self, c: u64) -> Vec<TableKey> {
        let base = self.base();
        let (k0, k1) = (self.keys.0, self.keys.1);
        let offset = derive_sc(&k0.s, c) + derive_sc(&k1.s, c);
        let mut p = ProjectivePoint::GENERATOR * (k0.k * k1.k * offset);
        self.stats.scalar_mults += 1;
        let n = 2 * self.spec.cfg.grid_size() as usize;
        let mut points = Vec::with_capacity(n);
        for j in 0..n {
            if j > 0 {
                p += base;
                self.stats.point_adds += 1;
            }
            points.push(p);
        }
        let mut affine = vec![AffinePoint::IDENTITY; n];
        ProjectivePoint::batch_normalize(&points, &mut affine);
        affine.iter().map(point_key).collect()
    }

    pub fn gen_pair(&mut self, c: u64, rng: &mut impl RngCore) -> (MultiTable, MultiTable) {
        let keys = self.table_keys(c);
        let spec = self.spec;
        let mut t0 = Vec::with_capacity(keys.len());
        let mut t1 = Vec::with_capacity(keys.len());
        let values = spec.values();
        for (key, y) in keys.into_iter().zip(values.iter().cycle()) {
            let y = *y;
            let r = rng.next_u64();
            t0.push((key, r));
            t1.push((key, y.wrapping_sub(r)));
        }
        t0.shuffle(rng);
        t1.shuffle(rng);
        (
            MultiTable::from_entries(spec.func, spec.cfg, c, self.eps, t0),
            MultiTable::from_entries(spec.func, spec.cfg, c, self.eps, t1),
        )
    }
}

/// Per-table query budget.
///
/// The budget is kept as a whole number of queries `r = eps_T / eps` to avoid
/// floating-point drift when subtracting `eps` repeatedly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetState {
    pub epsilon: f64,
    pub epsilon_total: f64,
    /// Queries per table; `None` when `eps_T` is infinite.
    pub uses_per_table: Option<u64>,
    pub uses_left: u64,
    pub c: u64,
}

impl BudgetState {
    pub fn new(epsilon: f64, epsilon_total: f64) -> Result<Self> {
        if epsilon_total.is_infinite() {
            return Ok(BudgetState {
                epsilon,
                epsilon_total,
                uses_per_table: None,
                uses_left: u64::MAX,
                c: 0,
            });
        }
        let r = (epsilon_total / epsilon).round();
        if epsilon.is_nan()
            || epsilon <= 0.0
            || r.is_nan()
            || r < 1.0
            || ((r * epsilon - epsilon_total).abs() > 1e-9 * epsilon_total)
        {
            return Err(Error::ConfigInvalid(format!(
                "eps_T = {epsilon_total} is not a whole multiple of eps = {epsilon}"
            )));
        }
        Ok(BudgetState {
            epsilon,
            epsilon_total,
            uses_per_table: Some(r as u64),
            uses_left: r as u64,
            c: 0,
        })
    }

    pub fn epsilon_remaining(&self) -> f64 {
        match self.uses_per_table {
            None => f64::INFINITY,
            Some(_) => self.uses_left as f64 * self.epsilon,
        }
    }

    /// Charges one query to table `c`, moving to the next table once spent.
    /// Returns the table the query used.
    pub fn charge(&mut self) -> u64 {
        let used = self.c;
        if self.uses_per_table.is_some() {
            self.uses_left -= 1;
            if self.uses_left == 0 {
                self.advance();
            }
        }
        used
    }

    fn advance(&mut self) {
        self.c += 1;
        self.uses_left = self.uses_per_table.unwrap_or(u64::MAX);
    }
}

/// Number of tables a run of `queries` lookups touches.
pub fn tables_for_queries(queries: u64, uses_per_table: Option<u64>) -> u64 {
    match (queries, uses_per_table) {
        (0, _) => 0,
        (_, None) => 1,
        (q, Some(r)) => q.div_ceil(r),
    }
}

/// Where a set finds its tables.
pub enum TableStore {
    /// All tables, indexed by `c`.
    Memory(Vec<Arc<MultiTable>>),
    /// Tables pushed as they arrive; earlier ones are dropped on advance.
    Queue(VecDeque<Arc<MultiTable>>),
}

/// One party's reusable table set for one function.
pub struct MultiTableSet {
    pub spec: FuncTableSpec,
    pub keys: MultiKeys,
    pub budget: BudgetState,
    /// Number of tables provisioned.
    pub m: u64,
    store: TableStore,
    current: Option<Arc<MultiTable>>,
    sc_cache: Option<(u64, Scalar)>,
}

impl MultiTableSet {
    pub fn new(
        spec: FuncTableSpec,
        keys: MultiKeys,
        budget: BudgetState,
        m: u64,
        store: TableStore,
    ) -> Self {
        MultiTableSet {
            spec,
            keys,
            budget,
            m,
            store,
            current: None,
            sc_cache: None,
        }
    }

    /// Appends a streamed table to a `Queue` store.
    pub fn push_table(&mut self, t: Arc<MultiTable>) -> Result<()> {
        match &mut self.store {
            TableStore::Queue(q) => {
                q.push_back(t);
                Ok(())
            }
            TableStore::Memory(_) => Err(Error::ConfigInvalid(
                "push_table on an in-memory set".into(),
            )),
        }
    }

    /// Table the last of the next `n` queries will use.
    pub fn last_table_for(&self, n: u64) -> Option<u64> {
        let mut b = self.budget;
        (0..n).map(|_| b.charge()).last()
    }

    /// Explicitly moves to the next table.
    pub fn advance_table(&mut self) -> Result<BudgetState> {
        if self.budget.c + 1 >= self.m {
            return Err(Error::NoTablesLeft);
        }
        self.budget.advance();
        Ok(self.budget)
    }

    fn table(&mut self, c: u64) -> Result<Arc<MultiTable>> {
        if c >= self.m {
            return Err(Error::BudgetExhausted);
        }
        if let Some(t) = &self.current {
            if t.c == c {
                return Ok(t.clone());
            }
        }
        let t = match &mut self.store {
            TableStore::Memory(v) => v.get(c as usize).cloned().ok_or(Error::NoTablesLeft)?,
            TableStore::Queue(q) => {
                while q.front().is_some_and(|t| t.c < c) {
                    q.pop_front();
                }
                q.front().cloned().ok_or(Error::NoTablesLeft)?
            }
        };
        if t.c != c {
            return Err(Error::OfflineUnderprovisioned(format!(
                "expected multi table {c}, got {}",
                t.c
            )));
        }
        self.current = Some(t.clone());
        Ok(t)
    }

    fn sc(&mut self, c: u64) -> Scalar {
        match self.sc_cache {
            Some((cc, v)) if cc == c => v,
            _ => {
                let v = derive_sc(&self.keys.s, c);
                self.sc_cache = Some((c, v));
                v
            }
        }
    }

    /// Noisy lookup of a vector of grid-integer shares; three rounds.
    ///
    /// `noise` holds this party's shares of the per-query noise in grid
    /// units; `conv` supplies one conversion pair per query.
    pub fn query(
        &mut self,
        session: &mut Session,
        ledger: &mut Ledger,
        xs: &[RingElem],
        noise: &[RingElem],
        conv: &ConversionBatch,
    ) -> Result<Vec<RingElem>> {
        self.query_traced(session, ledger, xs, noise, conv, None)
    }

    /// As [`query`](Self::query), also recording `(c, key)` for each lookup.
    pub fn query_traced(
        &mut self,
        session: &mut Session,
        ledger: &mut Ledger,
        xs: &[RingElem],
        noise: &[RingElem],
        conv: &ConversionBatch,
        mut trace: Option<&mut Vec<(u64, TableKey)>>,
    ) -> Result<Vec<RingElem>> {
        let n = xs.len();
        if noise.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} queries with {} noise shares",
                noise.len()
            )));
        }
        // Assign tables before any message so both parties agree on them.
        let mut cs = Vec::with_capacity(n);
        for _ in 0..n {
            if self.budget.c >= self.m {
                return Err(Error::BudgetExhausted);
            }
            cs.push(self.budget.charge());
        }
        let party = session.party();
        let rebase = (self.spec.cfg.min_int() as u64).wrapping_neg();
        let noisy: Vec<u64> = xs
            .iter()
            .zip(noise)
            .map(|(x, g)| {
                let v = x.wrapping_add(*g);
                if party == 0 {
                    v.wrapping_add(rebase)
                } else {
                    v
                }
            })
            .collect();
        let xn = share_convert(session, ledger, &noisy, conv, self.spec.cfg.total_bits)?;

        let mut mine = Vec::with_capacity(n);
        for (x, &c) in xn.iter().zip(&cs) {
            let t = self.keys.k * (*x + self.sc(c));
            mine.push(ProjectivePoint::GENERATOR * t);
        }
        let peer_first = self.exchange_points(session, &mine)?;
        let cross: Vec<ProjectivePoint> = peer_first
            .iter()
            .map(|p| ProjectivePoint::from(*p) * self.keys.k)
            .collect();
        let peer_cross = self.exchange_points(session, &cross)?;

        let mut out = Vec::with_capacity(n);
        for ((own, theirs), &c) in cross.iter().zip(&peer_cross).zip(&cs) {
            let kappa = (*own + ProjectivePoint::from(*theirs)).to_affine();
            let key = point_key(&kappa);
            if let Some(t) = trace.as_deref_mut() {
                t.push((c, key));
            }
            let table = self.table(c)?;
            out.push(table.get(&key).ok_or(Error::MissingKey)?);
        }
        Ok(out)
    }

    fn exchange_points(
        &self,
        session: &mut Session,
        pts: &[ProjectivePoint],
    ) -> Result<Vec<AffinePoint>> {
        let mut affine = vec![AffinePoint::IDENTITY; pts.len()];
        ProjectivePoint::batch_normalize(pts, &mut affine);
        let mut msg = Vec::with_capacity(pts.len() * POINT_LEN);
        for p in &affine {
            msg.extend_from_slice(&encode_point(p));
        }
        let back = session.exchange(MsgType::Points, &msg)?;
        if back.len() != msg.len() {
            return Err(Error::FrameCorrupt(format!(
                "{} point bytes, expected {}",
                back.len(),
                msg.len()
            )));
        }
        back.chunks_exact(POINT_LEN).map(decode_point).collect()
    }
}

/// Generates `m` tables for both parties and returns in-memory sets.
pub fn gen_multi_tables(
    spec: &FuncTableSpec,
    m: u64,
    keys: (MultiKeys, MultiKeys),
    budget: BudgetState,
    rng: &mut impl RngCore,
) -> (MultiTableSet, MultiTableSet, GenStats) {
    let mut g = MultiGenerator::new(*spec, keys, (budget.epsilon, budget.epsilon_total));
    let mut a = Vec::new();
    let mut b = Vec::new();
    for c in 0..m {
        let (t0, t1) = g.gen_pair(c, rng);
        a.push(Arc::new(t0));
        b.push(Arc::new(t1));
    }
    (
        MultiTableSet::new(*spec, keys.0, budget, m, TableStore::Memory(a)),
        MultiTableSet::new(*spec, keys.1, budget, m, TableStore::Memory(b)),
        g.stats,
    )
}
