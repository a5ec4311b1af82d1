//! Single-use lookup tables.
//!
//! For table `c`, party 0's table maps `H(x + pad(k_1, c))` to a share of
//! `f(x)` and party 1's maps `H(x + pad(k_0, c))` to the other share. Online,
//! each party publishes its input share masked with its own pad; adding the
//! peer's message to its own share gives the party `x + pad(k_peer, c)`.
//! Keys are taken modulo `2^total_bits`, so inputs outside the grid wrap.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::activations::{FuncId, FuncTableSpec};
use crate::error::{Error, Result};
use crate::net::{MsgType, Session};
use crate::ring64::{FixedCfg, RingElem};

pub type TableKey = [u8; 32];
pub type PadKey = [u8; 32];

pub const SINGLE_MAGIC: &[u8; 4] = b"HWK1";

/// Low 8 bytes of `SHA-256(k || c_be)`, read little-endian.
pub fn pad(k: &PadKey, c: u64) -> RingElem {
    let mut h = Sha256::new();
    h.update(k);
    h.update(c.to_be_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// `SHA-256` of the little-endian ring word.
pub fn outer_key(v: RingElem) -> TableKey {
    Sha256::digest(v.to_le_bytes()).into()
}

#[derive(Clone, Debug)]
pub struct SingleTable {
    pub func: FuncId,
    pub cfg: FixedCfg,
    pub c: u64,
    keys: Vec<TableKey>,
    values: Vec<RingElem>,
    index: Option<HashMap<TableKey, u32>>,
}

impl PartialEq for SingleTable {
    fn eq(&self, o: &Self) -> bool {
        self.func == o.func
            && self.cfg == o.cfg
            && self.c == o.c
            && self.keys == o.keys
            && self.values == o.values
    }
}

impl SingleTable {
    pub fn from_entries(
        func: FuncId,
        cfg: FixedCfg,
        c: u64,
        entries: Vec<(TableKey, RingElem)>,
    ) -> Self {
        let (keys, values) = entries.into_iter().unzip();
        SingleTable {
            func,
            cfg,
            c,
            keys,
            values,
            index: None,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&TableKey, RingElem)> {
        self.keys.iter().zip(self.values.iter().copied())
    }

    /// Builds a hash index; worthwhile only when a table is searched many times.
    pub fn build_index(&mut self) {
        self.index = Some(
            self.keys
                .iter()
                .enumerate()
                .map(|(i, k)| (*k, i as u32))
                .collect(),
        );
    }

    pub fn get(&self, key: &TableKey) -> Option<RingElem> {
        if let Some(ix) = &self.index {
            return ix.get(key).map(|&i| self.values[i as usize]);
        }
        self.keys
            .iter()
            .position(|k| k == key)
            .map(|i| self.values[i])
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, SINGLE_MAGIC, self.func, self.cfg, self.c, self.len())?;
        let mut buf = Vec::with_capacity(self.len() * 40);
        for (k, v) in self.entries() {
            buf.extend_from_slice(k);
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let h = read_header(r, SINGLE_MAGIC)?;
        check_count(&h, 1)?;
        let entries = read_entries(r, h.count)?;
        Ok(SingleTable::from_entries(h.func, h.cfg, h.c, entries))
    }
}

pub(crate) struct Header {
    pub func: FuncId,
    pub cfg: FixedCfg,
    pub c: u64,
    pub count: usize,
}

pub(crate) fn write_header(
    w: &mut impl Write,
    magic: &[u8; 4],
    func: FuncId,
    cfg: FixedCfg,
    c: u64,
    count: usize,
) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(func as u16).to_le_bytes())?;
    w.write_all(&[
        cfg.int_bits as u8,
        cfg.frac_bits as u8,
        cfg.total_bits as u8,
    ])?;
    w.write_all(&c.to_le_bytes())?;
    w.write_all(&(count as u32).to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<Header> {
    let mut head = [0u8; 21];
    read_exact(r, &mut head)?;
    if &head[..4] != magic {
        return Err(Error::CorruptBundle(format!(
            "bad table magic {:?}",
            &head[..4]
        )));
    }
    let func = FuncId::from_u16(u16::from_le_bytes([head[4], head[5]]))
        .ok_or_else(|| Error::CorruptBundle("unknown function id".into()))?;
    let cfg = FixedCfg {
        int_bits: head[6] as u32,
        frac_bits: head[7] as u32,
        total_bits: head[8] as u32,
    };
    cfg.validate()
        .map_err(|_| Error::CorruptBundle("bad table layout".into()))?;
    let c = u64::from_le_bytes(head[9..17].try_into().unwrap());
    let count = u32::from_le_bytes(head[17..21].try_into().unwrap()) as usize;
    Ok(Header {
        func,
        cfg,
        c,
        count,
    })
}

/// Rejects a table whose entry count is not `per_point` times its grid.
pub(crate) fn check_count(h: &Header, per_point: u64) -> Result<()> {
    if h.cfg.total_bits > 24 || h.count as u64 != per_point << h.cfg.total_bits {
        return Err(Error::CorruptBundle(format!(
            "{} entries for a {}-bit grid",
            h.count, h.cfg.total_bits
        )));
    }
    Ok(())
}

pub(crate) fn read_entries(r: &mut impl Read, count: usize) -> Result<Vec<(TableKey, RingElem)>> {
    let mut buf = vec![0u8; count * 40];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(40)
        .map(|e| {
            (
                e[..32].try_into().unwrap(),
                u64::from_le_bytes(e[32..].try_into().unwrap()),
            )
        })
        .collect())
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::CorruptBundle("unexpected end of data".into()),
        _ => Error::Io(e),
    })
}

/// Generates table `c` for both parties.
pub fn gen_single_table_pair(
    spec: &FuncTableSpec,
    c: u64,
    k0: &PadKey,
    k1: &PadKey,
    rng: &mut impl RngCore,
) -> (SingleTable, SingleTable) {
    gen_single_table_pair_with(spec, &spec.values(), c, k0, k1, rng)
}

/// As [`gen_single_table_pair`] with the function values precomputed in
/// grid order.
pub fn gen_single_table_pair_with(
    spec: &FuncTableSpec,
    values: &[RingElem],
    c: u64,
    k0: &PadKey,
    k1: &PadKey,
    rng: &mut impl RngCore,
) -> (SingleTable, SingleTable) {
    let pad0 = pad(k0, c);
    let pad1 = pad(k1, c);
    let n = spec.cfg.grid_size() as usize;
    let mask = spec.cfg.mask();
    let min = spec.cfg.min_int() as u64;
    let r: Vec<RingElem> = (0..n).map(|_| rng.next_u64()).collect();
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut side = |pad: u64, value: &dyn Fn(usize) -> RingElem, rng: &mut dyn RngCore| {
        order.shuffle(rng);
        let mut keys = Vec::with_capacity(n);
        let mut vals = Vec::with_capacity(n);
        for &i in &order {
            let x = min.wrapping_add(i as u64);
            keys.push(outer_key(x.wrapping_add(pad) & mask));
            vals.push(value(i as usize));
        }
        SingleTable {
            func: spec.func,
            cfg: spec.cfg,
            c,
            keys,
            values: vals,
            index: None,
        }
    };
    let t0 = side(pad1, &|i| r[i], rng);
    let t1 = side(pad0, &|i| values[i].wrapping_sub(r[i]), rng);
    (t0, t1)
}

/// One party's view of a run of single-use tables for one function.
#[derive(Clone, Debug)]
pub struct SingleTableSet {
    pub spec: FuncTableSpec,
    /// This party's own pad key.
    pub key: PadKey,
    tables: Vec<Arc<SingleTable>>,
    next: usize,
}

impl SingleTableSet {
    pub fn new(spec: FuncTableSpec, key: PadKey, tables: Vec<Arc<SingleTable>>) -> Self {
        SingleTableSet {
            spec,
            key,
            tables,
            next: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.tables.len() - self.next
    }

    pub fn next_c(&self) -> Option<u64> {
        self.tables.get(self.next).map(|t| t.c)
    }

    pub fn tables(&self) -> &[Arc<SingleTable>] {
        &self.tables
    }

    /// Queries one input per table, consuming `xs.len()` tables in one round.
    pub fn query(&mut self, session: &mut Session, xs: &[RingElem]) -> Result<Vec<RingElem>> {
        if self.remaining() < xs.len() {
            return Err(Error::TableExhausted);
        }
        let batch = &self.tables[self.next..self.next + xs.len()];
        self.next += xs.len();
        let cs: Vec<u64> = batch.iter().map(|t| t.c).collect();
        let mut it = batch.iter();
        query_single_stream(session, &self.key, &cs, xs, || {
            Ok(it.next().expect("batch sized above").clone())
        })
    }
}

/// Generates `m` tables for both parties with fresh pad keys.
pub fn gen_single_tables(
    spec: &FuncTableSpec,
    m: usize,
    keys: (PadKey, PadKey),
    rng: &mut impl RngCore,
) -> (SingleTableSet, SingleTableSet) {
    let mut a = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    for c in 0..m as u64 {
        let (t0, t1) = gen_single_table_pair(spec, c, &keys.0, &keys.1, rng);
        a.push(Arc::new(t0));
        b.push(Arc::new(t1));
    }
    (
        SingleTableSet::new(*spec, keys.0, a),
        SingleTableSet::new(*spec, keys.1, b),
    )
}

/// One-round lookup of `xs[j]` in table `cs[j]`.
///
/// Tables are pulled from `next_table` one at a time after the exchange, so
/// a caller can stream them instead of holding a whole batch.
pub fn query_single_stream(
    session: &mut Session,
    own_key: &PadKey,
    cs: &[u64],
    xs: &[RingElem],
    mut next_table: impl FnMut() -> Result<Arc<SingleTable>>,
) -> Result<Vec<RingElem>> {
    if cs.len() != xs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs for {} tables",
            xs.len(),
            cs.len()
        )));
    }
    let msg: Vec<u64> = xs
        .iter()
        .zip(cs)
        .map(|(x, &c)| x.wrapping_add(pad(own_key, c)))
        .collect();
    let peer = session.exchange_words(MsgType::Lookup, &msg)?;
    let mut out = Vec::with_capacity(xs.len());
    for ((x, m), &c) in xs.iter().zip(&peer).zip(cs) {
        let table = next_table()?;
        if table.c != c {
            return Err(Error::OfflineUnderprovisioned(format!(
                "expected table {c}, got {}",
                table.c
            )));
        }
        let key = outer_key(x.wrapping_add(*m) & table.cfg.mask());
        out.push(table.get(&key).ok_or(Error::MissingKey)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::loopback_pair;
    use crate::sharing::{reconstruct_vec, share_vec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy() -> FuncTableSpec {
        FuncTableSpec::identity(FixedCfg::new(2, 0))
    }

    #[test]
    fn toy_tables_reconstruct_by_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (k0, k1) = ([1u8; 32], [2u8; 32]);
        let (t0, t1) = gen_single_table_pair(&toy(), 0, &k0, &k1, &mut rng);
        assert_eq!(t0.len(), 4);
        for x in toy().cfg.grid() {
            let x = x as u64;
            let v0 = t0.get(&outer_key(x.wrapping_add(pad(&k1, 0)) & 3)).unwrap();
            let v1 = t1.get(&outer_key(x.wrapping_add(pad(&k0, 0)) & 3)).unwrap();
            assert_eq!(v0.wrapping_add(v1), x);
        }
    }

    #[test]
    fn file_roundtrip_and_truncation() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (t0, _) = gen_single_table_pair(&toy(), 9, &[0; 32], &[1; 32], &mut rng);
        let mut buf = Vec::new();
        t0.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HWK1");
        assert_eq!(buf.len(), 21 + 4 * 40);
        assert_eq!(SingleTable::read_from(&mut buf.as_slice()).unwrap(), t0);
        let cut = &buf[..buf.len() - 1];
        assert!(matches!(
            SingleTable::read_from(&mut &cut[..]),
            Err(Error::CorruptBundle(_))
        ));
    }

    #[test]
    fn queries_consume_tables_in_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (mut s0, mut s1) = gen_single_tables(&toy(), 3, ([7; 32], [8; 32]), &mut rng);
        let (x0, x1) = share_vec(&[1, 0u64.wrapping_sub(2)], &mut rng);
        let (mut a, mut b) = loopback_pair(0);
        let h = std::thread::spawn(move || {
            let r = s1.query(&mut b, &x1).unwrap();
            let e = s1.query(&mut b, &[0, 0]);
            (r, e)
        });
        let r0 = s0.query(&mut a, &x0).unwrap();
        assert_eq!(s0.next_c(), Some(2));
        assert!(matches!(
            s0.query(&mut a, &[0, 0]),
            Err(Error::TableExhausted)
        ));
        let (r1, e1) = h.join().unwrap();
        assert!(matches!(e1, Err(Error::TableExhausted)));
        assert_eq!(reconstruct_vec(&r0, &r1), vec![1, 0u64.wrapping_sub(2)]);
        assert_eq!(a.stats().rounds, 1);
        assert_eq!(a.stats().bytes_sent, 16);
    }
}
