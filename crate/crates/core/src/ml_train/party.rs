use std::collections::{HashMap, VecDeque};

use super::{Engine, TruncMode};
use crate::activations::{FuncId, FuncTableSpec};
use crate::csp_offline::{FuncKeys, Item, ItemKind, ItemSource, PartySetup};
use crate::error::{Error, Result};
use crate::net::{MsgType, Session};
use crate::ring64::{shift_floor, truncate_share, Mat, RingElem, FRAC_BITS};
use crate::sharing::{beaver_matmul, beaver_mul, beaver_mul_fan, masked_matmul, open, Ledger};
use crate::tables_multi::{BudgetState, MultiTableSet, TableStore};
use crate::tables_single::{query_single_stream, PadKey};

/// Called after every iteration with this party's weight shares.
pub type Observer<'a> = Box<dyn FnMut(usize, &[Mat]) -> Result<()> + Send + 'a>;

enum Lookup {
    Single {
        spec: FuncTableSpec,
        key: PadKey,
        next_c: u64,
    },
    Multi {
        set: Box<MultiTableSet>,
        pulled: u64,
    },
}

/// One party's side of a training or inference run.
pub struct PartyEngine<'a> {
    session: &'a mut Session,
    source: Box<dyn ItemSource + 'a>,
    ledger: Ledger,
    party: u8,
    trunc_mode: TruncMode,
    x: Mat,
    u: Mat,
    y: Mat,
    /// `X - U`, opened on first use.
    e: Option<Mat>,
    lookups: HashMap<FuncId, Lookup>,
    pending: Option<(Vec<usize>, Mat, Mat)>,
    batch: u32,
    observer: Option<Observer<'a>>,
}

impl<'a> PartyEngine<'a> {
    pub fn new(
        session: &'a mut Session,
        setup: PartySetup,
        source: Box<dyn ItemSource + 'a>,
        trunc_mode: TruncMode,
    ) -> Result<Self> {
        if setup.party != session.party() {
            return Err(Error::ConfigInvalid(format!(
                "setup for party {} on a party {} session",
                setup.party,
                session.party()
            )));
        }
        let mut lookups = HashMap::new();
        for f in setup.funcs {
            let l = match f.keys {
                FuncKeys::Single(key) => Lookup::Single {
                    spec: f.spec,
                    key,
                    next_c: 0,
                },
                FuncKeys::Multi {
                    keys,
                    epsilon,
                    epsilon_total,
                } => {
                    let budget = BudgetState::new(epsilon, epsilon_total)?;
                    let set = MultiTableSet::new(
                        f.spec,
                        keys,
                        budget,
                        f.tables,
                        TableStore::Queue(VecDeque::new()),
                    );
                    Lookup::Multi {
                        set: Box::new(set),
                        pulled: 0,
                    }
                }
            };
            lookups.insert(f.spec.func, l);
        }
        Ok(PartyEngine {
            party: session.party(),
            session,
            source,
            ledger: Ledger::default(),
            trunc_mode,
            x: setup.x,
            u: setup.u,
            y: setup.y,
            e: None,
            lookups,
            pending: None,
            batch: 0,
            observer: None,
        })
    }

    pub fn set_observer(&mut self, obs: Observer<'a>) {
        self.observer = Some(obs);
    }

    pub fn session(&self) -> &Session {
        self.session
    }

    /// Opens a sharing to both parties.
    pub fn reveal(&mut self, m: &Mat) -> Result<Mat> {
        let v = open(self.session, &m.data)?;
        Mat::from_vec(m.rows, m.cols, v)
    }

    fn take(&mut self, kind: ItemKind) -> Result<Item> {
        let t = self.source.next_item(kind)?;
        if t.batch != self.batch {
            return Err(Error::OfflineUnderprovisioned(format!(
                "{kind:?} provisioned for batch {} used in batch {}",
                t.batch, self.batch
            )));
        }
        Ok(t.item)
    }

    fn trunc_vec(&mut self, xs: &[RingElem], bits: u32) -> Result<Vec<RingElem>> {
        match self.trunc_mode {
            TruncMode::Local => Ok(xs
                .iter()
                .map(|&x| truncate_share(x, bits, self.party))
                .collect()),
            TruncMode::Exact => {
                let peer = self.session.exchange_words(MsgType::Harness, xs)?;
                Ok(xs
                    .iter()
                    .zip(&peer)
                    .map(|(a, b)| {
                        if self.party == 0 {
                            shift_floor(a.wrapping_add(*b), bits)
                        } else {
                            0
                        }
                    })
                    .collect())
            }
        }
    }

    fn spec(&self, f: FuncId) -> Result<FuncTableSpec> {
        match self.lookups.get(&f) {
            Some(Lookup::Single { spec, .. }) => Ok(*spec),
            Some(Lookup::Multi { set, .. }) => Ok(set.spec),
            None => Err(Error::ConfigInvalid(format!(
                "no tables provisioned for {}",
                f.name()
            ))),
        }
    }

    /// Looks up grid-integer shares.
    fn lookup(&mut self, f: FuncId, xs: &[RingElem]) -> Result<Vec<RingElem>> {
        let n = xs.len() as u64;
        let mut l = self
            .lookups
            .remove(&f)
            .ok_or_else(|| Error::ConfigInvalid(format!("no {} tables", f.name())))?;
        let r = self.lookup_with(&mut l, xs, n);
        self.lookups.insert(f, l);
        r
    }

    fn lookup_with(&mut self, l: &mut Lookup, xs: &[RingElem], n: u64) -> Result<Vec<RingElem>> {
        match l {
            Lookup::Single { key, next_c, .. } => {
                let cs: Vec<u64> = (*next_c..*next_c + n).collect();
                *next_c += n;
                let key = *key;
                let batch = self.batch;
                let source = &mut self.source;
                query_single_stream(self.session, &key, &cs, xs, || {
                    let t = source.next_item(ItemKind::SingleTable)?;
                    match t.item {
                        Item::Single(table) if t.batch == batch => Ok(table),
                        _ => Err(Error::OfflineUnderprovisioned(format!(
                            "single table for batch {}",
                            t.batch
                        ))),
                    }
                })
            }
            Lookup::Multi { set, pulled } => {
                if let Some(last) = set.last_table_for(n) {
                    while *pulled <= last.min(set.m.saturating_sub(1)) {
                        let Item::Multi(t) = self.take(ItemKind::MultiTable)? else {
                            unreachable!()
                        };
                        set.push_table(t)?;
                        *pulled += 1;
                    }
                }
                let Item::Noise(noise) = self.take(ItemKind::Noise)? else {
                    unreachable!()
                };
                let Item::Conversion(conv) = self.take(ItemKind::Conversion)? else {
                    unreachable!()
                };
                self.ledger.consume(noise.id)?;
                set.query(self.session, &mut self.ledger, xs, &noise.shares, &conv)
            }
        }
    }

    fn observe(&mut self, it: usize, ws: &[Mat]) -> Result<()> {
        if let Some(o) = self.observer.as_mut() {
            o(it, ws)?;
        }
        Ok(())
    }
}

impl Engine for PartyEngine<'_> {
    type M = Mat;

    fn shape(&self, a: &Mat) -> (usize, usize) {
        (a.rows, a.cols)
    }

    fn public(&mut self, m: &Mat) -> Mat {
        if self.party == 0 {
            m.clone()
        } else {
            Mat::zeros(m.rows, m.cols)
        }
    }

    fn add(&mut self, a: &Mat, b: &Mat) -> Result<Mat> {
        a.add(b)
    }

    fn sub(&mut self, a: &Mat, b: &Mat) -> Result<Mat> {
        a.sub(b)
    }

    fn transpose(&mut self, a: &Mat) -> Mat {
        a.transpose()
    }

    fn trunc(&mut self, a: &Mat, bits: u32) -> Result<Mat> {
        let d = self.trunc_vec(&a.data, bits)?;
        Mat::from_vec(a.rows, a.cols, d)
    }

    fn mul(&mut self, a: &Mat, b: &Mat) -> Result<Mat> {
        let Item::Beaver(t) = self.take(ItemKind::Triple)? else {
            return Err(Error::OfflineUnderprovisioned(
                "expected a Beaver triple".into(),
            ));
        };
        let d = beaver_mul(self.session, &mut self.ledger, &a.data, &b.data, &t)?;
        Mat::from_vec(a.rows, a.cols, d)
    }

    fn matmul(&mut self, a: &Mat, b: &Mat) -> Result<Mat> {
        let Item::Product(t) = self.take(ItemKind::Triple)? else {
            return Err(Error::OfflineUnderprovisioned(
                "expected a matrix product triple".into(),
            ));
        };
        beaver_matmul(self.session, &mut self.ledger, a, b, &t)
    }

    fn data_rows(&mut self, rows: &[usize]) -> Result<Mat> {
        if rows.iter().any(|&r| r >= self.x.rows) {
            return Err(Error::DimensionMismatch(
                "row outside the shared dataset".into(),
            ));
        }
        Ok(self.x.select_rows(rows))
    }

    fn data_forward(&mut self, rows: &[usize], w: &Mat) -> Result<Mat> {
        let Item::Masked(t) = self.take(ItemKind::Triple)? else {
            return Err(Error::OfflineUnderprovisioned(
                "expected a masked-product triple".into(),
            ));
        };
        self.ledger.consume(t.id)?;
        if self.e.is_none() {
            let e = open(self.session, &self.x.sub(&self.u)?.data)?;
            self.e = Some(Mat::from_vec(self.x.rows, self.x.cols, e)?);
        }
        let xb = self.data_rows(rows)?;
        let eb = self.e.as_ref().expect("opened above").select_rows(rows);
        let out = masked_matmul(self.session, &xb, w, &t.v, &t.z, &eb)?;
        self.pending = Some((rows.to_vec(), t.v_prime, t.z_prime));
        Ok(out)
    }

    fn data_backward(&mut self, rows: &[usize], d: &Mat) -> Result<Mat> {
        let (prows, vp, zp) = self.pending.take().ok_or_else(|| {
            Error::OfflineUnderprovisioned("backward product without a forward one".into())
        })?;
        if prows != rows {
            return Err(Error::DimensionMismatch(
                "backward product on different rows".into(),
            ));
        }
        let xt = self.data_rows(rows)?.transpose();
        let et = self
            .e
            .as_ref()
            .expect("opened in forward")
            .select_rows(rows)
            .transpose();
        masked_matmul(self.session, &xt, d, &vp, &zp, &et)
    }

    fn labels(&mut self, rows: &[usize]) -> Result<Mat> {
        if rows.iter().any(|&r| r >= self.y.rows) {
            return Err(Error::DimensionMismatch(
                "row outside the shared targets".into(),
            ));
        }
        Ok(self.y.select_rows(rows))
    }

    fn sigmoid(&mut self, z: &Mat, z_frac: u32) -> Result<Mat> {
        let spec = self.spec(FuncId::Sigmoid)?;
        let g = self.trunc_vec(&z.data, z_frac - spec.cfg.frac_bits)?;
        let s = self.lookup(FuncId::Sigmoid, &g)?;
        Mat::from_vec(z.rows, z.cols, s)
    }

    fn drelu(&mut self, z: &Mat) -> Result<Mat> {
        let spec = self.spec(FuncId::Drelu)?;
        let keep = spec.cfg.frac_bits;
        let bias = if self.party == 1 {
            (1u64 << FRAC_BITS) - 1
        } else {
            0
        };
        let biased: Vec<u64> = z.data.iter().map(|v| v.wrapping_add(bias)).collect();
        let g = self.trunc_vec(&biased, FRAC_BITS - keep)?;
        let s = self.lookup(FuncId::Drelu, &g)?;
        Mat::from_vec(z.rows, z.cols, s)
    }

    fn softmax(&mut self, z: &Mat) -> Result<Mat> {
        let exp = self.spec(FuncId::Exp)?;
        let inv = self.spec(FuncId::Inverse)?;
        let g = self.trunc_vec(&z.data, FRAC_BITS - exp.cfg.frac_bits)?;
        let e = Mat::from_vec(z.rows, z.cols, self.lookup(FuncId::Exp, &g)?)?;
        let sums: Vec<u64> = (0..z.rows)
            .map(|r| e.row(r).iter().fold(0u64, |a, &b| a.wrapping_add(b)))
            .collect();
        let gs = self.trunc_vec(&sums, FRAC_BITS - inv.cfg.frac_bits)?;
        let r = self.lookup(FuncId::Inverse, &gs)?;
        let Item::Fan(t) = self.take(ItemKind::Triple)? else {
            return Err(Error::OfflineUnderprovisioned(
                "expected a row-product triple".into(),
            ));
        };
        let p = beaver_mul_fan(self.session, &mut self.ledger, &e, &r, &t)?;
        self.trunc(&p, FRAC_BITS)
    }

    fn begin_batch(&mut self, tag: u32) -> Result<()> {
        self.batch = tag;
        Ok(())
    }

    fn end_iteration(&mut self, iteration: usize, weights: &[Mat]) -> Result<()> {
        self.observe(iteration, weights)
    }
}
