//! The offline phase run by the data-owning client (CSP).
//!
//! The CSP secret-shares the dataset and produces all correlated randomness
//! and lookup tables the two parties will consume. What to produce comes
//! from a [`Plan`], obtained by walking the training loop on shapes. Items
//! are generated in consumption order and carry the batch they provision.
//!
//! A bundle on disk is a directory per party holding `manifest.txt`,
//! `setup.bin` and one record file per item kind. Every record carries a
//! CRC-32, and files are read as streams so a party keeps O(1) tables in
//! memory.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::thread::JoinHandle;

use k256::Scalar;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::activations::{FuncId, FuncTableSpec};
use crate::dxpriv::{sample_geometric, GeometricParams};
use crate::error::{Error, Result};
use crate::ml_train::LookupMode;
use crate::ring64::{FixedCfg, Mat, RingElem};
use crate::sharing::{
    gen_conversion_pairs, scalar_from_bytes, scalar_to_bytes, share_mat, share_vec, BeaverTriple,
    ConversionBatch, ConversionPair, FanTriple, MatrixTriple, ProductTriple,
};
use crate::tables_multi::{random_nonzero_scalar, GenStats, MultiGenerator, MultiKeys, MultiTable};
use crate::tables_single::{gen_single_table_pair_with, read_exact, PadKey, SingleTable};

pub const BUNDLE_VERSION: u32 = 1;
const FILE_MAGIC: &[u8; 4] = b"LTB1";

/// One unit of offline material, described by shape.
#[derive(Clone, Debug, PartialEq)]
pub enum Request {
    Beaver {
        n: usize,
    },
    Fan {
        rows: usize,
        cols: usize,
    },
    Product {
        m: usize,
        k: usize,
        n: usize,
    },
    /// Forward and backward masks for `X_B` with `n_out` output columns.
    Masked {
        rows: Vec<usize>,
        n_out: usize,
    },
    Conversion {
        n: usize,
        bits: u32,
    },
    Noise {
        func: FuncId,
        n: usize,
    },
    /// A run of single-use tables `first_c .. first_c + count`.
    Single {
        func: FuncId,
        first_c: u64,
        count: u64,
    },
    Multi {
        func: FuncId,
        c: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedItem {
    pub batch: u32,
    pub req: Request,
}

/// Lookup usage of one function over a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FuncPlan {
    pub spec: FuncTableSpec,
    pub mode: LookupMode,
    pub lookups: u64,
    pub tables: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Plan {
    pub items: Vec<PlannedItem>,
    pub funcs: Vec<FuncPlan>,
    pub batches: u32,
}

impl Plan {
    pub fn func(&self, f: FuncId) -> Option<&FuncPlan> {
        self.funcs.iter().find(|p| p.spec.func == f)
    }

    pub fn tables(&self, f: FuncId) -> u64 {
        self.func(f).map_or(0, |p| p.tables)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ItemKind {
    Triple,
    Conversion,
    Noise,
    SingleTable,
    MultiTable,
}

impl ItemKind {
    pub const ALL: [ItemKind; 5] = [
        ItemKind::Triple,
        ItemKind::Conversion,
        ItemKind::Noise,
        ItemKind::SingleTable,
        ItemKind::MultiTable,
    ];

    pub fn file_name(&self) -> &'static str {
        match self {
            ItemKind::Triple => "triples.bin",
            ItemKind::Conversion => "conversions.bin",
            ItemKind::Noise => "noise.bin",
            ItemKind::SingleTable => "tables_single.bin",
            ItemKind::MultiTable => "tables_multi.bin",
        }
    }

    fn code(&self) -> u8 {
        *self as u8
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseBatch {
    pub id: u64,
    pub shares: Vec<RingElem>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Item {
    Beaver(BeaverTriple),
    Fan(FanTriple),
    Product(ProductTriple),
    Masked(MatrixTriple),
    Conversion(ConversionBatch),
    Noise(NoiseBatch),
    Single(Arc<SingleTable>),
    Multi(Arc<MultiTable>),
}

impl Item {
    pub fn kind(&self) -> ItemKind {
        match self {
            Item::Beaver(_) | Item::Fan(_) | Item::Product(_) | Item::Masked(_) => ItemKind::Triple,
            Item::Conversion(_) => ItemKind::Conversion,
            Item::Noise(_) => ItemKind::Noise,
            Item::Single(_) => ItemKind::SingleTable,
            Item::Multi(_) => ItemKind::MultiTable,
        }
    }
}

/// An item and the batch it was provisioned for.
#[derive(Clone, Debug, PartialEq)]
pub struct Tagged {
    pub batch: u32,
    pub item: Item,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FuncKeys {
    /// This party's pad key.
    Single(PadKey),
    Multi {
        keys: MultiKeys,
        epsilon: f64,
        epsilon_total: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuncSetup {
    pub spec: FuncTableSpec,
    pub keys: FuncKeys,
    pub tables: u64,
}

/// Everything a party receives up front, before the item stream.
#[derive(Clone, Debug, PartialEq)]
pub struct PartySetup {
    pub party: u8,
    /// Share of the encoded features.
    pub x: Mat,
    /// Share of the dataset mask `U`.
    pub u: Mat,
    /// Share of the encoded targets.
    pub y: Mat,
    pub funcs: Vec<FuncSetup>,
}

/// Item counts, as listed in `manifest.txt`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub party: u8,
    pub examples: usize,
    pub features: usize,
    pub outputs: usize,
    pub batches: u32,
    /// Elementwise Beaver triples (scalars, not batches).
    pub beaver: u64,
    pub fan: u64,
    pub product: u64,
    pub masked: u64,
    pub conversion_pairs: u64,
    pub noise_shares: u64,
    pub funcs: Vec<FuncPlan>,
}

impl Manifest {
    pub fn from_plan(plan: &Plan, party: u8, x: &Mat, y: &Mat) -> Manifest {
        let mut m = Manifest {
            version: BUNDLE_VERSION,
            party,
            examples: x.rows,
            features: x.cols,
            outputs: y.cols,
            batches: plan.batches,
            funcs: plan.funcs.clone(),
            ..Default::default()
        };
        for it in &plan.items {
            match &it.req {
                Request::Beaver { n } => m.beaver += *n as u64,
                Request::Fan { .. } => m.fan += 1,
                Request::Product { .. } => m.product += 1,
                Request::Masked { .. } => m.masked += 1,
                Request::Conversion { n, .. } => m.conversion_pairs += *n as u64,
                Request::Noise { n, .. } => m.noise_shares += *n as u64,
                Request::Single { .. } | Request::Multi { .. } => {}
            }
        }
        m
    }

    pub fn tables(&self, f: FuncId) -> u64 {
        self.funcs
            .iter()
            .find(|p| p.spec.func == f)
            .map_or(0, |p| p.tables)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("version", self.version.to_string());
        kv("party", self.party.to_string());
        kv("examples", self.examples.to_string());
        kv("features", self.features.to_string());
        kv("outputs", self.outputs.to_string());
        kv("batches", self.batches.to_string());
        kv("beaver", self.beaver.to_string());
        kv("fan", self.fan.to_string());
        kv("product", self.product.to_string());
        kv("masked", self.masked.to_string());
        kv("conversion_pairs", self.conversion_pairs.to_string());
        kv("noise_shares", self.noise_shares.to_string());
        for f in &self.funcs {
            let p = format!("func.{}.", f.spec.func.name());
            kv(&format!("{p}int_bits"), f.spec.cfg.int_bits.to_string());
            kv(&format!("{p}frac_bits"), f.spec.cfg.frac_bits.to_string());
            kv(&format!("{p}shift"), f.spec.shift.to_string());
            match f.mode {
                LookupMode::Single => kv(&format!("{p}mode"), "single".into()),
                LookupMode::Multi {
                    epsilon,
                    epsilon_total,
                } => {
                    kv(&format!("{p}mode"), "multi".into());
                    kv(&format!("{p}eps"), epsilon.to_string());
                    kv(&format!("{p}eps_total"), epsilon_total.to_string());
                }
            }
            kv(&format!("{p}lookups"), f.lookups.to_string());
            kv(&format!("{p}tables"), f.tables.to_string());
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Manifest> {
        let map: HashMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let bad = |k: &str| Error::CorruptBundle(format!("manifest field {k}"));
        let get = |k: &str| map.get(k).copied().ok_or_else(|| bad(k));
        fn num<T: std::str::FromStr>(v: &str, k: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::CorruptBundle(format!("manifest field {k}")))
        }
        let version: u32 = num(get("version")?, "version")?;
        if version != BUNDLE_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: BUNDLE_VERSION,
            });
        }
        let mut m = Manifest {
            version,
            party: num(get("party")?, "party")?,
            examples: num(get("examples")?, "examples")?,
            features: num(get("features")?, "features")?,
            outputs: num(get("outputs")?, "outputs")?,
            batches: num(get("batches")?, "batches")?,
            beaver: num(get("beaver")?, "beaver")?,
            fan: num(get("fan")?, "fan")?,
            product: num(get("product")?, "product")?,
            masked: num(get("masked")?, "masked")?,
            conversion_pairs: num(get("conversion_pairs")?, "conversion_pairs")?,
            noise_shares: num(get("noise_shares")?, "noise_shares")?,
            funcs: Vec::new(),
        };
        for id in 0..=4u16 {
            let f = FuncId::from_u16(id).expect("known ids");
            let p = format!("func.{}.", f.name());
            let Ok(mode) = get(&format!("{p}mode")) else {
                continue;
            };
            let field = |k: &str| get(&format!("{p}{k}"));
            let cfg = FixedCfg::new(
                num(field("int_bits")?, "int_bits")?,
                num(field("frac_bits")?, "frac_bits")?,
            );
            let spec = FuncTableSpec {
                func: f,
                cfg,
                shift: num(field("shift")?, "shift")?,
            };
            let mode = match mode {
                "single" => LookupMode::Single,
                "multi" => LookupMode::Multi {
                    epsilon: num(field("eps")?, "eps")?,
                    epsilon_total: num(field("eps_total")?, "eps_total")?,
                },
                _ => return Err(bad("mode")),
            };
            m.funcs.push(FuncPlan {
                spec,
                mode,
                lookups: num(field("lookups")?, "lookups")?,
                tables: num(field("tables")?, "tables")?,
            });
        }
        Ok(m)
    }
}

struct SingleGen {
    spec: FuncTableSpec,
    values: Vec<RingElem>,
    keys: (PadKey, PadKey),
}

/// The CSP's generator state for one run.
pub struct Csp {
    rng: ChaCha20Rng,
    /// Noise draws only, so runs that differ in table counts or epsilon
    /// still see the same uniforms.
    noise_rng: ChaCha20Rng,
    u: Mat,
    next_id: u64,
    single: HashMap<FuncId, SingleGen>,
    multi: HashMap<FuncId, MultiGenerator>,
    noise: HashMap<FuncId, GeometricParams>,
}

impl Csp {
    /// Shares the data and draws all keys. `x` and `y` are the encoded
    /// features and targets.
    pub fn new(
        x: &Mat,
        y: &Mat,
        funcs: &[FuncPlan],
        seed: u64,
    ) -> Result<(Csp, PartySetup, PartySetup)> {
        if x.rows != y.rows {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows, {} target rows",
                x.rows, y.rows
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (x0, x1) = share_mat(x, &mut rng);
        let (y0, y1) = share_mat(y, &mut rng);
        let u = Mat::from_vec(
            x.rows,
            x.cols,
            (0..x.len()).map(|_| rng.next_u64()).collect(),
        )?;
        let (u0, u1) = share_mat(&u, &mut rng);
        let mut csp = Csp {
            rng,
            noise_rng: ChaCha20Rng::seed_from_u64(seed ^ 0x6e01_5e00),
            u,
            next_id: 0,
            single: HashMap::new(),
            multi: HashMap::new(),
            noise: HashMap::new(),
        };
        let mut f0 = Vec::new();
        let mut f1 = Vec::new();
        for fp in funcs {
            let spec = fp.spec;
            spec.cfg.validate()?;
            match fp.mode {
                LookupMode::Single => {
                    let mut k0 = [0u8; 32];
                    let mut k1 = [0u8; 32];
                    csp.rng.fill_bytes(&mut k0);
                    csp.rng.fill_bytes(&mut k1);
                    csp.single.insert(
                        spec.func,
                        SingleGen {
                            spec,
                            values: spec.values(),
                            keys: (k0, k1),
                        },
                    );
                    f0.push(FuncSetup {
                        spec,
                        keys: FuncKeys::Single(k0),
                        tables: fp.tables,
                    });
                    f1.push(FuncSetup {
                        spec,
                        keys: FuncKeys::Single(k1),
                        tables: fp.tables,
                    });
                }
                LookupMode::Multi {
                    epsilon,
                    epsilon_total,
                } => {
                    let k0 = MultiKeys {
                        k: random_nonzero_scalar(&mut csp.rng),
                        s: random_nonzero_scalar(&mut csp.rng),
                    };
                    let k1 = MultiKeys {
                        k: random_nonzero_scalar(&mut csp.rng),
                        s: random_nonzero_scalar(&mut csp.rng),
                    };
                    csp.multi.insert(
                        spec.func,
                        MultiGenerator::new(spec, (k0, k1), (epsilon, epsilon_total)),
                    );
                    csp.noise.insert(
                        spec.func,
                        GeometricParams::for_grid(epsilon, spec.cfg.frac_bits)?,
                    );
                    f0.push(FuncSetup {
                        spec,
                        keys: FuncKeys::Multi {
                            keys: k0,
                            epsilon,
                            epsilon_total,
                        },
                        tables: fp.tables,
                    });
                    f1.push(FuncSetup {
                        spec,
                        keys: FuncKeys::Multi {
                            keys: k1,
                            epsilon,
                            epsilon_total,
                        },
                        tables: fp.tables,
                    });
                }
            }
        }
        let s0 = PartySetup {
            party: 0,
            x: x0,
            u: u0,
            y: y0,
            funcs: f0,
        };
        let s1 = PartySetup {
            party: 1,
            x: x1,
            u: u1,
            y: y1,
            funcs: f1,
        };
        Ok((csp, s0, s1))
    }

    /// Elliptic-curve operation counts over all multi-use generators.
    pub fn multi_stats(&self) -> GenStats {
        self.multi
            .values()
            .fold(GenStats::default(), |a, g| GenStats {
                scalar_mults: a.scalar_mults + g.stats.scalar_mults,
                point_adds: a.point_adds + g.stats.point_adds,
            })
    }

    fn id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id - 1
    }

    fn random_mat(&mut self, rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: (0..rows * cols).map(|_| self.rng.next_u64()).collect(),
        }
    }

    /// Generates the items for one plan entry and hands each pair to `emit`.
    pub fn generate(
        &mut self,
        p: &PlannedItem,
        mut emit: impl FnMut(Tagged, Tagged) -> Result<()>,
    ) -> Result<()> {
        let batch = p.batch;
        let mut out = |a: Item, b: Item| emit(Tagged { batch, item: a }, Tagged { batch, item: b });
        match &p.req {
            Request::Beaver { n } => {
                let id = self.id();
                let a: Vec<u64> = (0..*n).map(|_| self.rng.next_u64()).collect();
                let b: Vec<u64> = (0..*n).map(|_| self.rng.next_u64()).collect();
                let c: Vec<u64> = a.iter().zip(&b).map(|(x, y)| x.wrapping_mul(*y)).collect();
                let (a0, a1) = share_vec(&a, &mut self.rng);
                let (b0, b1) = share_vec(&b, &mut self.rng);
                let (c0, c1) = share_vec(&c, &mut self.rng);
                out(
                    Item::Beaver(BeaverTriple {
                        id,
                        a: a0,
                        b: b0,
                        c: c0,
                    }),
                    Item::Beaver(BeaverTriple {
                        id,
                        a: a1,
                        b: b1,
                        c: c1,
                    }),
                )
            }
            Request::Fan { rows, cols } => {
                let id = self.id();
                let a = self.random_mat(*rows, *cols);
                let b: Vec<u64> = (0..*rows).map(|_| self.rng.next_u64()).collect();
                let mut c = a.clone();
                for (row, &br) in c.data.chunks_mut(*cols).zip(&b) {
                    for v in row {
                        *v = v.wrapping_mul(br);
                    }
                }
                let (a0, a1) = share_mat(&a, &mut self.rng);
                let (b0, b1) = share_vec(&b, &mut self.rng);
                let (c0, c1) = share_mat(&c, &mut self.rng);
                out(
                    Item::Fan(FanTriple {
                        id,
                        a: a0,
                        b: b0,
                        c: c0,
                    }),
                    Item::Fan(FanTriple {
                        id,
                        a: a1,
                        b: b1,
                        c: c1,
                    }),
                )
            }
            Request::Product { m, k, n } => {
                let id = self.id();
                let a = self.random_mat(*m, *k);
                let b = self.random_mat(*k, *n);
                let c = a.matmul(&b)?;
                let (a0, a1) = share_mat(&a, &mut self.rng);
                let (b0, b1) = share_mat(&b, &mut self.rng);
                let (c0, c1) = share_mat(&c, &mut self.rng);
                out(
                    Item::Product(ProductTriple {
                        id,
                        a: a0,
                        b: b0,
                        c: c0,
                    }),
                    Item::Product(ProductTriple {
                        id,
                        a: a1,
                        b: b1,
                        c: c1,
                    }),
                )
            }
            Request::Masked { rows, n_out } => {
                let id = self.id();
                if rows.iter().any(|&r| r >= self.u.rows) {
                    return Err(Error::DimensionMismatch(
                        "masked triple for a row outside the dataset".into(),
                    ));
                }
                let ub = self.u.select_rows(rows);
                let v = self.random_mat(self.u.cols, *n_out);
                let z = ub.matmul(&v)?;
                let vp = self.random_mat(rows.len(), *n_out);
                let zp = ub.transpose().matmul(&vp)?;
                let (v0, v1) = share_mat(&v, &mut self.rng);
                let (z0, z1) = share_mat(&z, &mut self.rng);
                let (vp0, vp1) = share_mat(&vp, &mut self.rng);
                let (zp0, zp1) = share_mat(&zp, &mut self.rng);
                out(
                    Item::Masked(MatrixTriple {
                        id,
                        v: v0,
                        z: z0,
                        v_prime: vp0,
                        z_prime: zp0,
                    }),
                    Item::Masked(MatrixTriple {
                        id,
                        v: v1,
                        z: z1,
                        v_prime: vp1,
                        z_prime: zp1,
                    }),
                )
            }
            Request::Conversion { n, bits } => {
                let id = self.id();
                let (p0, p1) = gen_conversion_pairs(*n, *bits, &mut self.rng);
                out(
                    Item::Conversion(ConversionBatch { id, pairs: p0 }),
                    Item::Conversion(ConversionBatch { id, pairs: p1 }),
                )
            }
            Request::Noise { func, n } => {
                let id = self.id();
                let params = *self.noise.get(func).ok_or_else(|| {
                    Error::ConfigInvalid(format!("no noise parameters for {}", func.name()))
                })?;
                let noise: Vec<u64> = (0..*n)
                    .map(|_| sample_geometric(&params, &mut self.noise_rng) as u64)
                    .collect();
                let (s0, s1) = share_vec(&noise, &mut self.rng);
                out(
                    Item::Noise(NoiseBatch { id, shares: s0 }),
                    Item::Noise(NoiseBatch { id, shares: s1 }),
                )
            }
            Request::Single {
                func,
                first_c,
                count,
            } => {
                let g = self.single.get(func).ok_or_else(|| {
                    Error::ConfigInvalid(format!("{} is not a single-use function", func.name()))
                })?;
                for c in *first_c..first_c + count {
                    let (t0, t1) = gen_single_table_pair_with(
                        &g.spec,
                        &g.values,
                        c,
                        &g.keys.0,
                        &g.keys.1,
                        &mut self.rng,
                    );
                    out(Item::Single(Arc::new(t0)), Item::Single(Arc::new(t1)))?;
                }
                Ok(())
            }
            Request::Multi { func, c } => {
                let g = self.multi.get_mut(func).ok_or_else(|| {
                    Error::ConfigInvalid(format!("{} is not a multi-use function", func.name()))
                })?;
                let (t0, t1) = g.gen_pair(*c, &mut self.rng);
                out(Item::Multi(Arc::new(t0)), Item::Multi(Arc::new(t1)))
            }
        }
    }
}

/// An in-memory bundle for one party.
#[derive(Clone, Debug)]
pub struct OfflineBundle {
    pub setup: PartySetup,
    pub manifest: Manifest,
    pub items: Vec<Tagged>,
}

/// Generates complete in-memory bundles for a plan.
pub fn provision(
    x: &Mat,
    y: &Mat,
    plan: &Plan,
    seed: u64,
) -> Result<(OfflineBundle, OfflineBundle)> {
    let (mut csp, s0, s1) = Csp::new(x, y, &plan.funcs, seed)?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for p in &plan.items {
        csp.generate(p, |i0, i1| {
            a.push(i0);
            b.push(i1);
            Ok(())
        })?;
    }
    Ok((
        OfflineBundle {
            setup: s0,
            manifest: Manifest::from_plan(plan, 0, x, y),
            items: a,
        },
        OfflineBundle {
            setup: s1,
            manifest: Manifest::from_plan(plan, 1, x, y),
            items: b,
        },
    ))
}

/// Ordered supply of offline items to a party.
pub trait ItemSource: Send {
    fn next_item(&mut self, kind: ItemKind) -> Result<Tagged>;
}

fn kind_check(t: Tagged, kind: ItemKind) -> Result<Tagged> {
    if t.item.kind() != kind {
        return Err(Error::OfflineUnderprovisioned(format!(
            "expected {kind:?}, found {:?}",
            t.item.kind()
        )));
    }
    Ok(t)
}

/// Items held in memory, consumed in order.
pub struct VecSource(VecDeque<Tagged>);

impl VecSource {
    pub fn new(items: Vec<Tagged>) -> Self {
        VecSource(items.into())
    }

    pub fn remaining(&self) -> usize {
        self.0.len()
    }
}

impl ItemSource for VecSource {
    fn next_item(&mut self, kind: ItemKind) -> Result<Tagged> {
        let t = self
            .0
            .pop_front()
            .ok_or_else(|| Error::OfflineUnderprovisioned(format!("no {kind:?} left")))?;
        kind_check(t, kind)
    }
}

/// Items streamed from a CSP thread.
pub struct ChannelSource(Receiver<Tagged>);

impl ItemSource for ChannelSource {
    fn next_item(&mut self, kind: ItemKind) -> Result<Tagged> {
        let t = self.0.recv().map_err(|_| {
            Error::OfflineUnderprovisioned(format!("item stream ended before a {kind:?}"))
        })?;
        kind_check(t, kind)
    }
}

/// Runs the CSP on its own thread, streaming items through bounded
/// channels of `capacity` items per party.
pub fn spawn_stream(
    mut csp: Csp,
    plan: Arc<Plan>,
    capacity: usize,
) -> (ChannelSource, ChannelSource, JoinHandle<Result<GenStats>>) {
    let (tx0, rx0): (SyncSender<Tagged>, _) = sync_channel(capacity);
    let (tx1, rx1): (SyncSender<Tagged>, _) = sync_channel(capacity);
    let h = std::thread::spawn(move || {
        for p in &plan.items {
            csp.generate(p, |a, b| {
                let gone = || Error::OfflineUnderprovisioned("party stopped reading".into());
                tx0.send(a).map_err(|_| gone())?;
                tx1.send(b).map_err(|_| gone())
            })?;
        }
        Ok(csp.multi_stats())
    });
    (ChannelSource(rx0), ChannelSource(rx1), h)
}

// --- on-disk format ---

struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn words(&mut self, w: &[u64]) {
        self.u64(w.len() as u64);
        for v in w {
            self.u64(*v);
        }
    }
    fn mat(&mut self, m: &Mat) {
        self.u64(m.rows as u64);
        self.u64(m.cols as u64);
        for v in &m.data {
            self.u64(*v);
        }
    }
    fn spec(&mut self, s: &FuncTableSpec) {
        self.0.extend_from_slice(&(s.func as u16).to_le_bytes());
        self.u8(s.cfg.int_bits as u8);
        self.u8(s.cfg.frac_bits as u8);
        self.f64(s.shift);
    }
}

struct Cur<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cur<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::CorruptBundle(
                "record shorter than its contents".into(),
            ));
        }
        self.pos += n;
        Ok(&self.b[self.pos - n..self.pos])
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn len(&mut self, width: usize) -> Result<usize> {
        let n = self.u64()?;
        if n.saturating_mul(width as u64) > (self.b.len() - self.pos) as u64 {
            return Err(Error::CorruptBundle(format!(
                "length {n} overruns the record"
            )));
        }
        Ok(n as usize)
    }
    fn words(&mut self) -> Result<Vec<u64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.u64()).collect()
    }
    fn mat(&mut self) -> Result<Mat> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_mul(8) <= self.b.len() - self.pos);
        let n = n.ok_or_else(|| {
            Error::CorruptBundle(format!("{rows}x{cols} matrix overruns the record"))
        })?;
        let data = (0..n).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
        Mat::from_vec(rows, cols, data)
    }
    fn spec(&mut self) -> Result<FuncTableSpec> {
        let f = u16::from_le_bytes(self.take(2)?.try_into().unwrap());
        let func =
            FuncId::from_u16(f).ok_or_else(|| Error::CorruptBundle(format!("function id {f}")))?;
        let cfg = FixedCfg::new(self.u8()? as u32, self.u8()? as u32);
        cfg.validate()
            .map_err(|_| Error::CorruptBundle("bad layout".into()))?;
        Ok(FuncTableSpec {
            func,
            cfg,
            shift: self.f64()?,
        })
    }
    fn scalar(&mut self) -> Result<Scalar> {
        let b: [u8; 32] = self.take(32)?.try_into().unwrap();
        scalar_from_bytes(&b).ok_or_else(|| Error::CorruptBundle("scalar out of range".into()))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.b.len() {
            return Err(Error::CorruptBundle("trailing bytes in record".into()));
        }
        Ok(())
    }
}

fn encode_item(t: &Tagged) -> Result<Vec<u8>> {
    let mut b = Buf(Vec::new());
    b.u32(t.batch);
    match &t.item {
        Item::Beaver(x) => {
            b.u8(1);
            b.u64(x.id);
            b.words(&x.a);
            b.words(&x.b);
            b.words(&x.c);
        }
        Item::Fan(x) => {
            b.u8(2);
            b.u64(x.id);
            b.mat(&x.a);
            b.words(&x.b);
            b.mat(&x.c);
        }
        Item::Product(x) => {
            b.u8(3);
            b.u64(x.id);
            b.mat(&x.a);
            b.mat(&x.b);
            b.mat(&x.c);
        }
        Item::Masked(x) => {
            b.u8(4);
            b.u64(x.id);
            b.mat(&x.v);
            b.mat(&x.z);
            b.mat(&x.v_prime);
            b.mat(&x.z_prime);
        }
        Item::Conversion(x) => {
            b.u64(x.id);
            b.u64(x.pairs.len() as u64);
            for p in &x.pairs {
                b.u64(p.r_small);
                b.0.extend_from_slice(&scalar_to_bytes(&p.r_big));
            }
        }
        Item::Noise(x) => {
            b.u64(x.id);
            b.words(&x.shares);
        }
        Item::Single(x) => x.write_to(&mut b.0)?,
        Item::Multi(x) => x.write_to(&mut b.0)?,
    }
    Ok(b.0)
}

fn decode_item(kind: ItemKind, body: &[u8]) -> Result<Tagged> {
    let mut c = Cur { b: body, pos: 0 };
    let batch = c.u32()?;
    let item = match kind {
        ItemKind::Triple => match c.u8()? {
            1 => Item::Beaver(BeaverTriple {
                id: c.u64()?,
                a: c.words()?,
                b: c.words()?,
                c: c.words()?,
            }),
            2 => Item::Fan(FanTriple {
                id: c.u64()?,
                a: c.mat()?,
                b: c.words()?,
                c: c.mat()?,
            }),
            3 => Item::Product(ProductTriple {
                id: c.u64()?,
                a: c.mat()?,
                b: c.mat()?,
                c: c.mat()?,
            }),
            4 => Item::Masked(MatrixTriple {
                id: c.u64()?,
                v: c.mat()?,
                z: c.mat()?,
                v_prime: c.mat()?,
                z_prime: c.mat()?,
            }),
            t => return Err(Error::CorruptBundle(format!("triple type {t}"))),
        },
        ItemKind::Conversion => {
            let id = c.u64()?;
            let n = c.len(40)?;
            let pairs = (0..n)
                .map(|_| {
                    Ok(ConversionPair {
                        r_small: c.u64()?,
                        r_big: c.scalar()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Item::Conversion(ConversionBatch { id, pairs })
        }
        ItemKind::Noise => Item::Noise(NoiseBatch {
            id: c.u64()?,
            shares: c.words()?,
        }),
        ItemKind::SingleTable => {
            let mut r = &body[c.pos..];
            let t = SingleTable::read_from(&mut r)?;
            c.pos = body.len() - r.len();
            Item::Single(Arc::new(t))
        }
        ItemKind::MultiTable => {
            let mut r = &body[c.pos..];
            let t = MultiTable::read_from(&mut r)?;
            c.pos = body.len() - r.len();
            Item::Multi(Arc::new(t))
        }
    };
    c.done()?;
    Ok(Tagged { batch, item })
}

fn write_file_header(w: &mut impl Write, kind: u8) -> Result<()> {
    w.write_all(FILE_MAGIC)?;
    w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    Ok(())
}

fn read_file_header(r: &mut impl Read, kind: u8) -> Result<()> {
    let mut h = [0u8; 9];
    read_exact(r, &mut h)?;
    if &h[..4] != FILE_MAGIC {
        return Err(Error::CorruptBundle("not a bundle file".into()));
    }
    let v = u32::from_le_bytes(h[4..8].try_into().unwrap());
    if v != BUNDLE_VERSION {
        return Err(Error::VersionMismatch {
            found: v,
            expected: BUNDLE_VERSION,
        });
    }
    if h[8] != kind {
        return Err(Error::CorruptBundle(format!(
            "file holds kind {}, expected {kind}",
            h[8]
        )));
    }
    Ok(())
}

fn write_record(w: &mut impl Write, body: &[u8]) -> Result<()> {
    w.write_all(&(body.len() as u64).to_le_bytes())?;
    w.write_all(body)?;
    w.write_all(&crc32fast::hash(body).to_le_bytes())?;
    Ok(())
}

/// Reads one record; `None` at a clean end of file.
fn read_record(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        let n = r.read(&mut len[got..])?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(Error::CorruptBundle("truncated record length".into()));
        }
        got += n;
    }
    let len = u64::from_le_bytes(len);
    if len > 1 << 32 {
        return Err(Error::CorruptBundle(format!("record length {len}")));
    }
    let mut body = vec![0u8; len as usize];
    read_exact(r, &mut body)?;
    let mut crc = [0u8; 4];
    read_exact(r, &mut crc)?;
    if crc32fast::hash(&body) != u32::from_le_bytes(crc) {
        return Err(Error::CorruptBundle("checksum mismatch".into()));
    }
    Ok(Some(body))
}

const SETUP_KIND: u8 = 0xff;

fn encode_setup(s: &PartySetup) -> Vec<u8> {
    let mut b = Buf(Vec::new());
    b.u8(s.party);
    b.mat(&s.x);
    b.mat(&s.u);
    b.mat(&s.y);
    b.u32(s.funcs.len() as u32);
    for f in &s.funcs {
        b.spec(&f.spec);
        b.u64(f.tables);
        match &f.keys {
            FuncKeys::Single(k) => {
                b.u8(0);
                b.0.extend_from_slice(k);
            }
            FuncKeys::Multi {
                keys,
                epsilon,
                epsilon_total,
            } => {
                b.u8(1);
                b.0.extend_from_slice(&scalar_to_bytes(&keys.k));
                b.0.extend_from_slice(&scalar_to_bytes(&keys.s));
                b.f64(*epsilon);
                b.f64(*epsilon_total);
            }
        }
    }
    b.0
}

fn decode_setup(body: &[u8]) -> Result<PartySetup> {
    let mut c = Cur { b: body, pos: 0 };
    let party = c.u8()?;
    let (x, u, y) = (c.mat()?, c.mat()?, c.mat()?);
    let n = c.u32()?;
    let mut funcs = Vec::new();
    for _ in 0..n {
        let spec = c.spec()?;
        let tables = c.u64()?;
        let keys = match c.u8()? {
            0 => FuncKeys::Single(c.take(32)?.try_into().unwrap()),
            1 => FuncKeys::Multi {
                keys: MultiKeys {
                    k: c.scalar()?,
                    s: c.scalar()?,
                },
                epsilon: c.f64()?,
                epsilon_total: c.f64()?,
            },
            t => return Err(Error::CorruptBundle(format!("key type {t}"))),
        };
        funcs.push(FuncSetup { spec, keys, tables });
    }
    c.done()?;
    Ok(PartySetup {
        party,
        x,
        u,
        y,
        funcs,
    })
}

/// Writes a party's bundle item by item.
pub struct BundleWriter {
    dir: PathBuf,
    files: HashMap<ItemKind, BufWriter<File>>,
}

impl BundleWriter {
    pub fn create(dir: &Path, setup: &PartySetup) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(File::create(dir.join("setup.bin"))?);
        write_file_header(&mut f, SETUP_KIND)?;
        write_record(&mut f, &encode_setup(setup))?;
        f.flush()?;
        let mut files = HashMap::new();
        for k in ItemKind::ALL {
            let mut w = BufWriter::new(File::create(dir.join(k.file_name()))?);
            write_file_header(&mut w, k.code())?;
            files.insert(k, w);
        }
        Ok(BundleWriter {
            dir: dir.to_path_buf(),
            files,
        })
    }

    pub fn push(&mut self, t: &Tagged) -> Result<()> {
        let body = encode_item(t)?;
        let w = self
            .files
            .get_mut(&t.item.kind())
            .expect("all kinds opened");
        write_record(w, &body)
    }

    pub fn finish(mut self, manifest: &Manifest) -> Result<()> {
        for w in self.files.values_mut() {
            w.flush()?;
        }
        fs::write(self.dir.join("manifest.txt"), manifest.to_kv())?;
        Ok(())
    }
}

pub fn write_bundle(dir: &Path, b: &OfflineBundle) -> Result<()> {
    let mut w = BundleWriter::create(dir, &b.setup)?;
    for t in &b.items {
        w.push(t)?;
    }
    w.finish(&b.manifest)
}

/// Streaming reader over a bundle directory.
pub struct BundleReader {
    pub setup: PartySetup,
    pub manifest: Manifest,
    files: HashMap<ItemKind, BufReader<File>>,
}

impl BundleReader {
    /// Reads the next record of `kind`, or `None` when that file is done.
    pub fn read_next(&mut self, kind: ItemKind) -> Result<Option<Tagged>> {
        let r = self.files.get_mut(&kind).expect("all kinds opened");
        match read_record(r)? {
            None => Ok(None),
            Some(body) => decode_item(kind, &body).map(Some),
        }
    }
}

impl ItemSource for BundleReader {
    fn next_item(&mut self, kind: ItemKind) -> Result<Tagged> {
        self.read_next(kind)?
            .ok_or_else(|| Error::OfflineUnderprovisioned(format!("bundle has no more {kind:?}")))
    }
}

pub fn read_bundle(dir: &Path) -> Result<BundleReader> {
    let text = fs::read_to_string(dir.join("manifest.txt")).map_err(|e| {
        Error::CorruptBundle(format!("{}: {e}", dir.join("manifest.txt").display()))
    })?;
    let manifest = Manifest::from_kv(&text)?;
    let mut f = BufReader::new(File::open(dir.join("setup.bin"))?);
    read_file_header(&mut f, SETUP_KIND)?;
    let body = read_record(&mut f)?.ok_or_else(|| Error::CorruptBundle("empty setup".into()))?;
    let setup = decode_setup(&body)?;
    let mut files = HashMap::new();
    for k in ItemKind::ALL {
        let mut r = BufReader::new(File::open(dir.join(k.file_name()))?);
        read_file_header(&mut r, k.code())?;
        files.insert(k, r);
    }
    Ok(BundleReader {
        setup,
        manifest,
        files,
    })
}

/// Loads every item of a bundle into memory, in consumption order per kind.
pub fn read_bundle_all(
    dir: &Path,
) -> Result<(PartySetup, Manifest, HashMap<ItemKind, Vec<Tagged>>)> {
    let mut r = read_bundle(dir)?;
    let mut all = HashMap::new();
    for k in ItemKind::ALL {
        let mut v = Vec::new();
        while let Some(t) = r.read_next(k)? {
            v.push(t);
        }
        all.insert(k, v);
    }
    Ok((r.setup, r.manifest, all))
}
