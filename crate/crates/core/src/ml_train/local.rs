use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{
    forward, initial_weights, plan, plan_inference, schedule, train_loop, Dataset, PartyEngine,
    TrainConfig,
};
use crate::csp_offline::{spawn_stream, Csp, ItemSource, Manifest, PartySetup, Plan};
use crate::error::{Error, Result};
use crate::net::{loopback_pair, Netem, Session, SessionStats};
use crate::ring64::Mat;
use crate::tables_multi::GenStats;

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Items buffered per party between the CSP thread and the party.
    pub capacity: usize,
    /// Keep the reconstructed weights after every iteration.
    pub observe: bool,
    pub netem: Option<Netem>,
    pub csp_seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            capacity: 64,
            observe: false,
            netem: None,
            csp_seed: 0x5eed,
        }
    }
}

/// Outcome of an in-process run.
#[derive(Clone, Debug)]
pub struct LocalRun {
    /// Reconstructed final weights (training) or outputs (inference).
    pub weights: Vec<Mat>,
    pub trajectory: Vec<Vec<Mat>>,
    pub stats: [SessionStats; 2],
    pub manifest: Manifest,
    pub gen: GenStats,
    pub wall: Duration,
}

/// Trains one party's side, returning its final weight shares and, if
/// `observe` is set, its shares after every iteration.
#[allow(clippy::too_many_arguments)]
pub fn train_party<'a>(
    session: &'a mut Session,
    setup: PartySetup,
    source: Box<dyn ItemSource + 'a>,
    cfg: &TrainConfig,
    n: usize,
    features: usize,
    classes: usize,
    observe: bool,
) -> Result<(Vec<Mat>, Vec<Vec<Mat>>)> {
    let sched = schedule(cfg, n);
    let init = initial_weights(cfg, &cfg.widths(features, classes))?;
    let mut traj = Vec::new();
    let ws = {
        let mut e = PartyEngine::new(session, setup, source, cfg.trunc)?;
        if observe {
            let t = &mut traj;
            e.set_observer(Box::new(move |_, ws: &[Mat]| {
                t.push(ws.to_vec());
                Ok(())
            }));
        }
        train_loop(&mut e, cfg, &sched, &init)?
    };
    Ok((ws, traj))
}

fn add_all(a: &[Mat], b: &[Mat]) -> Result<Vec<Mat>> {
    a.iter().zip(b).map(|(x, y)| x.add(y)).collect()
}

fn join<T>(h: std::thread::ScopedJoinHandle<'_, Result<T>>) -> Result<T> {
    h.join()
        .map_err(|_| Error::ConfigInvalid("worker thread panicked".into()))?
}

/// Runs the CSP and both parties in this process over a loopback link.
fn run_pair<T: Send>(
    x: &Mat,
    y: &Mat,
    plan: Plan,
    opts: &RunOptions,
    party: impl Fn(&mut Session, PartySetup, Box<dyn ItemSource>) -> Result<T> + Sync,
) -> Result<(T, T, [SessionStats; 2], Manifest, GenStats, Duration)> {
    let start = Instant::now();
    let manifest = Manifest::from_plan(&plan, 0, x, y);
    let (csp, s0, s1) = Csp::new(x, y, &plan.funcs, opts.csp_seed)?;
    let (src0, src1, gen) = spawn_stream(csp, Arc::new(plan), opts.capacity.max(1));
    let (mut p0, mut p1) = loopback_pair(1);
    p0.set_netem(opts.netem);
    p1.set_netem(opts.netem);
    let (r0, r1) = std::thread::scope(|sc| {
        let party = &party;
        let h0 = sc.spawn(move || {
            let r = party(&mut p0, s0, Box::new(src0));
            r.map(|v| (v, p0.stats().clone()))
        });
        let h1 = sc.spawn(move || {
            let r = party(&mut p1, s1, Box::new(src1));
            r.map(|v| (v, p1.stats().clone()))
        });
        (join(h0), join(h1))
    });
    let gen = gen
        .join()
        .map_err(|_| Error::ConfigInvalid("CSP thread panicked".into()))?;
    let ((v0, st0), (v1, st1)) = (r0?, r1?);
    let gen = gen?;
    Ok((v0, v1, [st0, st1], manifest, gen, start.elapsed()))
}

/// Encoded features, encoded targets and the offline plan for training on
/// `ds`: everything the CSP needs.
pub fn prepare_training(ds: &Dataset, cfg: &TrainConfig) -> Result<(Mat, Mat, Plan)> {
    cfg.validate()?;
    let widths = cfg.widths(ds.features, ds.classes);
    let outputs = *widths.last().expect("at least one layer");
    let smoothing = if outputs == 1 {
        0.0
    } else {
        cfg.label_smoothing
    };
    let x = ds.encode_x()?;
    let y = ds.encode_targets(outputs, smoothing)?;
    let p = plan(cfg, ds.len(), ds.features, ds.classes)?;
    Ok((x, y, p))
}

/// Trains on `ds` with both parties and the CSP in this process.
pub fn run_local(ds: &Dataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<LocalRun> {
    let (x, y, p) = prepare_training(ds, cfg)?;
    let (a, b, stats, manifest, gen, wall) = run_pair(&x, &y, p, opts, |s, setup, src| {
        train_party(
            s,
            setup,
            src,
            cfg,
            ds.len(),
            ds.features,
            ds.classes,
            opts.observe,
        )
    })?;
    let weights = add_all(&a.0, &b.0)?;
    let trajectory =
        a.1.iter()
            .zip(&b.1)
            .map(|(u, v)| add_all(u, v))
            .collect::<Result<_>>()?;
    Ok(LocalRun {
        weights,
        trajectory,
        stats,
        manifest,
        gen,
        wall,
    })
}

/// Evaluates a plaintext ring model on secret-shared inputs and returns the
/// reconstructed outputs as the single entry of `weights`.
pub fn infer_local(
    ds: &Dataset,
    cfg: &TrainConfig,
    model: &[Mat],
    opts: &RunOptions,
) -> Result<LocalRun> {
    cfg.validate()?;
    let widths = cfg.widths(ds.features, ds.classes);
    let outputs = *widths.last().expect("at least one layer");
    if model.len() + 1 != widths.len()
        || model
            .iter()
            .zip(widths.windows(2))
            .any(|(m, w)| (m.rows, m.cols) != (w[0], w[1]))
    {
        return Err(Error::DimensionMismatch(
            "model shape does not fit the dataset".into(),
        ));
    }
    let x = ds.encode_x()?;
    let y = Mat::zeros(ds.len(), outputs);
    let p = plan_inference(cfg, ds.len(), ds.features, ds.classes)?;
    let mut rng = ChaCha20Rng::seed_from_u64(opts.csp_seed ^ 0x0de1);
    let mut share0 = Vec::new();
    let mut share1 = Vec::new();
    for m in model {
        let r = Mat {
            rows: m.rows,
            cols: m.cols,
            data: (0..m.data.len()).map(|_| rng.next_u64()).collect(),
        };
        share0.push(m.sub(&r)?);
        share1.push(r);
    }
    let rows: Vec<usize> = (0..ds.len()).collect();
    let (a, b, stats, manifest, gen, wall) = run_pair(&x, &y, p, opts, |s, setup, src| {
        let ws = if s.party() == 0 { &share0 } else { &share1 };
        let mut e = PartyEngine::new(s, setup, src, cfg.trunc)?;
        use super::Engine;
        e.begin_batch(0)?;
        let xs = e.data_rows(&rows)?;
        forward(&mut e, &cfg.model, ws, &xs)
    })?;
    Ok(LocalRun {
        weights: vec![a.add(&b)?],
        trajectory: Vec::new(),
        stats,
        manifest,
        gen,
        wall,
    })
}
