use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use lutmpc_core::ml_train::{load_csv, load_mnist_idx, Dataset, LookupMode, Model, TrainConfig};
use lutmpc_core::net::Netem;
use lutmpc_core::ring64::FixedCfg;
use lutmpc_core::{Error, Result};

use crate::config::Kv;

/// Options shared by every command that trains or evaluates a model.
/// Each may also be given in the `--config` file under the same name.
#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// Flat key=value file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// lr or nn.
    #[arg(long)]
    pub model: Option<String>,
    /// Hidden layer widths for nn, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    /// mnist01, mnist10k, mnist (full IDX files) or csv:PATH.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Test set for csv datasets.
    #[arg(long)]
    pub test_csv: Option<PathBuf>,
    /// Relabel as one class against the rest (logistic regression).
    #[arg(long)]
    pub positive: Option<u32>,
    /// Use only the first N training examples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// single or multi.
    #[arg(long)]
    pub mode: Option<String>,
    /// Per-query budget of multi-use tables.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Per-table budget; inf allows unlimited reuse.
    #[arg(long, visible_alias = "epsT")]
    pub eps_total: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_shift: Option<u32>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub sigmoid_int_bits: Option<u32>,
    #[arg(long)]
    pub sigmoid_frac_bits: Option<u32>,
    #[arg(long)]
    pub exp_shift: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// lan, wan, or latency_ms,bandwidth_MB_per_s.
    #[arg(long)]
    pub netem: Option<String>,
}

impl RunArgs {
    /// Config file entries with the given flags laid over them.
    pub fn settings(&self) -> Result<Kv> {
        let mut kv = match &self.config {
            Some(p) => Kv::load(p)?,
            None => Kv::default(),
        };
        self.overlay(&mut kv);
        Ok(kv)
    }

    pub fn overlay(&self, kv: &mut Kv) {
        kv.overlay("model", self.model.as_ref());
        kv.overlay("hidden", self.hidden.as_ref());
        kv.overlay("dataset", self.dataset.as_ref());
        kv.overlay("data_dir", self.data_dir.as_ref().map(|p| p.display()));
        kv.overlay("test_csv", self.test_csv.as_ref().map(|p| p.display()));
        kv.overlay("positive", self.positive);
        kv.overlay("train_limit", self.train_limit);
        kv.overlay("mode", self.mode.as_ref());
        kv.overlay("eps", self.eps);
        kv.overlay("eps_total", self.eps_total);
        kv.overlay("seed", self.seed);
        kv.overlay("batch", self.batch);
        kv.overlay("epochs", self.epochs);
        kv.overlay("lr_shift", self.lr_shift);
        kv.overlay("max_iterations", self.max_iterations);
        kv.overlay("sigmoid_int_bits", self.sigmoid_int_bits);
        kv.overlay("sigmoid_frac_bits", self.sigmoid_frac_bits);
        kv.overlay("exp_shift", self.exp_shift);
        kv.overlay("label_smoothing", self.label_smoothing);
        kv.overlay("init_scale", self.init_scale);
        kv.overlay("netem", self.netem.as_ref());
    }
}

pub fn parse_hidden(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| Error::ConfigInvalid(format!("hidden widths: bad entry {w:?}")))
        })
        .collect()
}

pub fn model_from(kv: &Kv) -> Result<Model> {
    match kv.get("model").unwrap_or("lr") {
        "lr" => Ok(Model::Lr),
        "nn" => Ok(Model::Nn {
            hidden: parse_hidden(kv.get("hidden").unwrap_or("128,128"))?,
        }),
        other => Err(Error::ConfigInvalid(format!("unknown model {other:?}"))),
    }
}

pub fn mode_from(kv: &Kv) -> Result<LookupMode> {
    match kv.get("mode").unwrap_or("single") {
        "single" => Ok(LookupMode::Single),
        "multi" => {
            let epsilon = kv
                .value("eps")?
                .ok_or_else(|| Error::ConfigInvalid("multi mode needs eps".into()))?;
            Ok(LookupMode::Multi {
                epsilon,
                epsilon_total: kv.value_or("eps_total", f64::INFINITY)?,
            })
        }
        other => Err(Error::ConfigInvalid(format!("unknown mode {other:?}"))),
    }
}

/// Training configuration described by `kv`, starting from the model's
/// defaults.
pub fn train_config(kv: &Kv) -> Result<TrainConfig> {
    let model = model_from(kv)?;
    let base = match model {
        Model::Lr => TrainConfig::lr(),
        Model::Nn { .. } => TrainConfig::nn(),
    };
    let cfg = TrainConfig {
        model,
        batch: kv.value_or("batch", base.batch)?,
        lr_shift: kv.value_or("lr_shift", base.lr_shift)?,
        epochs: kv.value_or("epochs", base.epochs)?,
        max_iterations: kv.value("max_iterations")?,
        seed: kv.value_or("seed", base.seed)?,
        mode: mode_from(kv)?,
        sigmoid_cfg: FixedCfg::new(
            kv.value_or("sigmoid_int_bits", base.sigmoid_cfg.int_bits)?,
            kv.value_or("sigmoid_frac_bits", base.sigmoid_cfg.frac_bits)?,
        ),
        exp_shift: kv.value_or("exp_shift", base.exp_shift)?,
        label_smoothing: kv.value_or("label_smoothing", base.label_smoothing)?,
        init_scale: kv.value_or("init_scale", base.init_scale)?,
        trunc: base.trunc,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn netem_from(kv: &Kv) -> Result<Option<Netem>> {
    let Some(s) = kv.get("netem") else {
        return Ok(None);
    };
    match s {
        "none" | "" => Ok(None),
        "lan" => Ok(Some(Netem::LAN)),
        "wan" => Ok(Some(Netem::WAN)),
        _ => {
            let bad = || Error::ConfigInvalid(format!("netem {s:?}: expected latency_ms,MB_per_s"));
            let (lat, bw) = s.split_once(',').ok_or_else(bad)?;
            let lat: f64 = lat.trim().parse().map_err(|_| bad())?;
            let bw: f64 = bw.trim().parse().map_err(|_| bad())?;
            if !(lat >= 0.0 && bw >= 0.0) {
                return Err(bad());
            }
            Ok(Some(Netem {
                latency: Duration::from_secs_f64(lat / 1000.0),
                bandwidth: bw * 1e6,
            }))
        }
    }
}

fn idx_pair(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let pick = |name: &str| {
        let gz = dir.join(format!("{name}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(name)
        }
    };
    load_mnist_idx(&pick(images), &pick(labels))
}

fn digits_01(ds: &Dataset) -> Result<Dataset> {
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for i in (0..ds.len()).filter(|&i| ds.labels[i] < 2) {
        x.extend_from_slice(ds.row(i));
        labels.push(ds.labels[i]);
    }
    Dataset::new(x, labels, ds.features, 2)
}

/// Training and test sets named by `kv`.
pub fn datasets(kv: &Kv) -> Result<(Dataset, Dataset)> {
    let dir = PathBuf::from(kv.get("data_dir").unwrap_or("data/mnist"));
    let name = kv.get("dataset").unwrap_or("mnist01");
    let (train, test) = match name {
        "mnist01" | "mnist10k" => {
            let all = idx_pair(
                &dir,
                "mnist10k-images-idx3-ubyte",
                "mnist10k-labels-idx1-ubyte",
            )?;
            if name == "mnist01" {
                let all = digits_01(&all)?;
                (all.slice(0, 1000), all.slice(1000, all.len()))
            } else {
                (all.slice(0, 6000), all.slice(6000, all.len()))
            }
        }
        "mnist" => (
            idx_pair(&dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
            idx_pair(&dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
        ),
        _ => match name.strip_prefix("csv:") {
            Some(path) => {
                let train = load_csv(Path::new(path))?;
                let test = match kv.get("test_csv") {
                    Some(t) => load_csv(Path::new(t))?,
                    None => train.slice(0, 0),
                };
                (train, test)
            }
            None => return Err(Error::ConfigInvalid(format!("unknown dataset {name:?}"))),
        },
    };
    let limit: Option<usize> = kv.value("train_limit")?;
    let train = match limit {
        Some(n) => train.slice(0, n),
        None => train,
    };
    match kv.value::<u32>("positive")? {
        Some(p) => Ok((train.one_vs_rest(p), test.one_vs_rest(p))),
        None => Ok((train, test)),
    }
}

/// Checks that a dataset's labels fit the model's outputs.
pub fn check_labels(cfg: &TrainConfig, ds: &Dataset) -> Result<()> {
    if cfg.model == Model::Lr && ds.labels.iter().any(|&l| l > 1) {
        return Err(Error::ConfigInvalid(
            "logistic regression needs 0/1 labels; pass --positive".into(),
        ));
    }
    Ok(())
}
