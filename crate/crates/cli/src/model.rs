//! Model files: the weights as little-endian ring words, layer after layer
//! in row-major order, plus a `<file>.meta` sidecar of `key=value` lines.

use std::path::{Path, PathBuf};

use lutmpc_core::ml_train::{Model, TrainConfig};
use lutmpc_core::ring64::{Mat, FRAC_BITS};
use lutmpc_core::{Error, Result};

use crate::config::Kv;

const FORMAT: &str = "lutmpc-model-1";

fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

pub fn save(path: &Path, cfg: &TrainConfig, weights: &[Mat]) -> Result<()> {
    let mut kv = Kv::default();
    kv.set("format", FORMAT);
    match &cfg.model {
        Model::Lr => kv.set("model", "lr"),
        Model::Nn { hidden } => {
            kv.set("model", "nn");
            let h: Vec<String> = hidden.iter().map(|w| w.to_string()).collect();
            kv.set("hidden", h.join(","));
        }
    }
    let shapes: Vec<String> = weights
        .iter()
        .map(|m| format!("{}x{}", m.rows, m.cols))
        .collect();
    kv.set("shapes", shapes.join(","));
    kv.set("frac_bits", FRAC_BITS);
    kv.set("sigmoid_int_bits", cfg.sigmoid_cfg.int_bits);
    kv.set("sigmoid_frac_bits", cfg.sigmoid_cfg.frac_bits);
    kv.set("exp_shift", cfg.exp_shift);
    let mut bytes = Vec::new();
    for m in weights {
        for w in &m.data {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    std::fs::write(meta_path(path), kv.to_string())?;
    Ok(())
}

/// Reads a model and the settings stored beside it.
pub fn load(path: &Path) -> Result<(Kv, Vec<Mat>)> {
    let bad = |m: String| Error::ConfigInvalid(format!("{}: {m}", path.display()));
    let meta = std::fs::read_to_string(meta_path(path))
        .map_err(|e| bad(format!("reading sidecar: {e}")))?;
    let kv = Kv::parse(&meta)?;
    if kv.get("format") != Some(FORMAT) {
        return Err(bad("not a model file".into()));
    }
    if kv.value::<u32>("frac_bits")? != Some(FRAC_BITS) {
        return Err(bad("fractional bits differ".into()));
    }
    let bytes = std::fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(bad("length is not a whole number of words".into()));
    }
    let mut words = bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut out = Vec::new();
    for shape in kv.get("shapes").unwrap_or("").split(',') {
        let (r, c) = shape
            .split_once('x')
            .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)))
            .ok_or_else(|| bad(format!("bad shape {shape:?}")))?;
        let data: Vec<u64> = words.by_ref().take(r * c).collect();
        if data.len() != r * c {
            return Err(bad("file is shorter than its shapes".into()));
        }
        out.push(Mat::from_vec(r, c, data)?);
    }
    if words.next().is_some() {
        return Err(bad("file is longer than its shapes".into()));
    }
    Ok((kv, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::settings::train_config;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let cfg = TrainConfig {
            model: Model::Nn { hidden: vec![3] },
            ..TrainConfig::nn()
        };
        let ws = vec![
            Mat::from_vec(2, 3, vec![1, 2, 3, 4, 5, u64::MAX]).unwrap(),
            Mat::from_vec(3, 1, vec![7, 8, 9]).unwrap(),
        ];
        save(&path, &cfg, &ws).unwrap();
        let (kv, back) = load(&path).unwrap();
        assert_eq!(back, ws);
        assert_eq!(train_config(&kv).unwrap().model, cfg.model);

        std::fs::write(&path, [0u8; 16]).unwrap();
        assert!(load(&path).is_err());
    }
}
