use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::ring64::{encode_fixed, FixedCfg, Mat};

/// Plaintext examples as held by the data owner.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Row-major `n x features`.
    pub x: Vec<f64>,
    pub labels: Vec<u32>,
    pub features: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Vec<f64>, labels: Vec<u32>, features: usize, classes: usize) -> Result<Self> {
        if features == 0 || x.len() != labels.len() * features {
            return Err(Error::Dataset(format!(
                "{} values for {} rows of {features} features",
                x.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Dataset(format!("label {l} with {classes} classes")));
        }
        Ok(Dataset {
            x,
            labels,
            features,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let end = end.min(self.len());
        let start = start.min(end);
        Dataset {
            x: self.x[start * self.features..end * self.features].to_vec(),
            labels: self.labels[start..end].to_vec(),
            features: self.features,
            classes: self.classes,
        }
    }

    /// Two-class relabelling: 1 for `positive`, 0 for everything else.
    pub fn one_vs_rest(&self, positive: u32) -> Dataset {
        Dataset {
            labels: self
                .labels
                .iter()
                .map(|&l| (l == positive) as u32)
                .collect(),
            classes: 2,
            ..self.clone()
        }
    }

    /// Features as ring values.
    pub fn encode_x(&self) -> Result<Mat> {
        let data = self
            .x
            .iter()
            .map(|&v| encode_fixed(v, FixedCfg::RING))
            .collect::<Result<Vec<_>>>()?;
        Mat::from_vec(self.len(), self.features, data)
    }

    /// Training targets: a single 0/1 column for `outputs == 1`, otherwise
    /// smoothed one-hot rows.
    pub fn encode_targets(&self, outputs: usize, smoothing: f64) -> Result<Mat> {
        let mut m = Mat::zeros(self.len(), outputs);
        for (i, &l) in self.labels.iter().enumerate() {
            if outputs == 1 {
                m.set(i, 0, encode_fixed(l as f64, FixedCfg::RING)?);
                continue;
            }
            let off = smoothing / outputs as f64;
            for k in 0..outputs {
                let t = if k == l as usize {
                    1.0 - smoothing + off
                } else {
                    off
                };
                m.set(i, k, encode_fixed(t, FixedCfg::RING)?);
            }
        }
        Ok(m)
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        return Ok(out);
    }
    Ok(raw)
}

fn idx_header(buf: &[u8], kind: u8, dims: usize) -> Result<(Vec<usize>, usize)> {
    let head = 4 + 4 * dims;
    if buf.len() < head || buf[0] != 0 || buf[1] != 0 || buf[2] != kind || buf[3] as usize != dims {
        return Err(Error::Dataset(
            "not an IDX file of the expected shape".into(),
        ));
    }
    let sizes = (0..dims)
        .map(|i| u32::from_be_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    Ok((sizes, head))
}

/// MNIST in IDX format (optionally gzipped); pixels scaled to `[0, 1]`.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = open_maybe_gz(images)?;
    let lab = open_maybe_gz(labels)?;
    let (isz, ih) = idx_header(&img, 0x08, 3)?;
    let (lsz, lh) = idx_header(&lab, 0x08, 1)?;
    let (n, features) = (isz[0], isz[1] * isz[2]);
    if lsz[0] != n || img.len() != ih + n * features || lab.len() != lh + n {
        return Err(Error::Dataset(format!(
            "IDX sizes disagree: {n} images, {} labels",
            lsz[0]
        )));
    }
    let x = img[ih..].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<u32> = lab[lh..].iter().map(|&l| l as u32).collect();
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1).max(2);
    Dataset::new(x, labels, features, classes)
}

/// Headerless CSV, label in the first column, features as given.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut x = Vec::new();
    let mut labels = Vec::new();
    let mut features = None;
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',').map(str::trim);
        let bad = |what: &str| Error::Dataset(format!("line {}: bad {what}", ln + 1));
        let label: u32 = cells
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("label"))?;
        let row = cells
            .map(|c| c.parse::<f64>().map_err(|_| bad("value")))
            .collect::<Result<Vec<_>>>()?;
        match features {
            None => features = Some(row.len()),
            Some(f) if f != row.len() => return Err(bad("row width")),
            _ => {}
        }
        labels.push(label);
        x.extend(row);
    }
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1).max(2);
    Dataset::new(x, labels, features.unwrap_or(1), classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_are_smoothed() {
        let d = Dataset::new(vec![0.0; 4], vec![1, 0], 2, 3).unwrap();
        let t = d.encode_targets(3, 0.3).unwrap();
        assert_eq!(t.get(0, 1), encode_fixed(0.8, FixedCfg::RING).unwrap());
        assert_eq!(t.get(0, 0), encode_fixed(0.1, FixedCfg::RING).unwrap());
        let b = d.one_vs_rest(0).encode_targets(1, 0.0).unwrap();
        assert_eq!(b.data, vec![0, 8192]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("lutmpc-csv-{}", std::process::id()));
        std::fs::write(&dir, "1,0.5,0.25\n0,1,2\n").unwrap();
        let d = load_csv(&dir).unwrap();
        std::fs::remove_file(&dir).ok();
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.x, vec![0.5, 0.25, 1.0, 2.0]);
        assert_eq!(d.features, 2);
    }
}
