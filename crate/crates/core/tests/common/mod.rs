#![allow(dead_code)]

use lutmpc_core::ml_train::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Gaussian-ish blobs, one per class, features in roughly [-1, 2].
pub fn blobs(n: usize, features: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..features).map(|_| rng.gen_range(-0.5..1.5)).collect())
        .collect();
    let mut x = Vec::with_capacity(n * features);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.gen_range(0..classes);
        for center in &centers[c] {
            let noise: f64 = (0..3).map(|_| rng.gen_range(-0.25..0.25)).sum();
            x.push(center + noise);
        }
        labels.push(c as u32);
    }
    Dataset::new(x, labels, features, classes).unwrap()
}

pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// The bundled 10,000-image MNIST set.
pub fn mnist10k() -> Dataset {
    let d = data_dir();
    lutmpc_core::ml_train::load_mnist_idx(
        &d.join("mnist10k-images-idx3-ubyte.gz"),
        &d.join("mnist10k-labels-idx1-ubyte.gz"),
    )
    .unwrap()
}

/// Digits 0 and 1 only: the first 1,000 for training, the rest for testing.
pub fn mnist01() -> (Dataset, Dataset) {
    let ds = mnist10k();
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for i in (0..ds.len()).filter(|&i| ds.labels[i] < 2) {
        x.extend_from_slice(ds.row(i));
        labels.push(ds.labels[i]);
    }
    let all = Dataset::new(x, labels, ds.features, 2).unwrap();
    (all.slice(0, 1000), all.slice(1000, all.len()))
}

/// Runs both parties over a loopback link.
pub fn pair<A: Send, B: Send>(
    f0: impl FnOnce(&mut lutmpc_core::net::Session) -> A + Send,
    f1: impl FnOnce(&mut lutmpc_core::net::Session) -> B + Send,
) -> (A, B) {
    let (mut s0, mut s1) = lutmpc_core::net::loopback_pair(7);
    std::thread::scope(|sc| {
        let h0 = sc.spawn(move || f0(&mut s0));
        let h1 = sc.spawn(move || f1(&mut s1));
        (h0.join().unwrap(), h1.join().unwrap())
    })
}
