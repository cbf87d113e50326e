//! Datasets, the IDX loader and non-IID client partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::models::Batch;
use crate::scalar::Scalar;
use crate::seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `n x dim` row-major features with labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub features: Vec<T>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Vec<T>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Invalid("dataset must hold at least one sample".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Dim {
                expected: labels.len() * dim,
                found: features.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// One-hot batch of the given rows, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::from_labels(features, &labels, self.classes)
    }

    pub fn all(&self) -> Result<Batch<T>> {
        Batch::from_labels(self.features.clone(), &self.labels, self.classes)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset::new(features, indices.iter().map(|&i| self.labels[i]).collect(), self.dim, self.classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Splits off a seeded random `fraction` of rows as a held-out set.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let n = self.len();
        let held = ((n as f64) * fraction).round() as usize;
        if held == 0 || held >= n {
            return Err(Error::Invalid(format!(
                "split fraction {fraction} leaves an empty side for {n} samples"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed));
        let (test, train) = order.split_at(held);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

/// Class mean `c`: the simplex vertex `e_(c mod dim)` scaled by `1 + c / dim`.
fn class_mean(c: usize, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    m[c % dim] = 1.0 + (c / dim) as f64;
    m
}

/// Gaussian blobs, `per_class` samples around each class mean.
///
/// Means sit on the vertices of the unit simplex (wrapping with a larger
/// scale when `classes > dim`), so they do not depend on the seed: two calls
/// with different seeds draw from the same distribution.
pub fn gen_synthetic<T: Scalar>(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset<T>> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::Invalid(format!(
            "synthetic data needs classes >= 2, dim >= 1, per_class >= 1 (got {classes}, {dim}, {per_class})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Invalid(format!("spread must be finite and >= 0, got {spread}")));
    }
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mean = class_mean(c, dim);
        for _ in 0..per_class {
            for m in &mean {
                let z: f64 = noise.sample(&mut rng);
                features.push(T::lit(m + spread * z));
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, dim, classes)
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends before byte {}", at + 4),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses a big-endian IDX image file and its label file.
///
/// Pixels are scaled to `[0, 1]` by dividing by 255. The class count is the
/// largest label plus one.
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;
    parse_idx(&img, images, &lab, labels)
}

pub fn parse_idx<T: Scalar>(img: &[u8], images: &Path, lab: &[u8], labels: &Path) -> Result<Dataset<T>> {
    check_magic(img, IDX_IMAGES_MAGIC, images)?;
    let n = read_u32(img, 4, images)? as usize;
    let rows = read_u32(img, 8, images)? as usize;
    let cols = read_u32(img, 12, images)? as usize;
    let dim = rows * cols;
    let body = &img[16..];
    if body.len() < n * dim {
        return Err(Error::Truncated {
            path: images.to_path_buf(),
            detail: format!("expected {} pixel bytes, found {}", n * dim, body.len()),
        });
    }

    check_magic(lab, IDX_LABELS_MAGIC, labels)?;
    let m = read_u32(lab, 4, labels)? as usize;
    let lbody = &lab[8..];
    if lbody.len() < m {
        return Err(Error::Truncated {
            path: labels.to_path_buf(),
            detail: format!("expected {m} label bytes, found {}", lbody.len()),
        });
    }
    if m != n {
        return Err(Error::CountMismatch { images: n, labels: m });
    }

    let scale = T::lit(255.0);
    let features = body[..n * dim].iter().map(|&b| T::lit(f64::from(b)) / scale).collect();
    let labels: Vec<usize> = lbody[..m].iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(features, labels, dim, classes.max(2))
}

/// One client's slice of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub indices: Vec<usize>,
    /// Aggregation weight `|shard| / n`.
    pub weight: f64,
}

/// Per-class Dirichlet split across `clients`.
///
/// For every class the shuffled sample indices are cut at the cumulative
/// proportions of a `Dirichlet(alpha, ..., alpha)` draw. Any shard left
/// empty then receives one sample from the currently largest shard.
pub fn dirichlet_partition<T: Scalar>(data: &Dataset<T>, clients: usize, alpha: f64, seed: u64) -> Result<Vec<ClientShard>> {
    if clients == 0 {
        return Err(Error::Invalid("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Invalid(format!("alpha must be positive and finite, got {alpha}")));
    }
    if data.len() < clients {
        return Err(Error::Invalid(format!(
            "{} samples cannot fill {clients} non-empty shards",
            data.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for mut idx in by_class {
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let mut props: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            // every draw underflowed: hand the class to one client
            let k = rand::Rng::random_range(&mut rng, 0..clients);
            props.iter_mut().enumerate().for_each(|(j, p)| *p = if j == k { 1.0 } else { 0.0 });
        }
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (j, p) in props.iter().enumerate() {
            cum += p;
            let end = if j + 1 == clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            shards[j].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }

    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..clients)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("clients >= 1");
        let moved = shards[largest].pop().expect("largest shard is non-empty");
        shards[empty].push(moved);
    }

    let n = data.len() as f64;
    Ok(shards
        .into_iter()
        .map(|mut indices| {
            indices.sort_unstable();
            let weight = indices.len() as f64 / n;
            ClientShard { indices, weight }
        })
        .collect())
}

/// Per-client label histograms, `clients x classes`.
pub fn class_histograms<T: Scalar>(data: &Dataset<T>, shards: &[ClientShard]) -> Vec<Vec<usize>> {
    shards
        .iter()
        .map(|s| {
            let mut h = vec![0; data.classes];
            for &i in &s.indices {
                h[data.labels[i]] += 1;
            }
            h
        })
        .collect()
}
