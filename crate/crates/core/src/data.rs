//! Datasets: synthetic Gaussian blobs, IDX ingestion, holdout splitting and
//! Dirichlet label-skew partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, rng_from_seed};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index(format!(
                "label {bad} for {num_classes} classes"
            )));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.shape() != first.shape()) {
                return Err(Error::Dimension("inputs differ in shape".into()));
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Tensor::len)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Shuffled split into `(train, holdout)` with `round(fraction * n)` holdout samples.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "holdout fraction {fraction} outside [0, 1)"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut derive_rng(seed, "holdout", &[]));
        let n_hold = (fraction * self.len() as f64).round() as usize;
        let (hold, train) = order.split_at(n_hold);
        let mut hold = hold.to_vec();
        let mut train = train.to_vec();
        hold.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train), self.subset(&hold)))
    }
}

/// Gaussian blobs around deterministic unit-norm class centers.
pub fn generate_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || samples_per_class == 0 || input_dim == 0 {
        return Err(Error::Config(
            "synthetic dataset counts must be positive".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!(
            "spread {spread} must be non-negative"
        )));
    }
    let mut center_rng = derive_rng(seed, "centers", &[]);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..input_dim)
                .map(|_| center_rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / norm).collect()
        })
        .collect();
    let mut noise_rng = derive_rng(seed, "samples", &[]);
    let mut inputs = Vec::with_capacity(num_classes * samples_per_class);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for _ in 0..samples_per_class {
        for (c, center) in centers.iter().enumerate() {
            let x = center
                .iter()
                .map(|m| m + spread * noise_rng.sample::<f64, _>(StandardNormal))
                .collect();
            inputs.push(Tensor::from_vec(x));
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, num_classes)
}

/// Per-client sample indices produced by Dirichlet label-proportion sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub alpha: f64,
    pub num_clients: usize,
    pub assignments: Vec<Vec<usize>>,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// `true` when every index in `0..n` appears exactly once.
    pub fn is_exact_partition(&self, n: usize) -> bool {
        let mut all: Vec<usize> = self.assignments.iter().flatten().copied().collect();
        all.sort_unstable();
        all.len() == n && all.iter().enumerate().all(|(i, &v)| i == v)
    }
}

pub const MAX_PARTITION_ATTEMPTS: u64 = 100;

/// Integer counts summing to `total` that best match `proportions`:
/// floors first, then the largest fractional remainders (lower index on ties).
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|q| q * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn dirichlet_sample(alpha: f64, k: usize, rng: &mut impl Rng) -> Option<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).ok()?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| draws.into_iter().map(|g| g / total).collect())
}

/// Splits `dataset` across `num_clients` with per-class proportions drawn
/// from `Dirichlet(alpha * 1_K)`. Depends only on the labels, `alpha` and
/// `seed`. Draws that leave a client empty are retried with `seed + attempt`.
pub fn dirichlet_partition(
    dataset: &Dataset,
    alpha: f64,
    num_clients: usize,
    seed: u64,
) -> Result<PartitionSpec> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot partition an empty dataset".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "dirichlet alpha {alpha} must be positive"
        )));
    }
    if num_clients < 2 {
        return Err(Error::Config(format!(
            "need at least 2 clients, got {num_clients}"
        )));
    }
    if dataset.len() < num_clients {
        return Err(Error::Config(format!(
            "{} samples cannot cover {num_clients} clients",
            dataset.len()
        )));
    }
    let mut by_class = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    'attempt: for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = rng_from_seed(seed.wrapping_add(attempt));
        let mut assignments = vec![Vec::new(); num_clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let Some(q) = dirichlet_sample(alpha, num_clients, &mut rng) else {
                continue 'attempt;
            };
            let mut rest = members.as_slice();
            for (client, count) in largest_remainder(&q, members.len()).into_iter().enumerate() {
                let (take, tail) = rest.split_at(count);
                assignments[client].extend_from_slice(take);
                rest = tail;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(PartitionSpec {
                alpha,
                num_clients,
                assignments,
                seed,
            });
        }
    }
    Err(Error::Config(format!(
        "no partition without empty clients after {MAX_PARTITION_ATTEMPTS} draws (alpha {alpha}, {num_clients} clients)"
    )))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(file, "truncated header"))
}

/// Parses an IDX image file (`0x00000803`) and label file (`0x00000801`).
/// Pixels are scaled from `0..=255` to `[0, 1]`; each image becomes a
/// `[rows, cols]` tensor.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_name = images_path.display().to_string();
    let label_name = labels_path.display().to_string();
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &image_name, &labels, &label_name)
}

pub fn parse_idx(
    images: &[u8],
    image_name: &str,
    labels: &[u8],
    label_name: &str,
) -> Result<Dataset> {
    let magic = read_be_u32(images, 0, image_name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            image_name,
            format!("bad magic {magic:#010x}"),
        ));
    }
    let count = read_be_u32(images, 4, image_name)? as usize;
    let rows = read_be_u32(images, 8, image_name)? as usize;
    let cols = read_be_u32(images, 12, image_name)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(image_name, "zero image dimension"));
    }
    let pixels = &images[16..];
    if pixels.len() != count * rows * cols {
        return Err(Error::format(
            image_name,
            format!(
                "expected {} pixel bytes, found {}",
                count * rows * cols,
                pixels.len()
            ),
        ));
    }

    let magic = read_be_u32(labels, 0, label_name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            label_name,
            format!("bad magic {magic:#010x}"),
        ));
    }
    let label_count = read_be_u32(labels, 4, label_name)? as usize;
    if label_count != count {
        return Err(Error::format(
            label_name,
            format!("{label_count} labels for {count} images"),
        ));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != count {
        return Err(Error::format(
            label_name,
            format!("expected {count} label bytes, found {}", label_bytes.len()),
        ));
    }
    let num_classes = label_bytes
        .iter()
        .map(|&b| b as usize + 1)
        .max()
        .unwrap_or(1)
        .max(2);
    let inputs = pixels
        .chunks_exact(rows * cols)
        .map(|img| {
            Tensor::new(
                vec![rows, cols],
                img.iter().map(|&p| f64::from(p) / 255.0).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        inputs,
        label_bytes.iter().map(|&b| b as usize).collect(),
        num_classes,
    )
}

/// Shannon entropy (nats) of a class histogram; empty histograms score 0.
pub fn histogram_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Class histogram of each client's shard.
pub fn client_histograms(dataset: &Dataset, spec: &PartitionSpec) -> Vec<Vec<usize>> {
    spec.assignments
        .iter()
        .map(|idx| {
            let mut h = vec![0; dataset.num_classes];
            for &i in idx {
                h[dataset.labels[i]] += 1;
            }
            h
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let a = generate_synthetic(2, 10, 4, 0.3, 11).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.class_counts(), vec![10, 10]);
        assert_eq!(a, generate_synthetic(2, 10, 4, 0.3, 11).unwrap());
        assert!(generate_synthetic(0, 10, 4, 0.3, 11).is_err());
    }

    #[test]
    fn zero_spread_collapses_classes() {
        let d = generate_synthetic(3, 5, 6, 0.0, 2).unwrap();
        for (x, &l) in d.inputs.iter().zip(&d.labels) {
            let first = d.labels.iter().position(|&m| m == l).unwrap();
            assert_eq!(x, &d.inputs[first]);
            let norm = x.sq_norm().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn largest_remainder_sums_exactly() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.1, 0.2, 0.7], 10), vec![1, 2, 7]);
        let c = largest_remainder(&[0.333, 0.333, 0.334], 100);
        assert_eq!(c.iter().sum::<usize>(), 100);
    }

    #[test]
    fn partition_errors() {
        let d = generate_synthetic(2, 1, 3, 0.1, 1).unwrap();
        assert!(matches!(
            dirichlet_partition(&d, 1.0, 3, 0),
            Err(Error::Config(_))
        ));
        assert!(dirichlet_partition(&d, 0.0, 2, 0).is_err());
        assert!(dirichlet_partition(&d, 1.0, 1, 0).is_err());
    }

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IDX_IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_scaling_endpoints() {
        let images = idx_images(2, 2, 2, &[0, 255, 255, 0, 0, 0, 255, 255]);
        let d = parse_idx(&images, "img", &idx_labels(&[1, 0]), "lbl").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.inputs[0].shape(), &[2, 2]);
        assert_eq!(d.inputs[0].data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(d.labels, vec![1, 0]);
    }

    #[test]
    fn idx_validation() {
        let images = idx_images(2, 2, 2, &[0; 8]);
        let err = parse_idx(&images, "img", &idx_labels(&[1]), "lbl").unwrap_err();
        assert!(matches!(&err, Error::Format { file, .. } if file == "lbl"));
        let err = parse_idx(&images[..10], "img", &idx_labels(&[1, 0]), "lbl").unwrap_err();
        assert!(matches!(&err, Error::Format { file, .. } if file == "img"));
        let mut bad = images.clone();
        bad[3] = 0x01;
        assert!(parse_idx(&bad, "img", &idx_labels(&[1, 0]), "lbl").is_err());
        assert!(parse_idx(&images[..20], "img", &idx_labels(&[1, 0]), "lbl").is_err());
    }

    #[test]
    fn entropy_of_histograms() {
        assert_eq!(histogram_entropy(&[5, 0, 0]), 0.0);
        assert!((histogram_entropy(&[1, 1]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(histogram_entropy(&[]), 0.0);
    }
}
