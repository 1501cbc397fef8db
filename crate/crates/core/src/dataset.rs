//! Sample pools and how they are carved up between devices.
//!
//! A [`DataPool`] is a labeled corpus with a per-label index. Training pools
//! are split by [`partition`] into a bootstrap slice and per-device local
//! sets with prescribed label distributions; held-out pools only ever feed
//! [`build_goal_test_set`].

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::labels::{LabelDistribution, DEFAULT_NUM_LABELS};
use crate::nn::LabeledBatch;
use crate::rng::rng_from_seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct DataPool {
    samples: LabeledBatch,
    num_labels: usize,
    index_by_label: Vec<Vec<usize>>,
}

impl DataPool {
    pub fn new(samples: LabeledBatch, num_labels: usize) -> Result<Self> {
        let mut index_by_label = vec![Vec::new(); num_labels];
        for (i, &l) in samples.labels().iter().enumerate() {
            if l >= num_labels {
                return Err(Error::param(format!(
                    "label {l} outside label space of {num_labels}"
                )));
            }
            index_by_label[l].push(i);
        }
        if samples.inputs().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("features must be normalized to [0, 1]"));
        }
        Ok(DataPool {
            samples,
            num_labels,
            index_by_label,
        })
    }

    pub fn samples(&self) -> &LabeledBatch {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn input_dim(&self) -> usize {
        self.samples.input_dim()
    }

    pub fn indices_of(&self, label: usize) -> &[usize] {
        &self.index_by_label[label]
    }

    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        self.samples.select(indices)
    }

    pub fn subset(&self, indices: &[usize]) -> DataPool {
        DataPool::new(self.batch(indices), self.num_labels)
            .expect("subset of a valid pool is valid")
    }

    /// Moves `held_out_per_label` random samples of each label into a second pool.
    pub fn split_per_label(
        &self,
        held_out_per_label: usize,
        seed: u64,
    ) -> Result<(DataPool, DataPool)> {
        let mut rng = rng_from_seed(seed);
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for (label, idx) in self.index_by_label.iter().enumerate() {
            if idx.len() < held_out_per_label {
                return Err(Error::Capacity {
                    label,
                    requested: held_out_per_label,
                    available: idx.len(),
                });
            }
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            held.extend_from_slice(&idx[..held_out_per_label]);
            keep.extend_from_slice(&idx[held_out_per_label..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        Ok((self.subset(&keep), self.subset(&held)))
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            message: "truncated header".into(),
        })
}

/// Decodes an IDX image file into `(count, rows * cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let payload = &bytes[16..];
    if payload.len() != count * dim {
        return Err(Error::Format {
            offset: 16 + payload.len().min(count * dim) as u64,
            message: format!(
                "expected {} pixel bytes, found {}",
                count * dim,
                payload.len()
            ),
        });
    }
    Ok((
        count,
        dim,
        payload.iter().map(|&b| b as f32 / 255.0).collect(),
    ))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Format {
            offset: 8 + payload.len().min(count) as u64,
            message: format!("expected {count} label bytes, found {}", payload.len()),
        });
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DataPool> {
    let (count, dim, pixels) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::Format {
            offset: 4,
            message: format!("{count} images but {} labels", labels.len()),
        });
    }
    if let Some(pos) = labels.iter().position(|l| *l >= DEFAULT_NUM_LABELS) {
        return Err(Error::Format {
            offset: 8 + pos as u64,
            message: format!("label {} outside label space", labels[pos]),
        });
    }
    DataPool::new(LabeledBatch::new(dim, pixels, labels)?, DEFAULT_NUM_LABELS)
}

/// Encodes a pool as `(images, labels)` IDX byte streams of `rows x cols` images.
pub fn encode_idx(pool: &DataPool, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    Error::check_len(rows * cols, pool.input_dim())?;
    let n = pool.len() as u32;
    let mut images = Vec::with_capacity(16 + pool.samples.inputs().len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    images.extend(
        pool.samples
            .inputs()
            .iter()
            .map(|v| (v * 255.0).round() as u8),
    );

    let mut labels = Vec::with_capacity(8 + pool.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    for &l in pool.samples.labels() {
        let byte = u8::try_from(l)
            .map_err(|_| Error::param(format!("label {l} does not fit in a byte")))?;
        labels.push(byte);
    }
    Ok((images, labels))
}

/// Gaussian blobs around seeded label centers, clamped to `[0, 1]`.
///
/// Centers are drawn first, so pools that share a seed share centers
/// regardless of `per_label`.
pub fn synth_blobs(
    num_labels: usize,
    per_label: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<DataPool> {
    if num_labels == 0 || per_label == 0 || input_dim == 0 {
        return Err(Error::param("synthetic blob counts must be at least 1"));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::param(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let centers: Vec<Vec<f64>> = (0..num_labels)
        .map(|_| (0..input_dim).map(|_| rng.random_range(0.1..0.9)).collect())
        .collect();
    let noise = Normal::new(0.0, spread).map_err(|e| Error::param(e.to_string()))?;
    let mut inputs = Vec::with_capacity(num_labels * per_label * input_dim);
    let mut labels = Vec::with_capacity(num_labels * per_label);
    for _ in 0..per_label {
        for (label, center) in centers.iter().enumerate() {
            for c in center {
                let v = if spread == 0.0 {
                    *c
                } else {
                    c + noise.sample(&mut rng)
                };
                inputs.push(v.clamp(0.0, 1.0) as f32);
            }
            labels.push(label);
        }
    }
    DataPool::new(LabeledBatch::new(input_dim, inputs, labels)?, num_labels)
}

/// Splits `size` into per-label counts proportional to `dist` that sum exactly
/// to `size` (largest remainder, ties to the lower label).
pub fn largest_remainder_counts(dist: &LabelDistribution, size: usize) -> Vec<usize> {
    let raw: Vec<f64> = dist.probs().iter().map(|p| p * size as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).filter(|&l| dist.prob(l) > 0.0).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &l in order.iter().cycle().take(size.saturating_sub(assigned)) {
        counts[l] += 1;
    }
    counts
}

/// Disjoint bootstrap, per-device and leftover index lists over one pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub bootstrap: Vec<usize>,
    pub devices: Vec<Vec<usize>>,
    pub remainder: Vec<usize>,
}

/// Requested local set for one device.
#[derive(Debug, Clone)]
pub struct DeviceSpec {
    pub distribution: LabelDistribution,
    pub size: usize,
}

/// Carves `pool` into a label-uniform bootstrap set and one local set per spec.
pub fn partition(
    pool: &DataPool,
    bootstrap_fraction: f64,
    specs: &[DeviceSpec],
    seed: u64,
) -> Result<Partition> {
    if !(0.0..=1.0).contains(&bootstrap_fraction) {
        return Err(Error::param(format!(
            "bootstrap fraction {bootstrap_fraction} outside [0, 1]"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut queues: Vec<Vec<usize>> = pool
        .index_by_label
        .iter()
        .map(|idx| {
            let mut q = idx.clone();
            q.shuffle(&mut rng);
            // Popping from the back hands out the shuffled order front to back.
            q.reverse();
            q
        })
        .collect();

    let take = |counts: &[usize], queues: &mut Vec<Vec<usize>>| -> Result<Vec<usize>> {
        for (label, (&want, q)) in counts.iter().zip(queues.iter()).enumerate() {
            if want > q.len() {
                return Err(Error::Capacity {
                    label,
                    requested: want,
                    available: q.len(),
                });
            }
        }
        let mut out = Vec::with_capacity(counts.iter().sum());
        for (&want, q) in counts.iter().zip(queues.iter_mut()) {
            for _ in 0..want {
                out.push(q.pop().unwrap());
            }
        }
        Ok(out)
    };

    let uniform = LabelDistribution::from_counts(&vec![1.0; pool.num_labels])?;
    let bootstrap_size = (bootstrap_fraction * pool.len() as f64).round() as usize;
    let bootstrap = take(
        &largest_remainder_counts(&uniform, bootstrap_size),
        &mut queues,
    )?;

    let mut devices = Vec::with_capacity(specs.len());
    for (index, spec) in specs.iter().enumerate() {
        let local =
            Error::check_len(pool.num_labels, spec.distribution.num_labels()).and_then(|_| {
                take(
                    &largest_remainder_counts(&spec.distribution, spec.size),
                    &mut queues,
                )
            });
        devices.push(local.map_err(|e| Error::Device {
            index,
            source: Box::new(e),
        })?);
    }

    let mut remainder: Vec<usize> = queues.into_iter().flatten().collect();
    remainder.sort_unstable();
    Ok(Partition {
        bootstrap,
        devices,
        remainder,
    })
}

/// Held-out evaluation batch whose label mix follows a goal distribution.
#[derive(Debug, Clone)]
pub struct GoalTestSet {
    pub indices: Vec<usize>,
    pub batch: LabeledBatch,
}

pub fn build_goal_test_set(
    test_pool: &DataPool,
    goal: &LabelDistribution,
    size: usize,
    seed: u64,
) -> Result<GoalTestSet> {
    if size == 0 {
        return Err(Error::param("goal test set size must be at least 1"));
    }
    Error::check_len(test_pool.num_labels, goal.num_labels())?;
    let counts = largest_remainder_counts(goal, size);
    let mut rng = rng_from_seed(seed);
    let mut indices = Vec::with_capacity(size);
    for (label, &want) in counts.iter().enumerate() {
        let available = test_pool.indices_of(label);
        if want > available.len() {
            return Err(Error::Capacity {
                label,
                requested: want,
                available: available.len(),
            });
        }
        indices.extend(available.choose_multiple(&mut rng, want).copied());
    }
    Ok(GoalTestSet {
        batch: test_pool.batch(&indices),
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn uni(labels: &[usize]) -> LabelDistribution {
        LabelDistribution::uniform_over(labels, 10).unwrap()
    }

    fn label_counts(batch: &LabeledBatch, n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        for &l in batch.labels() {
            c[l] += 1;
        }
        c
    }

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        for w in [IDX_IMAGES_MAGIC, 2, 1, 2] {
            images.extend_from_slice(&w.to_be_bytes());
        }
        images.extend_from_slice(&[0, 255, 51, 102]);
        let mut labels = Vec::new();
        for w in [IDX_LABELS_MAGIC, 2] {
            labels.extend_from_slice(&w.to_be_bytes());
        }
        labels.extend_from_slice(&[7, 3]);
        (images, labels)
    }

    #[test]
    fn idx_fixture_decodes_exactly() {
        let (images, labels) = idx_fixture();
        let (count, dim, px) = parse_idx_images(&images).unwrap();
        assert_eq!((count, dim), (2, 2));
        assert_eq!(px, vec![0.0, 1.0, 51.0 / 255.0, 102.0 / 255.0]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 3]);
    }

    #[test]
    fn idx_wrong_magic_and_truncation() {
        let (images, labels) = idx_fixture();
        assert!(matches!(
            parse_idx_labels(&images),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            parse_idx_images(&labels),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            parse_idx_images(&images[..images.len() - 1]),
            Err(Error::Format { offset: 19, .. })
        ));
        assert!(matches!(
            parse_idx_labels(&labels[..6]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn idx_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_fixture();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        fs::write(&ip, &images).unwrap();
        fs::write(&lp, &labels).unwrap();
        let pool = load_idx(&ip, &lp).unwrap();
        assert_eq!(pool.len(), 2);
        let (i2, l2) = encode_idx(&pool, 1, 2).unwrap();
        assert_eq!(i2, images);
        assert_eq!(l2, labels);

        // Count mismatch between the two files.
        let mut short = Vec::new();
        for w in [IDX_LABELS_MAGIC, 1] {
            short.extend_from_slice(&w.to_be_bytes());
        }
        short.push(1);
        fs::write(&lp, &short).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = synth_blobs(10, 50, 16, 0.05, 7).unwrap();
        let b = synth_blobs(10, 50, 16, 0.05, 7).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert_eq!(a.len(), 500);
        assert!(a.indices_of(3).len() == 50);
    }

    #[test]
    fn zero_spread_blobs_are_constant_per_label() {
        let pool = synth_blobs(3, 5, 4, 0.0, 1).unwrap();
        for label in 0..3 {
            let idx = pool.indices_of(label);
            let first = pool.samples().row(idx[0]).to_vec();
            assert!(idx
                .iter()
                .all(|&i| pool.samples().row(i) == first.as_slice()));
        }
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder_counts(&uni(&[0, 1, 2]), 80), {
            let mut v = vec![0; 10];
            v[0] = 27;
            v[1] = 27;
            v[2] = 26;
            v
        });
        assert_eq!(largest_remainder_counts(&uni(&[0, 1]), 80)[..2], [40, 40]);
    }

    #[test]
    fn device_sets_match_requested_mix() {
        let pool = synth_blobs(10, 200, 4, 0.1, 3).unwrap();
        let specs = vec![DeviceSpec {
            distribution: uni(&[0, 1]),
            size: 80,
        }];
        let p = partition(&pool, 0.1, &specs, 11).unwrap();
        assert_eq!(p.bootstrap.len(), 200);
        let counts = label_counts(&pool.batch(&p.devices[0]), 10);
        assert_eq!(&counts[..2], &[40, 40]);
        assert_eq!(counts.iter().sum::<usize>(), 80);
        assert_eq!(p, partition(&pool, 0.1, &specs, 11).unwrap());
    }

    #[test]
    fn bootstrap_fraction_of_mnist_sized_pool() {
        let pool = synth_blobs(10, 6000, 1, 0.1, 3).unwrap();
        let p = partition(&pool, 0.1, &[], 1).unwrap();
        assert_eq!(p.bootstrap.len(), 6000);
        let counts = label_counts(&pool.batch(&p.bootstrap), 10);
        assert!(counts.iter().all(|&c| c == 600));
    }

    #[test]
    fn exhausted_label_names_the_label() {
        let pool = synth_blobs(10, 10, 2, 0.1, 3).unwrap();
        let specs = vec![DeviceSpec {
            distribution: uni(&[4]),
            size: 11,
        }];
        match partition(&pool, 0.0, &specs, 1) {
            Err(Error::Device { index: 0, source }) => {
                assert!(matches!(
                    *source,
                    Error::Capacity {
                        label: 4,
                        requested: 11,
                        available: 10
                    }
                ))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn goal_test_set_examples() {
        let pool = synth_blobs(10, 120, 2, 0.1, 4).unwrap();
        let set = build_goal_test_set(&pool, &uni(&[0, 1, 2, 3, 4]), 500, 9).unwrap();
        let counts = label_counts(&set.batch, 10);
        assert!(counts[..5].iter().all(|&c| c == 100));
        assert_eq!(counts[5..].iter().sum::<usize>(), 0);

        let point =
            build_goal_test_set(&pool, &LabelDistribution::point_mass(3, 10).unwrap(), 30, 9)
                .unwrap();
        assert!(point.batch.labels().iter().all(|&l| l == 3));
        assert!(build_goal_test_set(&pool, &uni(&[1]), 0, 9).is_err());
        assert!(matches!(
            build_goal_test_set(&pool, &uni(&[1]), 121, 9),
            Err(Error::Capacity { label: 1, .. })
        ));
    }

    #[test]
    fn holdout_split_is_disjoint() {
        let pool = synth_blobs(4, 30, 2, 0.1, 4).unwrap();
        let (train, test) = pool.split_per_label(10, 1).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 40);
        assert!((0..4).all(|l| test.indices_of(l).len() == 10));
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_faithful(
            seed in any::<u64>(),
            fraction in 0.0..0.3f64,
            specs in prop::collection::vec((prop::collection::vec(0.0..1.0f64, 10), 1usize..60), 1..6),
        ) {
            let pool = synth_blobs(10, 400, 2, 0.1, 5).unwrap();
            let specs: Vec<DeviceSpec> = specs
                .into_iter()
                .filter(|(c, _)| c.iter().sum::<f64>() > 0.0)
                .map(|(c, size)| DeviceSpec { distribution: LabelDistribution::from_counts(&c).unwrap(), size })
                .collect();
            let p = partition(&pool, fraction, &specs, seed).unwrap();
            let mut seen = HashSet::new();
            for i in p.bootstrap.iter().chain(p.devices.iter().flatten()).chain(&p.remainder) {
                prop_assert!(seen.insert(*i));
            }
            prop_assert_eq!(seen.len(), pool.len());
            for (spec, idx) in specs.iter().zip(&p.devices) {
                let counts = label_counts(&pool.batch(idx), 10);
                for (l, c) in counts.iter().enumerate() {
                    let target = spec.distribution.prob(l) * spec.size as f64;
                    prop_assert!((*c as f64 - target).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn idx_roundtrip(bytes in prop::collection::vec(any::<u8>(), 12), labels in prop::collection::vec(0usize..10, 3)) {
            let inputs = bytes.iter().map(|&b| b as f32 / 255.0).collect();
            let pool = DataPool::new(LabeledBatch::new(4, inputs, labels).unwrap(), 10).unwrap();
            let (i, l) = encode_idx(&pool, 2, 2).unwrap();
            let (_, _, px) = parse_idx_images(&i).unwrap();
            prop_assert_eq!(px.as_slice(), pool.samples().inputs());
            let decoded = parse_idx_labels(&l).unwrap();
            prop_assert_eq!(decoded.as_slice(), pool.samples().labels());
        }
    }
}
