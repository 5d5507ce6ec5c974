//! Synthetic synchronization instances with controlled noise, outliers and
//! missing data.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::so3::{random_perturbation, random_rotation_euler, random_rotation_uniform, RotationMatrix};
use crate::sync::{RelativeMeasurement, RelativeMeasurementSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
}

/// Distribution of the ground-truth absolute rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundTruthMode {
    Euler,
    Haar,
}

impl std::str::FromStr for GroundTruthMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euler" => Ok(Self::Euler),
            "haar" => Ok(Self::Haar),
            other => Err(format!("unknown mode '{other}' (expected euler or haar)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    /// Expected fraction of the `n(n-1)/2` pairs that are not measured.
    pub missing_fraction: f64,
    /// Fraction of the measured edges replaced by Haar-random rotations.
    pub outlier_fraction: f64,
    pub noise_min_deg: f64,
    pub noise_max_deg: f64,
    pub mode: GroundTruthMode,
    pub seed: u64,
}

impl SynthConfig {
    /// Complete, exact data over `n` Euler-sampled frames.
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            missing_fraction: 0.0,
            outlier_fraction: 0.0,
            noise_min_deg: 0.0,
            noise_max_deg: 0.0,
            mode: GroundTruthMode::Euler,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.n == 0 {
            return fail("n must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return fail(format!("missing fraction {} outside [0, 1)", self.missing_fraction));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return fail(format!("outlier fraction {} outside [0, 1]", self.outlier_fraction));
        }
        if !(0.0 <= self.noise_min_deg && self.noise_min_deg <= self.noise_max_deg && self.noise_max_deg <= 180.0) {
            return fail(format!(
                "noise range [{}, {}] must satisfy 0 <= min <= max <= 180",
                self.noise_min_deg, self.noise_max_deg
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub rotations: Vec<RotationMatrix>,
    /// Corrupted edges `(i, j)` with `i < j`, sorted.
    pub outlier_edges: Vec<(usize, usize)>,
}

/// Samples a uniformly random labelled tree on `n` nodes by decoding a
/// random Prufer sequence. Edges are returned as `(min, max)` pairs.
pub fn spanning_tree_uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if n < 2 {
        return Vec::new();
    }
    let code: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
    let mut degree = vec![1usize; n];
    for &c in &code {
        degree[c] += 1;
    }
    let mut leaves: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&v| degree[v] == 1).map(Reverse).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for &c in &code {
        let Reverse(leaf) = leaves.pop().expect("a tree always has a leaf");
        edges.push((leaf.min(c), leaf.max(c)));
        degree[c] -= 1;
        if degree[c] == 1 {
            leaves.push(Reverse(c));
        }
    }
    let Reverse(a) = leaves.pop().expect("two nodes remain");
    let Reverse(b) = leaves.pop().expect("two nodes remain");
    edges.push((a.min(b), a.max(b)));
    edges
}

/// Probability of keeping a non-tree pair so that the expected number of
/// edges is `(1 - missing) * n(n-1)/2`.
pub fn retention_probability(n: usize, missing_fraction: f64) -> f64 {
    let pairs = (n * n.saturating_sub(1) / 2) as f64;
    let tree = n.saturating_sub(1) as f64;
    if pairs <= tree {
        return 0.0;
    }
    (((1.0 - missing_fraction) * pairs - tree) / (pairs - tree)).clamp(0.0, 1.0)
}

/// Generates measurements and ground truth for `config`; deterministic given
/// the seed.
pub fn generate(config: &SynthConfig) -> Result<(RelativeMeasurementSet, GroundTruth), SynthError> {
    config.validate()?;
    let n = config.n;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let rotations: Vec<RotationMatrix> = (0..n)
        .map(|_| match config.mode {
            GroundTruthMode::Euler => random_rotation_euler(&mut rng),
            GroundTruthMode::Haar => random_rotation_uniform(&mut rng),
        })
        .collect();

    let tree: HashSet<(usize, usize)> = spanning_tree_uniform(n, &mut rng).into_iter().collect();
    let keep = retention_probability(n, config.missing_fraction);
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            // draw for every pair so the stream does not depend on the tree
            let kept = rng.random::<f64>() < keep;
            if kept || tree.contains(&(i, j)) {
                pairs.push((i, j));
            }
        }
    }

    let outlier_count = (config.outlier_fraction * pairs.len() as f64).floor() as usize;
    let mut is_outlier = vec![false; pairs.len()];
    for k in sample(&mut rng, pairs.len(), outlier_count.min(pairs.len())) {
        is_outlier[k] = true;
    }

    let mut edges = Vec::with_capacity(pairs.len());
    let mut outlier_edges = Vec::with_capacity(outlier_count);
    for (&(i, j), &bad) in pairs.iter().zip(&is_outlier) {
        let rotation = if bad {
            outlier_edges.push((i, j));
            random_rotation_uniform(&mut rng)
        } else {
            let noise = random_perturbation(&mut rng, config.noise_min_deg, config.noise_max_deg)
                .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
            (rotations[i] * rotations[j].transpose()) * noise
        };
        edges.push(RelativeMeasurement { i, j, rotation });
    }

    let set = RelativeMeasurementSet::new(n, edges).expect("generated edges satisfy i < j < n");
    Ok((set, GroundTruth { rotations, outlier_edges }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::geodesic_distance;
    use crate::sync::is_connected;

    #[test]
    fn tiny_trees() {
        let mut g = ChaCha8Rng::seed_from_u64(0);
        assert!(spanning_tree_uniform(1, &mut g).is_empty());
        assert_eq!(spanning_tree_uniform(2, &mut g), vec![(0, 1)]);
    }

    #[test]
    fn trees_are_spanning() {
        let mut g = ChaCha8Rng::seed_from_u64(1);
        for n in 2..40 {
            let t = spanning_tree_uniform(n, &mut g);
            assert_eq!(t.len(), n - 1);
            assert!(is_connected(n, &t));
        }
    }

    #[test]
    fn exact_instance_is_consistent() {
        let (set, gt) = generate(&SynthConfig::new(8, 3)).unwrap();
        assert_eq!(set.len(), 28);
        assert!(gt.outlier_edges.is_empty());
        for e in set.edges() {
            let expected = gt.rotations[e.i] * gt.rotations[e.j].transpose();
            assert_eq!(e.rotation, expected);
        }
    }

    #[test]
    fn outlier_count_is_exact() {
        let cfg = SynthConfig { outlier_fraction: 0.3, missing_fraction: 0.4, ..SynthConfig::new(30, 4) };
        let (set, gt) = generate(&cfg).unwrap();
        assert_eq!(gt.outlier_edges.len(), (0.3 * set.len() as f64).floor() as usize);
        let edges: HashSet<_> = set.edges().iter().map(|e| (e.i, e.j)).collect();
        assert!(gt.outlier_edges.iter().all(|e| edges.contains(e)));
    }

    #[test]
    fn noise_stays_in_range() {
        let cfg = SynthConfig { noise_min_deg: 1.0, noise_max_deg: 10.0, missing_fraction: 0.5, ..SynthConfig::new(25, 5) };
        let (set, gt) = generate(&cfg).unwrap();
        for e in set.edges() {
            let clean = gt.rotations[e.i] * gt.rotations[e.j].transpose();
            let d = geodesic_distance(&clean, &e.rotation);
            assert!((1.0 - 1e-9..=10.0 + 1e-9).contains(&d), "{d}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig { outlier_fraction: 0.2, missing_fraction: 0.5, noise_max_deg: 5.0, ..SynthConfig::new(20, 6) };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SynthConfig::new(5, 0);
        for bad in [
            SynthConfig { n: 0, ..base.clone() },
            SynthConfig { missing_fraction: 1.0, ..base.clone() },
            SynthConfig { outlier_fraction: -0.1, ..base.clone() },
            SynthConfig { noise_min_deg: 3.0, noise_max_deg: 2.0, ..base.clone() },
            SynthConfig { noise_max_deg: f64::NAN, ..base.clone() },
        ] {
            assert!(matches!(generate(&bad), Err(SynthError::InvalidConfig(_))));
        }
    }

    #[test]
    fn retention_matches_density() {
        assert_eq!(retention_probability(2, 0.5), 0.0);
        let p = retention_probability(100, 0.5);
        let expected = 99.0 + p * (4950.0 - 99.0);
        assert!((expected - 2475.0).abs() < 1e-9);
    }
}
