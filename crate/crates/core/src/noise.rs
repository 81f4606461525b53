//! Finite representations of the Brownian filtration: the full binary tree of
//! `±sqrt(dt)` increments, a recombining binomial lattice for Markov data,
//! adapted fields indexed by their nodes, and a Gaussian path sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::Result;
use crate::error::{Error, MAX_TREE_DEPTH};

/// A discrete filtration with two equally likely successors per node.
pub trait Filtration: Sync {
    /// Number of time steps `N`.
    fn steps(&self) -> usize;
    fn dt(&self) -> f64;
    fn horizon(&self) -> f64 {
        self.dt() * self.steps() as f64
    }
    fn nodes_at(&self, level: usize) -> usize;
    /// Successor reached by the increment `+sqrt(dt)`.
    fn up_child(&self, level: usize, node: usize) -> usize;
    /// Successor reached by the increment `-sqrt(dt)`.
    fn down_child(&self, level: usize, node: usize) -> usize;
    /// Probability of reaching `node` at `level`.
    fn probability(&self, level: usize, node: usize) -> f64;
    /// Value of the Brownian path `W(t_level)` at `node`.
    fn brownian(&self, level: usize, node: usize) -> f64;
    /// Whether every node carries the full path history (a tree) rather than
    /// only the current position (a lattice).
    fn is_path_resolving(&self) -> bool;

    fn time(&self, level: usize) -> f64 {
        self.dt() * level as f64
    }
    fn sqrt_dt(&self) -> f64 {
        self.dt().sqrt()
    }
}

/// Full binary tree: node `j` at level `n` encodes the first `n` increments,
/// most recent in the lowest bit (`0` = up, `1` = down).
#[derive(Debug, Clone, Copy)]
pub struct NoiseTree {
    steps: usize,
    dt: f64,
}

impl NoiseTree {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps > MAX_TREE_DEPTH {
            return Err(Error::TreeTooDeep(steps));
        }
        if steps == 0 || !(horizon > 0.0) {
            return Err(Error::Parameter(
                "tree needs a positive horizon and at least one step".into(),
            ));
        }
        Ok(NoiseTree {
            steps,
            dt: horizon / steps as f64,
        })
    }

    /// Increment `dW_k` (for `k < level`) along the path to `node`.
    pub fn increment(&self, level: usize, node: usize, k: usize) -> f64 {
        debug_assert!(k < level);
        if (node >> (level - 1 - k)) & 1 == 0 {
            self.dt.sqrt()
        } else {
            -self.dt.sqrt()
        }
    }
}

impl Filtration for NoiseTree {
    fn steps(&self) -> usize {
        self.steps
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn nodes_at(&self, level: usize) -> usize {
        1 << level
    }
    fn up_child(&self, _level: usize, node: usize) -> usize {
        2 * node
    }
    fn down_child(&self, _level: usize, node: usize) -> usize {
        2 * node + 1
    }
    fn probability(&self, level: usize, _node: usize) -> f64 {
        0.5f64.powi(level as i32)
    }
    fn brownian(&self, level: usize, node: usize) -> f64 {
        let downs = (node as u64).count_ones() as f64;
        (level as f64 - 2.0 * downs) * self.dt.sqrt()
    }
    fn is_path_resolving(&self) -> bool {
        true
    }
}

/// Recombining lattice: node `j` at level `n` means `j` down moves so far,
/// `W(t_n) = (n - 2j) sqrt(dt)`. Exact for data depending on `(t, W(t))` only.
#[derive(Debug, Clone)]
pub struct RecombiningLattice {
    steps: usize,
    dt: f64,
    /// `log C(n, j)` table, row `n`.
    log_binom: Vec<Vec<f64>>,
}

impl RecombiningLattice {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) {
            return Err(Error::Parameter(
                "lattice needs a positive horizon and at least one step".into(),
            ));
        }
        let mut log_fact = vec![0.0f64; steps + 1];
        for k in 1..=steps {
            log_fact[k] = log_fact[k - 1] + (k as f64).ln();
        }
        let log_binom = (0..=steps)
            .map(|n| {
                (0..=n)
                    .map(|j| log_fact[n] - log_fact[j] - log_fact[n - j])
                    .collect()
            })
            .collect();
        Ok(RecombiningLattice {
            steps,
            dt: horizon / steps as f64,
            log_binom,
        })
    }
}

impl Filtration for RecombiningLattice {
    fn steps(&self) -> usize {
        self.steps
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn nodes_at(&self, level: usize) -> usize {
        level + 1
    }
    fn up_child(&self, _level: usize, node: usize) -> usize {
        node
    }
    fn down_child(&self, _level: usize, node: usize) -> usize {
        node + 1
    }
    fn probability(&self, level: usize, node: usize) -> f64 {
        (self.log_binom[level][node] - level as f64 * std::f64::consts::LN_2).exp()
    }
    fn brownian(&self, level: usize, node: usize) -> f64 {
        (level as f64 - 2.0 * node as f64) * self.dt.sqrt()
    }
    fn is_path_resolving(&self) -> bool {
        false
    }
}

/// One spatial vector of length `M` per node of every level `0..=depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    m: usize,
    levels: Vec<Vec<f64>>,
}

impl AdaptedField {
    /// Zero field on levels `0..=filtration.steps()`.
    pub fn zeros<F: Filtration + ?Sized>(filtration: &F, m: usize) -> Self {
        Self::zeros_to(filtration, m, filtration.steps())
    }

    /// Zero field on levels `0..=depth`.
    pub fn zeros_to<F: Filtration + ?Sized>(filtration: &F, m: usize, depth: usize) -> Self {
        let levels = (0..=depth)
            .map(|n| vec![0.0; filtration.nodes_at(n) * m])
            .collect();
        AdaptedField { m, levels }
    }

    /// Field whose value at every node of level `n` is `f(n, node)`.
    pub fn from_fn<F, G>(filtration: &F, m: usize, f: G) -> Self
    where
        F: Filtration + ?Sized,
        G: Fn(usize, usize, &mut [f64]) + Sync,
    {
        let mut out = Self::zeros(filtration, m);
        for (n, level) in out.levels.iter_mut().enumerate() {
            level
                .par_chunks_mut(m)
                .enumerate()
                .for_each(|(j, v)| f(n, j, v));
        }
        out
    }

    pub fn spatial_len(&self) -> usize {
        self.m
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, n: usize) -> &[f64] {
        &self.levels[n]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.levels[n]
    }

    pub fn node(&self, n: usize, j: usize) -> &[f64] {
        &self.levels[n][j * self.m..(j + 1) * self.m]
    }

    pub fn node_mut(&mut self, n: usize, j: usize) -> &mut [f64] {
        &mut self.levels[n][j * self.m..(j + 1) * self.m]
    }

    pub fn nodes_at(&self, n: usize) -> usize {
        self.levels[n].len() / self.m
    }

    /// Total number of stored reals.
    pub fn storage(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for level in &mut self.levels {
            for v in level.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &AdaptedField) {
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }

    /// `E[field at level]`, a spatial vector.
    pub fn expectation<F: Filtration + ?Sized>(&self, filtration: &F, level: usize) -> Vec<f64> {
        expectation_of(filtration, level, &self.levels[level], self.m)
    }
}

/// Probability-weighted average of one level stored as consecutive node vectors.
pub fn expectation_of<F: Filtration + ?Sized>(
    filtration: &F,
    level: usize,
    values: &[f64],
    m: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (j, v) in values.chunks(m).enumerate() {
        let p = filtration.probability(level, j);
        for (o, x) in out.iter_mut().zip(v) {
            *o += p * x;
        }
    }
    out
}

/// Conditional expectation of level `n + 1` values given level `n`.
pub fn conditional_expectation<F: Filtration + ?Sized>(
    filtration: &F,
    n: usize,
    next: &[f64],
    m: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; filtration.nodes_at(n) * m];
    out.par_chunks_mut(m).enumerate().for_each(|(j, o)| {
        let up = &next[filtration.up_child(n, j) * m..][..m];
        let down = &next[filtration.down_child(n, j) * m..][..m];
        for i in 0..m {
            o[i] = 0.5 * (up[i] + down[i]);
        }
    });
    out
}

/// Integrand `k_n` in `v_{n+1} = E_n[v_{n+1}] + k_n dW_n`.
pub fn martingale_coefficient<F: Filtration + ?Sized>(
    filtration: &F,
    n: usize,
    next: &[f64],
    m: usize,
) -> Vec<f64> {
    let scale = 0.5 / filtration.sqrt_dt();
    let mut out = vec![0.0; filtration.nodes_at(n) * m];
    out.par_chunks_mut(m).enumerate().for_each(|(j, o)| {
        let up = &next[filtration.up_child(n, j) * m..][..m];
        let down = &next[filtration.down_child(n, j) * m..][..m];
        for i in 0..m {
            o[i] = (up[i] - down[i]) * scale;
        }
    });
    out
}

/// `count` reproducible paths of `steps` Gaussian increments `N(0, dt)`,
/// returned row-major (`count x steps`).
pub fn sample_paths(seed: u64, count: usize, steps: usize, dt: f64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Parameter("path count must be at least 1".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Parameter("time step must be positive".into()));
    }
    let normal = Normal::new(0.0, dt.sqrt()).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count * steps)
        .map(|_| normal.sample(&mut rng))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn tree_depth_guard() {
        assert!(NoiseTree::new(1.0, 20).is_ok());
        assert!(matches!(
            NoiseTree::new(1.0, 21),
            Err(Error::TreeTooDeep(21))
        ));
    }

    #[test]
    fn constant_field_expectation() {
        let tree = NoiseTree::new(1.0, 5).unwrap();
        let f = AdaptedField::from_fn(&tree, 3, |_, _, v| v.fill(2.5));
        for n in 0..=5 {
            assert_eq!(f.expectation(&tree, n), vec![2.5; 3]);
        }
    }

    #[test]
    fn increment_has_zero_mean() {
        let tree = NoiseTree::new(1.0, 4).unwrap();
        let f = AdaptedField::from_fn(&tree, 1, |n, j, v| {
            v[0] = if n == 1 { tree.increment(1, j, 0) } else { 0.0 }
        });
        assert_eq!(f.expectation(&tree, 1), vec![0.0]);
    }

    #[test]
    fn brownian_second_moment_by_enumeration() {
        let tree = NoiseTree::new(1.0, 10).unwrap();
        for n in 0..=10 {
            // Independent enumeration over sign sequences.
            let mut acc = 0.0;
            for j in 0..(1usize << n) {
                let w: f64 = (0..n).map(|k| tree.increment(n, j, k)).sum();
                assert!((w - tree.brownian(n, j)).abs() < 1e-14);
                acc += w * w;
            }
            acc /= (1usize << n) as f64;
            assert!((acc - n as f64 * tree.dt()).abs() < 1e-13);
        }
    }

    #[test]
    fn degree_two_moments_are_exact() {
        let tree = NoiseTree::new(0.7, 6).unwrap();
        let n = 6;
        for a in 0..n {
            for b in 0..n {
                let mut acc = 0.0;
                for j in 0..(1usize << n) {
                    acc += tree.increment(n, j, a) * tree.increment(n, j, b);
                }
                acc /= 64.0;
                let exact = if a == b { tree.dt() } else { 0.0 };
                assert!((acc - exact).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conditional_expectation_examples() {
        let tree = NoiseTree::new(1.0, 2).unwrap();
        assert_eq!(
            conditional_expectation(&tree, 0, &[1.0, -1.0], 1),
            vec![0.0]
        );
        let det = [3.0, 3.0, 3.0, 3.0];
        assert_eq!(conditional_expectation(&tree, 1, &det, 1), vec![3.0, 3.0]);
    }

    #[test]
    fn martingale_coefficient_examples() {
        let tree = NoiseTree::new(0.25, 1).unwrap();
        assert_eq!(martingale_coefficient(&tree, 0, &[1.0, -1.0], 1), vec![2.0]);
        assert_eq!(martingale_coefficient(&tree, 0, &[4.0, 4.0], 1), vec![0.0]);
    }

    #[test]
    fn tower_property_and_reconstruction() {
        let tree = NoiseTree::new(1.0, 8).unwrap();
        let m = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves: Vec<f64> = (0..(1 << 8) * m)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let cond = conditional_expectation(&tree, 7, &leaves, m);
        let e1 = expectation_of(&tree, 7, &cond, m);
        let e2 = expectation_of(&tree, 8, &leaves, m);
        for i in 0..m {
            assert!((e1[i] - e2[i]).abs() < 1e-15);
        }
        let k = martingale_coefficient(&tree, 7, &leaves, m);
        let sq = tree.sqrt_dt();
        for j in 0..(1 << 7) {
            for i in 0..m {
                let up = cond[j * m + i] + k[j * m + i] * sq;
                let down = cond[j * m + i] - k[j * m + i] * sq;
                assert!((up - leaves[(2 * j) * m + i]).abs() < 1e-15);
                assert!((down - leaves[(2 * j + 1) * m + i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn lattice_probabilities_and_moments() {
        let lat = RecombiningLattice::new(1.0, 12).unwrap();
        for n in 0..=12 {
            let total: f64 = (0..=n).map(|j| lat.probability(n, j)).sum();
            assert!((total - 1.0).abs() < 1e-13);
            let m2: f64 = (0..=n)
                .map(|j| lat.probability(n, j) * lat.brownian(n, j).powi(2))
                .sum();
            assert!((m2 - n as f64 * lat.dt()).abs() < 1e-13);
        }
    }

    #[test]
    fn lattice_matches_tree_for_markov_leaves() {
        let tree = NoiseTree::new(1.0, 9).unwrap();
        let lat = RecombiningLattice::new(1.0, 9).unwrap();
        let g = |w: f64| (w * 1.3).sin() + w * w;
        let leaves_t: Vec<f64> = (0..512).map(|j| g(tree.brownian(9, j))).collect();
        let leaves_l: Vec<f64> = (0..10).map(|j| g(lat.brownian(9, j))).collect();
        let mut vt = leaves_t;
        let mut vl = leaves_l;
        for n in (0..9).rev() {
            vt = conditional_expectation(&tree, n, &vt, 1);
            vl = conditional_expectation(&lat, n, &vl, 1);
        }
        assert!((vt[0] - vl[0]).abs() < 1e-13);
    }

    #[test]
    fn sampled_paths_are_reproducible_and_calibrated() {
        let dt = 0.01;
        let a = sample_paths(11, 1000, 100, dt).unwrap();
        let b = sample_paths(11, 1000, 100, dt).unwrap();
        assert_eq!(a, b);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 * (dt / n).sqrt());
        assert!((var / dt - 1.0).abs() < 0.05);
    }
}
