//! Basis bookkeeping: projection of fine-tuned parameters onto the span of
//! the bases, the projection-error ratio, the expansion state machine,
//! Gaussian spawning of new bases, and spectral/cosine diagnostics.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::param::{dot, ParamVector};

/// Relative cutoff under which singular directions are treated as absent.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    /// Linear span through the origin.
    #[default]
    Linear,
    /// Affine hull of the bases (anchored at the first basis).
    Affine,
}

/// Orthonormal frame for the span of a basis set, reusable across many
/// projections against the same bases.
#[derive(Debug, Clone)]
pub struct Subspace {
    /// `d x r` orthonormal columns.
    frame: DMatrix<f64>,
    anchor: Option<Vec<f64>>,
    dim: usize,
}

impl Subspace {
    pub fn new(bases: &[ParamVector], kind: SpanKind) -> Self {
        assert!(!bases.is_empty(), "subspace needs at least one basis");
        let dim = bases[0].dim();
        let (anchor, dirs): (Option<Vec<f64>>, Vec<Vec<f64>>) = match kind {
            SpanKind::Linear => (None, bases.iter().map(|b| b.as_slice().to_vec()).collect()),
            SpanKind::Affine => {
                let a = bases[0].as_slice();
                let dirs = bases[1..]
                    .iter()
                    .map(|b| b.as_slice().iter().zip(a).map(|(x, y)| x - y).collect())
                    .collect();
                (Some(a.to_vec()), dirs)
            }
        };
        Self { frame: orthonormal_frame(&dirs, dim), anchor, dim }
    }

    /// Rank of the span after truncation; 0 for an all-zero basis set.
    pub fn rank(&self) -> usize {
        self.frame.ncols()
    }

    pub fn project(&self, phi: &[f64]) -> Vec<f64> {
        assert_eq!(phi.len(), self.dim, "projecting a vector of the wrong dimension");
        let centred: Vec<f64> = match &self.anchor {
            Some(a) => phi.iter().zip(a).map(|(x, y)| x - y).collect(),
            None => phi.to_vec(),
        };
        let mut out = match self.rank() {
            0 => vec![0.0; self.dim],
            _ => {
                let v = DVector::from_column_slice(&centred);
                let coords = self.frame.tr_mul(&v);
                (&self.frame * coords).as_slice().to_vec()
            }
        };
        if let Some(a) = &self.anchor {
            for (o, y) in out.iter_mut().zip(a) {
                *o += y;
            }
        }
        out
    }
}

fn orthonormal_frame(dirs: &[Vec<f64>], dim: usize) -> DMatrix<f64> {
    if dirs.is_empty() {
        return DMatrix::zeros(dim, 0);
    }
    let a = DMatrix::from_fn(dim, dirs.len(), |r, c| dirs[c][r]);
    let svd = a.svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return DMatrix::zeros(dim, 0);
    }
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > RANK_TOLERANCE * smax)
        .map(|(i, _)| i)
        .collect();
    DMatrix::from_fn(dim, keep.len(), |r, c| u[(r, keep[c])])
}

/// Orthogonal projection of `phi` onto the linear span of `bases`
/// (minimum-norm least-squares fit, near-dependent directions truncated).
pub fn project_onto_span(bases: &[ParamVector], phi: &[f64]) -> Vec<f64> {
    Subspace::new(bases, SpanKind::Linear).project(phi)
}

/// `‖phi - proj‖² / ‖phi‖²`. A zero `phi` yields 0 and a debug diagnostic.
pub fn epsilon(phi: &[f64], proj: &[f64]) -> f64 {
    let norm = dot(phi, phi);
    if norm == 0.0 {
        log::debug!("projection ratio requested for an all-zero parameter vector");
        return 0.0;
    }
    let resid: f64 = phi.iter().zip(proj).map(|(a, b)| (a - b) * (a - b)).sum();
    resid / norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Expand,
}

/// Consecutive-rise counter over the batch-averaged projection ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTracker {
    pub e_prev: Option<f64>,
    pub counter: usize,
    pub c: usize,
    pub m_max: usize,
    pub history: VecDeque<f64>,
    pub history_cap: usize,
}

impl ExpansionTracker {
    pub fn new(c: usize, m_max: usize) -> Self {
        Self { e_prev: None, counter: 0, c, m_max, history: VecDeque::new(), history_cap: 4096 }
    }

    /// Feeds one iteration's averaged ratio; `m` is the current basis count.
    ///
    /// The first measurement, and the first one after an expansion, only
    /// primes `e_prev`.
    pub fn update(&mut self, e_now: f64, m: usize) -> Decision {
        assert!(e_now.is_finite(), "projection ratio must be finite");
        if self.history.len() == self.history_cap {
            self.history.pop_front();
        }
        self.history.push_back(e_now);
        match self.e_prev {
            Some(prev) if e_now > prev => self.counter += 1,
            _ => self.counter = 0,
        }
        self.e_prev = Some(e_now);
        if self.counter > self.c && m < self.m_max {
            self.counter = 0;
            self.e_prev = None;
            Decision::Expand
        } else {
            Decision::Keep
        }
    }
}

/// `mu + sqrt(lambda) * z` per coordinate, `mu` the mean of the bases.
pub fn spawn_basis<R: Rng + ?Sized>(bases: &[ParamVector], lambda: f64, rng: &mut R) -> ParamVector {
    assert!(lambda >= 0.0, "spawn variance must be non-negative");
    let mu = mean_basis(bases);
    let std = lambda.sqrt();
    ParamVector::new(mu.into_iter().map(|m| m + std * rng.sample::<f64, _>(StandardNormal)).collect())
}

pub fn mean_basis(bases: &[ParamVector]) -> Vec<f64> {
    let d = bases[0].dim();
    let mut mu = vec![0.0; d];
    for b in bases {
        for (m, v) in mu.iter_mut().zip(b.as_slice()) {
            *m += v;
        }
    }
    let n = bases.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

/// Singular values of the stacked `M x d` basis matrix, descending.
pub fn singular_values(bases: &[ParamVector]) -> Vec<f64> {
    let d = bases[0].dim();
    let a = DMatrix::from_fn(bases.len(), d, |r, c| bases[r].as_slice()[c]);
    let mut s: Vec<f64> = a.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Singular values normalised to sum to one, descending.
pub fn basis_svd(bases: &[ParamVector]) -> Vec<f64> {
    let s = singular_values(bases);
    let total: f64 = s.iter().sum();
    if total == 0.0 {
        return s;
    }
    s.into_iter().map(|v| v / total).collect()
}

pub fn cosine(a: &ParamVector, b: &ParamVector) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

pub fn cosine_matrix(bases: &[ParamVector]) -> Vec<Vec<f64>> {
    bases.iter().map(|a| bases.iter().map(|b| cosine(a, b)).collect()).collect()
}

fn pairwise_mean(bases: &[ParamVector], f: impl Fn(f64) -> f64) -> Option<f64> {
    if bases.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..bases.len() {
        for j in i + 1..bases.len() {
            total += f(cosine(&bases[i], &bases[j]));
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

/// Mean cosine similarity over unordered basis pairs; `None` when `M < 2`.
pub fn basis_cosine(bases: &[ParamVector]) -> Option<f64> {
    pairwise_mean(bases, |c| c)
}

/// Mean absolute pairwise cosine; `None` when `M < 2`.
pub fn basis_abs_cosine(bases: &[ParamVector]) -> Option<f64> {
    pairwise_mean(bases, f64::abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn axis_aligned_projection() {
        let bases = [pv(&[1.0, 0.0, 0.0]), pv(&[0.0, 1.0, 0.0])];
        let phi = [3.0, 4.0, 5.0];
        let p = project_onto_span(&bases, &phi);
        for (a, b) in p.iter().zip([3.0, 4.0, 0.0]) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((epsilon(&phi, &p) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn in_span_vector_is_fixed() {
        let bases = [pv(&[1.0, 2.0, -1.0, 0.5]), pv(&[0.0, 1.0, 3.0, -2.0])];
        let phi: Vec<f64> = (0..4).map(|i| 2.0 * bases[0].as_slice()[i] + 3.0 * bases[1].as_slice()[i]).collect();
        let p = project_onto_span(&bases, &phi);
        let resid: f64 = phi.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(resid <= 1e-10);
        assert!(epsilon(&phi, &p) <= 1e-20);
    }

    #[test]
    fn orthogonal_vector_has_unit_ratio() {
        let bases = [pv(&[1.0, 1.0])];
        let phi = [1.0, -1.0];
        let p = project_onto_span(&bases, &phi);
        assert!(p.iter().all(|v| v.abs() < 1e-15));
        assert!((epsilon(&phi, &p) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_basis_and_zero_phi_are_degenerate() {
        let s = Subspace::new(&[pv(&[0.0, 0.0, 0.0])], SpanKind::Linear);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.project(&[1.0, 2.0, 3.0]), vec![0.0; 3]);
        assert_eq!(epsilon(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn dependent_bases_are_truncated() {
        let bases = [pv(&[1.0, 2.0, 3.0]), pv(&[2.0, 4.0, 6.0]), pv(&[0.0, 0.0, 1.0])];
        let s = Subspace::new(&bases, SpanKind::Linear);
        assert_eq!(s.rank(), 2);
    }

    #[test]
    fn affine_hull_of_one_point_is_that_point() {
        let bases = [pv(&[1.0, 2.0])];
        let s = Subspace::new(&bases, SpanKind::Affine);
        assert_eq!(s.project(&[5.0, -3.0]), vec![1.0, 2.0]);
        let two = [pv(&[1.0, 0.0]), pv(&[1.0, 2.0])];
        let p = Subspace::new(&two, SpanKind::Affine).project(&[4.0, 7.0]);
        assert!((p[0] - 1.0).abs() < 1e-14 && (p[1] - 7.0).abs() < 1e-14);
    }

    #[test]
    fn tracker_expands_after_more_than_c_rises() {
        let mut t = ExpansionTracker::new(2, 5);
        let d: Vec<_> = [0.1, 0.2, 0.3, 0.4].iter().map(|&e| t.update(e, 1)).collect();
        assert_eq!(d, [Decision::Keep, Decision::Keep, Decision::Keep, Decision::Expand]);
        assert_eq!(t.counter, 0);
    }

    #[test]
    fn tracker_resets_on_decrease() {
        let mut t = ExpansionTracker::new(5, 5);
        t.update(0.1, 1);
        t.update(0.2, 1);
        assert_eq!(t.counter, 1);
        t.update(0.15, 1);
        assert_eq!(t.counter, 0);
    }

    #[test]
    fn tracker_respects_cap() {
        let mut t = ExpansionTracker::new(1, 3);
        for i in 0..20 {
            assert_eq!(t.update(i as f64, 3), Decision::Keep);
        }
        assert!(t.counter > 1);
    }

    #[test]
    fn spawn_without_noise_is_the_mean() {
        let bases = [pv(&[0.0, 0.0]), pv(&[2.0, 2.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(spawn_basis(&bases, 0.0, &mut rng), pv(&[1.0, 1.0]));
        let a = spawn_basis(&bases, 0.01, &mut ChaCha8Rng::seed_from_u64(7));
        let b = spawn_basis(&bases, 0.01, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn svd_and_cosine_cases() {
        assert_eq!(basis_svd(&[pv(&[3.0, -4.0])]), vec![1.0]);
        let s = basis_svd(&[pv(&[2.0, 0.0, 0.0]), pv(&[0.0, 0.0, 2.0])]);
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);

        assert_eq!(basis_cosine(&[pv(&[1.0, 0.0]), pv(&[0.0, 3.0])]), Some(0.0));
        let c = basis_cosine(&[pv(&[1.0, 2.0]), pv(&[2.0, 4.0])]).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
        assert_eq!(basis_cosine(&[pv(&[1.0])]), None);

        let three = [pv(&[1.0, 0.0, 1.0]), pv(&[0.0, 2.0, 1.0]), pv(&[-1.0, 1.0, 0.0])];
        let by_hand = {
            let c01 = 1.0 / (2f64.sqrt() * 5f64.sqrt());
            let c02 = -1.0 / (2f64.sqrt() * 2f64.sqrt());
            let c12 = 2.0 / (5f64.sqrt() * 2f64.sqrt());
            (c01 + c02 + c12) / 3.0
        };
        assert!((basis_cosine(&three).unwrap() - by_hand).abs() < 1e-15);
    }
}
