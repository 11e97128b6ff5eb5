//! Synthetic multi-domain task distributions and the episode sampler.
//!
//! A [`TaskDistribution`] is a weighted mixture of domains. Each domain is a
//! generator family with its own parameter ranges; regression families draw a
//! fresh target function per episode, the classification family draws fresh
//! class centres and pushes them through a fixed per-domain affine transform.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Head, Samples, Targets};

/// Closed interval `[lo, hi]`, written as a two-element array in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn check(&self, what: &str) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() || self.lo > self.hi {
            return Err(Error::Config(format!("degenerate range for {what}: [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Always consume one draw so collapsed ranges keep the stream aligned.
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Self { lo: v[0], hi: v[1] }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

fn default_x_range() -> Interval {
    Interval::new(-5.0, 5.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    /// `y = amplitude * sin(x - phase)`
    Sinusoid {
        amplitude: Interval,
        phase: Interval,
        #[serde(default = "default_x_range")]
        x_range: Interval,
        #[serde(default)]
        noise_std: f64,
    },
    /// `y = slope * x + intercept`
    Linear {
        slope: Interval,
        intercept: Interval,
        #[serde(default = "default_x_range")]
        x_range: Interval,
        #[serde(default)]
        noise_std: f64,
    },
    /// `y = a x^2 + b x + c`
    Quadratic {
        a: Interval,
        b: Interval,
        c: Interval,
        #[serde(default = "default_x_range")]
        x_range: Interval,
        #[serde(default)]
        noise_std: f64,
    },
    /// N Gaussian classes per episode. Class centres are drawn from
    /// `N(0, class_spread^2 I)`, samples add `N(0, noise_std^2 I)`, and every
    /// point is then mapped through the domain's fixed `scale * R x + offset`
    /// with `R` a random rotation fixed by `transform_seed`.
    GaussianClusters {
        dim: usize,
        class_spread: f64,
        noise_std: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        transform_seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

impl Family {
    pub fn head(&self) -> Head {
        match self {
            Family::GaussianClusters { .. } => Head::Classification,
            _ => Head::Regression,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub weight: f64,
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    pub domains: Vec<DomainSpec>,
    /// Support samples per class (per task for regression).
    pub k_shot: usize,
    /// Query samples per class (per task for regression).
    #[serde(default = "default_query")]
    pub n_query: usize,
    /// Classes per classification episode; ignored by regression domains.
    #[serde(default = "default_way")]
    pub n_way: usize,
}

fn default_query() -> usize {
    15
}

fn default_way() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x5452_4149_4e00_0001,
            Split::Validation => 0x5641_4c49_4400_0002,
            Split::Test => 0x5445_5354_0000_0003,
        }
    }
}

/// One few-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Samples,
    pub query: Samples,
    pub domain: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent rng stream for `(seed, split, iteration, index)`.
///
/// Batch contents depend only on these coordinates, never on which thread
/// draws them.
pub fn task_rng(seed: u64, split: Split, iteration: u64, index: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for part in [split.tag(), iteration, index] {
        h = splitmix64(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Rng stream for auxiliary draws keyed by a label (basis spawning, init).
pub fn aux_rng(seed: u64, label: u64, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ 0xa5a5_5a5a_0f0f_f0f0) ^ label) ^ iteration)
}

/// Validated sampler compiled from a [`TaskDistribution`].
#[derive(Debug, Clone)]
pub struct TaskSampler {
    dist: TaskDistribution,
    chooser: WeightedIndex<f64>,
    transforms: Vec<Option<(DMatrix<f64>, Vec<f64>)>>,
    head: Head,
}

impl TaskDistribution {
    pub fn head(&self) -> Option<Head> {
        self.domains.first().map(|d| d.family.head())
    }

    /// Number of input features episodes from this distribution carry.
    pub fn input_dim(&self) -> usize {
        match self.domains.first().map(|d| &d.family) {
            Some(Family::GaussianClusters { dim, .. }) => *dim,
            _ => 1,
        }
    }

    pub fn sampler(&self) -> Result<TaskSampler> {
        if self.domains.is_empty() {
            return Err(Error::Config("task distribution has no domains".into()));
        }
        if self.k_shot == 0 || self.n_query == 0 {
            return Err(Error::Config("k_shot and n_query must be positive".into()));
        }
        let total: f64 = self.domains.iter().map(|d| d.weight).sum();
        if self.domains.iter().any(|d| !(d.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("domain weights must be non-negative and sum to 1 (sum = {total})")));
        }
        let head = self.domains[0].family.head();
        let mut transforms = Vec::with_capacity(self.domains.len());
        for d in &self.domains {
            if d.family.head() != head {
                return Err(Error::Config("cannot mix regression and classification domains".into()));
            }
            transforms.push(check_family(&d.name, &d.family, self)?);
        }
        let chooser = WeightedIndex::new(self.domains.iter().map(|d| d.weight))
            .map_err(|e| Error::Config(format!("domain weights: {e}")))?;
        Ok(TaskSampler { dist: self.clone(), chooser, transforms, head })
    }
}

fn check_family(name: &str, family: &Family, dist: &TaskDistribution) -> Result<Option<(DMatrix<f64>, Vec<f64>)>> {
    let noise_ok = |n: f64| {
        if n >= 0.0 && n.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("{name}: noise_std must be finite and >= 0")))
        }
    };
    match family {
        Family::Sinusoid { amplitude, phase, x_range, noise_std } => {
            amplitude.check("amplitude")?;
            phase.check("phase")?;
            x_range.check("x_range")?;
            noise_ok(*noise_std)?;
            Ok(None)
        }
        Family::Linear { slope, intercept, x_range, noise_std } => {
            slope.check("slope")?;
            intercept.check("intercept")?;
            x_range.check("x_range")?;
            noise_ok(*noise_std)?;
            Ok(None)
        }
        Family::Quadratic { a, b, c, x_range, noise_std } => {
            a.check("a")?;
            b.check("b")?;
            c.check("c")?;
            x_range.check("x_range")?;
            noise_ok(*noise_std)?;
            Ok(None)
        }
        Family::GaussianClusters { dim, class_spread, noise_std, scale, offset, transform_seed } => {
            if *dim == 0 || dist.n_way < 2 {
                return Err(Error::Config(format!("{name}: need dim >= 1 and n_way >= 2")));
            }
            if !(*class_spread > 0.0) || !class_spread.is_finite() || !scale.is_finite() || !offset.is_finite() {
                return Err(Error::Config(format!("{name}: class_spread must be positive, scale/offset finite")));
            }
            noise_ok(*noise_std)?;
            let mut rng = ChaCha8Rng::seed_from_u64(*transform_seed);
            let g = DMatrix::from_fn(*dim, *dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let rotation = g.qr().q() * *scale;
            let shift = (0..*dim).map(|_| offset * rng.sample::<f64, _>(StandardNormal)).collect();
            Ok(Some((rotation, shift)))
        }
    }
}

impl TaskSampler {
    pub fn distribution(&self) -> &TaskDistribution {
        &self.dist
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn num_domains(&self) -> usize {
        self.dist.domains.len()
    }

    pub fn sample_episode<R: Rng + ?Sized>(&self, rng: &mut R) -> Episode {
        let domain = self.chooser.sample(rng);
        self.sample_from_domain(domain, rng)
    }

    /// Draws a task from one fixed domain, bypassing the mixture weights.
    pub fn sample_from_domain<R: Rng + ?Sized>(&self, domain: usize, rng: &mut R) -> Episode {
        let family = &self.dist.domains[domain].family;
        let (k, q) = (self.dist.k_shot, self.dist.n_query);
        let (support, query) = match family {
            Family::Sinusoid { amplitude, phase, x_range, noise_std } => {
                let (a, p) = (amplitude.sample(rng), phase.sample(rng));
                regression_pair(rng, k, q, *x_range, *noise_std, |x| a * (x - p).sin())
            }
            Family::Linear { slope, intercept, x_range, noise_std } => {
                let (m, b) = (slope.sample(rng), intercept.sample(rng));
                regression_pair(rng, k, q, *x_range, *noise_std, |x| m * x + b)
            }
            Family::Quadratic { a, b, c, x_range, noise_std } => {
                let (a, b, c) = (a.sample(rng), b.sample(rng), c.sample(rng));
                regression_pair(rng, k, q, *x_range, *noise_std, |x| a * x * x + b * x + c)
            }
            Family::GaussianClusters { dim, class_spread, noise_std, .. } => {
                let (rotation, shift) = self.transforms[domain].as_ref().expect("classification transform");
                let n = self.dist.n_way;
                let centres: Vec<Vec<f64>> =
                    (0..n).map(|_| (0..*dim).map(|_| class_spread * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
                let draw = |per_class: usize, rng: &mut R| {
                    let mut x = Vec::with_capacity(n * per_class * dim);
                    let mut labels = Vec::with_capacity(n * per_class);
                    for (label, centre) in centres.iter().enumerate() {
                        for _ in 0..per_class {
                            let raw: Vec<f64> =
                                centre.iter().map(|c| c + noise_std * rng.sample::<f64, _>(StandardNormal)).collect();
                            for r in 0..*dim {
                                let mut v = shift[r];
                                for (cidx, rv) in raw.iter().enumerate() {
                                    v += rotation[(r, cidx)] * rv;
                                }
                                x.push(v);
                            }
                            labels.push(label);
                        }
                    }
                    Samples { x: Tensor::new(n * per_class, *dim, x), y: Targets::Labels(labels) }
                };
                let s = draw(k, rng);
                let qs = draw(q, rng);
                (s, qs)
            }
        };
        Episode { support, query, domain }
    }

    /// `b` episodes drawn in sequence from one rng.
    pub fn sample_batch<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Vec<Episode>> {
        if b == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok((0..b).map(|_| self.sample_episode(rng)).collect())
    }

    /// Batch for one training iteration with an independent stream per task.
    pub fn stream_batch(&self, seed: u64, split: Split, iteration: u64, b: usize) -> Vec<Episode> {
        (0..b as u64).map(|i| self.sample_episode(&mut task_rng(seed, split, iteration, i))).collect()
    }
}

fn regression_pair<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    q: usize,
    x_range: Interval,
    noise_std: f64,
    f: impl Fn(f64) -> f64,
) -> (Samples, Samples) {
    let noise = Normal::new(0.0, noise_std).expect("validated noise std");
    let mut draw = |n: usize| {
        let xs: Vec<f64> = (0..n).map(|_| x_range.sample(rng)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let eps = if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                f(x) + eps
            })
            .collect();
        Samples { x: Tensor::column(xs), y: Targets::Values(Tensor::column(ys)) }
    };
    let s = draw(k);
    let qs = draw(q);
    (s, qs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sinusoid(amplitude: Interval, phase: Interval) -> Family {
        Family::Sinusoid { amplitude, phase, x_range: default_x_range(), noise_std: 0.0 }
    }

    fn single(family: Family, k_shot: usize) -> TaskDistribution {
        TaskDistribution { domains: vec![DomainSpec { name: "d".into(), weight: 1.0, family }], k_shot, n_query: 15, n_way: 5 }
    }

    fn clusters() -> Family {
        Family::GaussianClusters { dim: 3, class_spread: 2.0, noise_std: 0.3, scale: 1.5, offset: 0.5, transform_seed: 9 }
    }

    #[test]
    fn collapsed_sinusoid_is_plain_sine() {
        let s = single(sinusoid(Interval::point(1.0), Interval::point(0.0)), 10).sampler().unwrap();
        let ep = s.sample_episode(&mut ChaCha8Rng::seed_from_u64(4));
        let Targets::Values(y) = &ep.support.y else { panic!("regression targets") };
        for r in 0..ep.support.len() {
            assert_eq!(y.get(r, 0), ep.support.x.get(r, 0).sin());
        }
    }

    #[test]
    fn five_way_five_shot_counts() {
        let s = single(clusters(), 5).sampler().unwrap();
        let ep = s.sample_episode(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 75);
        let Targets::Labels(l) = &ep.support.y else { panic!() };
        for c in 0..5 {
            assert_eq!(l.iter().filter(|&&v| v == c).count(), 5);
        }
    }

    #[test]
    fn degenerate_ranges_are_rejected() {
        let bad = single(sinusoid(Interval::new(2.0, 1.0), Interval::point(0.0)), 5);
        assert!(matches!(bad.sampler(), Err(Error::Config(_))));
        let mut unnormalised = single(sinusoid(Interval::point(1.0), Interval::point(0.0)), 5);
        unnormalised.domains[0].weight = 0.7;
        assert!(unnormalised.sampler().is_err());
        let mut empty = unnormalised.clone();
        empty.domains.clear();
        assert!(empty.sampler().is_err());
    }

    #[test]
    fn batches_are_reproducible() {
        let s = single(sinusoid(Interval::new(0.1, 5.0), Interval::new(0.0, 3.0)), 5).sampler().unwrap();
        let a = s.sample_batch(2, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = s.sample_batch(2, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.sample_batch(1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().len(), 1);
        assert!(s.sample_batch(0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert_eq!(s.stream_batch(3, Split::Train, 7, 2), s.stream_batch(3, Split::Train, 7, 2));
        assert_ne!(s.stream_batch(3, Split::Train, 7, 2), s.stream_batch(3, Split::Test, 7, 2));
    }

    #[test]
    fn config_round_trips_through_json() {
        let d = single(clusters(), 1);
        let text = serde_json::to_string(&d).unwrap();
        assert!(text.contains("\"kind\":\"gaussian_clusters\""));
        assert_eq!(serde_json::from_str::<TaskDistribution>(&text).unwrap(), d);
    }
}
