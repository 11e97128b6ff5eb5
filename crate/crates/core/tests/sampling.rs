use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xbml::basis::{mean_basis, spawn_basis};
use xbml::harness::RunConfig;
use xbml::model::Targets;
use xbml::tasks::{task_rng, DomainSpec, Family, Interval, Split, TaskDistribution};
use xbml::ParamVector;

fn weighted_mixture() -> TaskDistribution {
    let lin = |name: &str, weight: f64| DomainSpec {
        name: name.into(),
        weight,
        family: Family::Linear {
            slope: Interval::new(-1.0, 1.0),
            intercept: Interval::new(-1.0, 1.0),
            x_range: Interval::new(-2.0, 2.0),
            noise_std: 0.0,
        },
    };
    TaskDistribution { domains: vec![lin("a", 0.5), lin("b", 0.3), lin("c", 0.2)], k_shot: 4, n_query: 7, n_way: 1 }
}

#[test]
fn regression_episodes_are_well_formed() {
    let sampler = weighted_mixture().sampler().unwrap();
    for i in 0..200 {
        let ep = sampler.sample_episode(&mut task_rng(3, Split::Train, 0, i));
        assert_eq!(ep.support.x.shape(), (4, 1));
        assert_eq!(ep.query.x.shape(), (7, 1));
        match (&ep.support.y, &ep.query.y) {
            (Targets::Values(s), Targets::Values(q)) => {
                assert_eq!((s.shape(), q.shape()), ((4, 1), (7, 1)));
            }
            _ => panic!("regression tasks carry values"),
        }
        assert!(ep.support.x.data().iter().all(|x| (-2.0..=2.0).contains(x)));
        assert!(ep.domain < 3);
    }
}

#[test]
fn classification_episodes_have_balanced_labels() {
    let cfg = RunConfig::preset("multi-domain").unwrap();
    let sampler = cfg.tasks.sampler().unwrap();
    for i in 0..50 {
        let ep = sampler.sample_episode(&mut task_rng(1, Split::Validation, 0, i));
        assert_eq!(ep.support.x.shape(), (25, 8));
        assert_eq!(ep.query.x.shape(), (75, 8));
        let Targets::Labels(labels) = &ep.support.y else { panic!("labels expected") };
        for class in 0..5 {
            assert_eq!(labels.iter().filter(|&&l| l == class).count(), 5);
        }
    }
}

#[test]
fn domain_frequencies_follow_weights() {
    let sampler = weighted_mixture().sampler().unwrap();
    let n = 20_000;
    let mut counts = [0usize; 3];
    for i in 0..n {
        counts[sampler.sample_episode(&mut task_rng(9, Split::Train, 1, i)).domain] += 1;
    }
    for (count, w) in counts.iter().zip([0.5, 0.3, 0.2]) {
        let p = *count as f64 / n as f64;
        let sd = (w * (1.0 - w) / n as f64).sqrt();
        assert!((p - w).abs() < 5.0 * sd, "frequency {p} vs weight {w}");
    }
}

#[test]
fn splits_and_seeds_give_distinct_streams() {
    let sampler = weighted_mixture().sampler().unwrap();
    let a = sampler.stream_batch(1, Split::Train, 0, 4);
    assert_eq!(a, sampler.stream_batch(1, Split::Train, 0, 4));
    assert_ne!(a, sampler.stream_batch(1, Split::Test, 0, 4));
    assert_ne!(a, sampler.stream_batch(2, Split::Train, 0, 4));
    assert_ne!(a, sampler.stream_batch(1, Split::Train, 1, 4));
}

#[test]
fn zero_variance_spawn_is_the_mean() {
    let bases = [ParamVector::new(vec![1.0, -2.0, 0.5]), ParamVector::new(vec![3.0, 0.0, -0.5])];
    let fresh = spawn_basis(&bases, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(fresh.as_slice(), mean_basis(&bases).as_slice());
}

#[test]
fn spawn_moments_concentrate() {
    let bases = [ParamVector::new(vec![0.2, -1.0]), ParamVector::new(vec![0.6, 3.0])];
    let mu = mean_basis(&bases);
    let lambda = 0.01;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let draws: Vec<ParamVector> = (0..n).map(|_| spawn_basis(&bases, lambda, &mut rng)).collect();
    for j in 0..2 {
        let xs: Vec<f64> = draws.iter().map(|d| d.as_slice()[j]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // 5-sigma bands: sd(mean) = sqrt(lambda/n), sd(var) = lambda*sqrt(2/(n-1)).
        assert!((mean - mu[j]).abs() < 5.0 * (lambda / n as f64).sqrt());
        assert!((var - lambda).abs() < 5.0 * lambda * (2.0 / (n - 1) as f64).sqrt());
    }
}
