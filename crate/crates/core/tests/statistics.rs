//! Monte Carlo checks of the data and dropout generators against
//! closed-form distributions.

use std::collections::BTreeSet;

use fedsim::data::{generate_clustered, generate_general, ClusteredParams, GeneralParams};
use fedsim::dropout::{check_common_rounds, check_friend_presence, generate_schedule, GeneratorKind};
use fedsim::rng::{Purpose, RngStream};
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Hypergeometric};

fn binom(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[test]
fn dirichlet_labels_follow_their_proportions() {
    let p = GeneralParams {
        n_clients: 30,
        n_classes: 6,
        n_features: 3,
        samples_per_client: 400,
        dirichlet_alpha: 0.8,
        noise_scale: 1.0,
        test_size: 60,
    };
    let fed = generate_general(&p, 11).unwrap();
    let props = fed.label_proportions.as_ref().unwrap();
    // Pool the per-client goodness-of-fit statistics; classes with tiny
    // expected counts are merged into one bin per client.
    let (mut stat, mut dof) = (0.0, 0usize);
    for (client, pk) in fed.clients.iter().zip(props) {
        let hist = client.label_histogram();
        let n = client.len() as f64;
        let (mut small_obs, mut small_exp, mut bins) = (0.0, 0.0, 0usize);
        for (c, &obs) in hist.iter().enumerate() {
            let exp = n * pk[c];
            if exp < 5.0 {
                small_obs += obs as f64;
                small_exp += exp;
            } else {
                stat += (obs as f64 - exp).powi(2) / exp;
                bins += 1;
            }
        }
        if small_exp > 0.0 {
            stat += (small_obs - small_exp).powi(2) / small_exp;
            bins += 1;
        }
        dof += bins - 1;
    }
    let chi = ChiSquared::new(dof as f64).unwrap();
    let pval = 1.0 - chi.cdf(stat);
    assert!(pval > 1e-3, "chi2 = {stat} on {dof} dof, p = {pval}");
}

#[test]
fn dirichlet_mean_proportion_is_uniform() {
    let p = GeneralParams {
        n_clients: 400,
        n_classes: 4,
        n_features: 2,
        samples_per_client: 1,
        dirichlet_alpha: 0.5,
        noise_scale: 1.0,
        test_size: 4,
    };
    let fed = generate_general(&p, 3).unwrap();
    let props = fed.label_proportions.unwrap();
    // Var of one Dirichlet coordinate: (1/C)(1 - 1/C) / (C alpha + 1).
    let c: f64 = 4.0;
    let sd = ((1.0 / c) * (1.0 - 1.0 / c) / (c * 0.5 + 1.0) / 400.0).sqrt();
    for class in 0..4 {
        let m: f64 = props.iter().map(|p| p[class]).sum::<f64>() / 400.0;
        assert!((m - 0.25).abs() < 4.0 * sd, "class {class}: mean {m}");
    }
}

#[test]
fn marginal_dropout_frequency_matches_exact_size() {
    let (k, t, alpha) = (20, 2000, 0.3);
    let s = generate_schedule(GeneratorKind::IidRandom, k, t, alpha, RngStream::server(5, Purpose::Dropout, 0))
        .unwrap();
    let q = 6.0 / 20.0;
    let sd = (q * (1.0 - q) / t as f64).sqrt();
    for c in 0..k {
        let dropped = (0..t).filter(|&r| s.present(r).binary_search(&c).is_err()).count();
        let f = dropped as f64 / t as f64;
        assert!((f - q).abs() < 3.5 * sd, "client {c}: {f}");
    }
}

#[test]
fn copresence_rate_matches_sampling_without_replacement() {
    // Exactly m of K drop, so a pair is co-present with probability
    // (K-m)(K-m-1) / (K(K-1)), slightly below (1-alpha)^2.
    let (k, t, alpha) = (20usize, 500usize, 0.5);
    let m = 10.0;
    let expected = (k as f64 - m) * (k as f64 - m - 1.0) / (k as f64 * (k as f64 - 1.0));
    let mut rates = Vec::new();
    for seed in 0..50 {
        let s = generate_schedule(
            GeneratorKind::IidRandom,
            k,
            t,
            alpha,
            RngStream::server(seed, Purpose::Dropout, 0),
        )
        .unwrap();
        let rep = check_common_rounds(&s);
        assert!(rep.beta_hat <= rep.mean_copresence);
        rates.push(rep.mean_copresence);
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    // each seed averages 190 correlated pairs over 500 rounds; 0.01 is generous
    assert!((mean - expected).abs() < 0.01, "mean {mean} vs {expected}");
    assert!((mean - 0.25).abs() > (mean - expected).abs());
}

#[test]
fn friend_absence_matches_hypergeometric() {
    // Clusters of 4: a dropped client lacks a friend exactly when its three
    // cluster mates are among the other m-1 dropped clients.
    let p = ClusteredParams {
        n_clients: 20,
        n_clusters: 5,
        labels_per_cluster: 2,
        n_classes: 10,
        n_features: 2,
        samples_per_client: 2,
        noise_scale: 1.0,
        test_size: 10,
    };
    let friends: Vec<BTreeSet<usize>> = generate_clustered(&p, 1).unwrap().ground_truth_friends.unwrap();
    let (k, t, alpha) = (20u64, 4000usize, 0.5);
    let s = generate_schedule(GeneratorKind::IidRandom, 20, t, alpha, RngStream::server(9, Purpose::Dropout, 0))
        .unwrap();
    let misses = check_friend_presence(&s, &friends).len();
    let per_client = misses as f64 / (t as f64 * 10.0);
    // P(all 3 mates among the 9 other dropped, out of 19 others)
    let h = Hypergeometric::new(k - 1, 3, 9).unwrap();
    let expected = h.pmf(3);
    assert!((expected - binom(9, 3) / binom(19, 3)).abs() < 1e-12);
    let sd = (expected * (1.0 - expected) / (t as f64 * 10.0)).sqrt();
    // dropped clients within one round are correlated, so allow extra slack
    assert!((per_client - expected).abs() < 6.0 * sd, "{per_client} vs {expected}");

    // Probability that a given cluster is fully absent in a round.
    let whole = binom(16, 6) / binom(20, 10);
    assert!((whole - 0.04334).abs() < 5e-5);
    let absent = (0..t)
        .filter(|&r| (0..4).all(|c| s.present(r).binary_search(&c).is_err()))
        .count() as f64
        / t as f64;
    let sd = (whole * (1.0 - whole) / t as f64).sqrt();
    assert!((absent - whole).abs() < 4.0 * sd, "{absent} vs {whole}");
}
