//! Client datasets: clustered and Dirichlet label-skew synthetic
//! federations, MNIST IDX ingestion, and JSON persistence.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};

pub const FEDERATION_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TEST_SIZE: usize = 2000;
const MAX_PROPORTION_RETRIES: usize = 100;

/// Labeled feature matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub n_features: usize,
    pub n_classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<usize>,
}

impl ClientDataset {
    pub fn new(
        n_features: usize,
        n_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        cluster_id: Option<usize>,
    ) -> Result<Self> {
        if features.len() != labels.len() * n_features {
            return Err(Error::InvalidArgument(format!(
                "feature matrix has {} entries, expected {} x {}",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        Ok(Self {
            n_features,
            n_classes,
            features,
            labels,
            cluster_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Copy of the dataset restricted to the given rows (order preserved).
    pub fn subset(&self, indices: &[usize]) -> ClientDataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        ClientDataset {
            features,
            labels,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationData {
    pub schema_version: u32,
    pub clients: Vec<ClientDataset>,
    pub test_set: ClientDataset,
    /// Only present in the clustered setting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_friends: Option<Vec<BTreeSet<usize>>>,
    /// Per-client label proportions drawn by the Dirichlet generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_proportions: Option<Vec<Vec<f64>>>,
}

impl FederationData {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let data: FederationData = serde_json::from_str(&text)?;
        if data.schema_version != FEDERATION_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported federation schema {}", data.schema_version),
            ));
        }
        Ok(data)
    }
}

/// Parameters of the clustered generator. Cluster `c` owns the label range
/// `[c * labels_per_cluster, (c + 1) * labels_per_cluster)`; clients are
/// assigned to clusters in contiguous blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredParams {
    pub n_clients: usize,
    pub n_clusters: usize,
    pub labels_per_cluster: usize,
    pub n_classes: usize,
    pub n_features: usize,
    pub samples_per_client: usize,
    pub noise_scale: f64,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralParams {
    pub n_clients: usize,
    pub n_classes: usize,
    pub n_features: usize,
    pub samples_per_client: usize,
    pub dirichlet_alpha: f64,
    pub noise_scale: f64,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn default_test_size() -> usize {
    DEFAULT_TEST_SIZE
}

/// One Gaussian blob centre per class, each coordinate drawn from N(0, 1).
fn class_means(n_classes: usize, n_features: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n_classes)
        .map(|_| (0..n_features).map(|_| std.sample(rng)).collect())
        .collect()
}

fn sample_features(
    means: &[Vec<f64>],
    labels: &[usize],
    noise_scale: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(labels.len() * means[0].len());
    for &l in labels {
        for &m in &means[l] {
            out.push(m + noise_scale * std.sample(rng));
        }
    }
    out
}

/// Class-balanced test labels over `classes`, shuffled.
fn balanced_labels(classes: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| classes[i % classes.len()]).collect();
    labels.shuffle(rng);
    labels
}

pub fn generate_clustered(params: &ClusteredParams, seed: u64) -> Result<FederationData> {
    let ClusteredParams {
        n_clients,
        n_clusters,
        labels_per_cluster,
        n_classes,
        n_features,
        samples_per_client,
        noise_scale,
        test_size,
    } = *params;
    if n_clients == 0 || n_clusters == 0 || labels_per_cluster == 0 || n_features == 0 {
        return Err(Error::InfeasibleLayout(
            "client, cluster, label and feature counts must be positive".into(),
        ));
    }
    if n_clients % n_clusters != 0 {
        return Err(Error::InfeasibleLayout(format!(
            "{n_clusters} clusters do not divide {n_clients} clients"
        )));
    }
    if labels_per_cluster * n_clusters > n_classes {
        return Err(Error::InfeasibleLayout(format!(
            "{n_clusters} clusters x {labels_per_cluster} labels exceed {n_classes} classes"
        )));
    }
    if samples_per_client == 0 || test_size == 0 {
        return Err(Error::InfeasibleLayout("sample counts must be positive".into()));
    }
    if !(noise_scale.is_finite() && noise_scale >= 0.0) {
        return Err(Error::InfeasibleLayout(format!("noise_scale {noise_scale}")));
    }

    let means = class_means(
        n_classes,
        n_features,
        &mut RngStream::server(seed, Purpose::DataCluster, 0).rng(),
    );
    let cluster_size = n_clients / n_clusters;
    let cluster_labels =
        |c: usize| -> Vec<usize> { (c * labels_per_cluster..(c + 1) * labels_per_cluster).collect() };

    let mut clients = Vec::with_capacity(n_clients);
    for k in 0..n_clients {
        let cluster = k / cluster_size;
        let mut rng = RngStream::new(seed, Purpose::DataFeatures, k as u64, 0).rng();
        let labels = balanced_labels(&cluster_labels(cluster), samples_per_client, &mut rng);
        let features = sample_features(&means, &labels, noise_scale, &mut rng);
        clients.push(ClientDataset::new(
            n_features,
            n_classes,
            features,
            labels,
            Some(cluster),
        )?);
    }

    let used: Vec<usize> = (0..n_clusters * labels_per_cluster).collect();
    let mut rng = RngStream::server(seed, Purpose::DataTest, 0).rng();
    let test_labels = balanced_labels(&used, test_size, &mut rng);
    let test_features = sample_features(&means, &test_labels, noise_scale, &mut rng);
    let test_set = ClientDataset::new(n_features, n_classes, test_features, test_labels, None)?;

    let friends = (0..n_clients)
        .map(|k| {
            let c = k / cluster_size;
            (c * cluster_size..(c + 1) * cluster_size)
                .filter(|&j| j != k)
                .collect()
        })
        .collect();

    Ok(FederationData {
        schema_version: FEDERATION_SCHEMA_VERSION,
        clients,
        test_set,
        ground_truth_friends: Some(friends),
        label_proportions: None,
    })
}

/// Symmetric Dirichlet draw via normalised Gamma variates. Returns `None`
/// when the draw underflows to an all-zero vector.
fn dirichlet(n: usize, alpha: f64, rng: &mut impl Rng) -> Option<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).ok()?;
    let raw: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return None;
    }
    let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    p.iter().all(|v| v.is_finite()).then_some(p)
}

fn categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

pub fn generate_general(params: &GeneralParams, seed: u64) -> Result<FederationData> {
    let GeneralParams {
        n_clients,
        n_classes,
        n_features,
        samples_per_client,
        dirichlet_alpha,
        noise_scale,
        test_size,
    } = *params;
    if !(dirichlet_alpha.is_finite() && dirichlet_alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dirichlet_alpha must be positive, got {dirichlet_alpha}"
        )));
    }
    if n_clients == 0 || n_classes == 0 || n_features == 0 || samples_per_client == 0 || test_size == 0 {
        return Err(Error::InfeasibleLayout("all counts must be positive".into()));
    }

    let means = class_means(
        n_classes,
        n_features,
        &mut RngStream::server(seed, Purpose::DataCluster, 0).rng(),
    );
    let mut clients = Vec::with_capacity(n_clients);
    let mut proportions = Vec::with_capacity(n_clients);
    for k in 0..n_clients {
        let mut rng = RngStream::new(seed, Purpose::DataFeatures, k as u64, 0).rng();
        let mut attempt = 0;
        let p = loop {
            if attempt == MAX_PROPORTION_RETRIES {
                return Err(Error::DegenerateProportions(MAX_PROPORTION_RETRIES));
            }
            attempt += 1;
            if let Some(p) = dirichlet(n_classes, dirichlet_alpha, &mut rng) {
                break p;
            }
        };
        let labels: Vec<usize> = (0..samples_per_client)
            .map(|_| categorical(&p, &mut rng))
            .collect();
        let features = sample_features(&means, &labels, noise_scale, &mut rng);
        clients.push(ClientDataset::new(n_features, n_classes, features, labels, None)?);
        proportions.push(p);
    }

    let all: Vec<usize> = (0..n_classes).collect();
    let mut rng = RngStream::server(seed, Purpose::DataTest, 0).rng();
    let test_labels = balanced_labels(&all, test_size, &mut rng);
    let test_features = sample_features(&means, &test_labels, noise_scale, &mut rng);
    let test_set = ClientDataset::new(n_features, n_classes, test_features, test_labels, None)?;

    Ok(FederationData {
        schema_version: FEDERATION_SCHEMA_VERSION,
        clients,
        test_set,
        ground_truth_friends: None,
        label_proportions: Some(proportions),
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::IdxFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(path, "truncated header"))
}

/// Parses an IDX image file; returns (count, pixels per image, raw bytes).
fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(path, format!("bad image magic {magic:#010x}")));
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    let rows = read_be_u32(bytes, 8, path)? as usize;
    let cols = read_be_u32(bytes, 12, path)? as usize;
    let pixels = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * pixels {
        return Err(idx_err(
            path,
            format!("truncated: {} bytes for {n} images of {pixels} pixels", body.len()),
        ));
    }
    Ok((n, pixels, body[..n * pixels].to_vec()))
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(path, format!("bad label magic {magic:#010x}")));
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(idx_err(path, format!("truncated: {} labels for {n}", body.len())));
    }
    Ok(body[..n].to_vec())
}

/// Loads an MNIST-style IDX image/label pair with pixels scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ClientDataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (n, pixels, raw) = parse_idx_images(&images, images_path)?;
    let labels = parse_idx_labels(&labels, labels_path)?;
    if labels.len() != n {
        return Err(idx_err(
            labels_path,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    let features = raw.iter().map(|&b| b as f64 / 255.0).collect();
    let labels = labels.iter().map(|&l| l as usize).collect();
    ClientDataset::new(pixels, n_classes, features, labels, None)
}

/// Splits one labelled pool into a clustered federation: cluster `c`
/// receives only rows whose labels fall in its label range, dealt round
/// robin to the cluster's clients after a seeded shuffle.
pub fn partition_clustered(
    pool: &ClientDataset,
    test_set: ClientDataset,
    n_clients: usize,
    n_clusters: usize,
    labels_per_cluster: usize,
    samples_per_client: usize,
    seed: u64,
) -> Result<FederationData> {
    if n_clusters == 0 || n_clients % n_clusters != 0 {
        return Err(Error::InfeasibleLayout(format!(
            "{n_clusters} clusters do not divide {n_clients} clients"
        )));
    }
    if labels_per_cluster * n_clusters > pool.n_classes {
        return Err(Error::InfeasibleLayout("not enough classes for clusters".into()));
    }
    let cluster_size = n_clients / n_clusters;
    let mut clients = Vec::with_capacity(n_clients);
    for c in 0..n_clusters {
        let range = c * labels_per_cluster..(c + 1) * labels_per_cluster;
        let mut rows: Vec<usize> = (0..pool.len())
            .filter(|&i| range.contains(&pool.labels[i]))
            .collect();
        rows.shuffle(&mut RngStream::new(seed, Purpose::DataCluster, c as u64, 0).rng());
        if rows.len() < cluster_size * samples_per_client {
            return Err(Error::InfeasibleLayout(format!(
                "cluster {c} has {} rows, needs {}",
                rows.len(),
                cluster_size * samples_per_client
            )));
        }
        for m in 0..cluster_size {
            let idx: Vec<usize> = rows[m * samples_per_client..(m + 1) * samples_per_client].to_vec();
            let mut client = pool.subset(&idx);
            client.cluster_id = Some(c);
            clients.push(client);
        }
    }
    let friends = (0..n_clients)
        .map(|k| {
            let c = k / cluster_size;
            (c * cluster_size..(c + 1) * cluster_size)
                .filter(|&j| j != k)
                .collect()
        })
        .collect();
    Ok(FederationData {
        schema_version: FEDERATION_SCHEMA_VERSION,
        clients,
        test_set,
        ground_truth_friends: Some(friends),
        label_proportions: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clustered(n_clients: usize, n_clusters: usize, samples: usize) -> ClusteredParams {
        ClusteredParams {
            n_clients,
            n_clusters,
            labels_per_cluster: 2,
            n_classes: 10,
            n_features: 8,
            samples_per_client: samples,
            noise_scale: 0.5,
            test_size: 200,
        }
    }

    #[test]
    fn clustered_layout_matches_label_rule() {
        let fed = generate_clustered(&clustered(20, 5, 200), 3).unwrap();
        assert_eq!(fed.n_clients(), 20);
        for (k, c) in fed.clients.iter().enumerate() {
            let cluster = k / 4;
            assert_eq!(c.cluster_id, Some(cluster));
            assert_eq!(c.label_set(), [2 * cluster, 2 * cluster + 1].into());
        }
        let friends = fed.ground_truth_friends.as_ref().unwrap();
        assert_eq!(friends[5], [4, 6, 7].into());
        let total: usize = fed.clients.iter().map(|c| c.len()).sum();
        assert_eq!(total, 20 * 200);
    }

    #[test]
    fn singleton_clusters_have_no_friends() {
        let fed = generate_clustered(&clustered(5, 5, 50), 3).unwrap();
        assert!(fed.ground_truth_friends.unwrap().iter().all(|f| f.is_empty()));
    }

    #[test]
    fn clustered_is_deterministic() {
        let a = generate_clustered(&clustered(20, 5, 200), 11).unwrap();
        let b = generate_clustered(&clustered(20, 5, 200), 11).unwrap();
        assert_eq!(a, b);
        let c = generate_clustered(&clustered(20, 5, 200), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn clustered_rejects_bad_layout() {
        assert!(matches!(
            generate_clustered(&clustered(20, 3, 10), 0),
            Err(Error::InfeasibleLayout(_))
        ));
        let mut p = clustered(20, 5, 10);
        p.labels_per_cluster = 3;
        assert!(matches!(generate_clustered(&p, 0), Err(Error::InfeasibleLayout(_))));
    }

    #[test]
    fn test_set_is_balanced_over_used_labels() {
        let fed = generate_clustered(&clustered(20, 5, 20), 1).unwrap();
        assert_eq!(fed.test_set.len(), 200);
        assert!(fed.test_set.cluster_id.is_none());
        assert!(fed.test_set.label_histogram().iter().all(|&c| c == 20));
    }

    #[test]
    fn general_near_uniform_in_concentration_limit() {
        let p = GeneralParams {
            n_clients: 1,
            n_classes: 10,
            n_features: 4,
            samples_per_client: 200,
            dirichlet_alpha: 1e6,
            noise_scale: 0.5,
            test_size: 100,
        };
        let fed = generate_general(&p, 5).unwrap();
        let props = &fed.label_proportions.as_ref().unwrap()[0];
        assert!(props.iter().all(|&q| (q - 0.1).abs() < 0.01));
        assert!(fed.ground_truth_friends.is_none());
        assert_eq!(fed.clients[0].len(), 200);
    }

    #[test]
    fn general_rejects_nonpositive_alpha() {
        let p = GeneralParams {
            n_clients: 2,
            n_classes: 3,
            n_features: 2,
            samples_per_client: 10,
            dirichlet_alpha: 0.0,
            noise_scale: 0.5,
            test_size: 10,
        };
        assert!(generate_general(&p, 0).is_err());
    }

    fn write_idx(dir: &Path, images: usize, labels: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(images as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for i in 0..images * 4 {
            img.push((i * 17 % 256) as u8);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels as u32).to_be_bytes());
        for i in 0..labels {
            lab.push((i % 10) as u8);
        }
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_roundtrip_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 6, 6);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.n_features, 4);
        assert!(ds.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.features[1], 17.0 / 255.0);
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 6, 5);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("5 labels for 6 images"), "{err}");
    }

    #[test]
    fn idx_empty_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 2, 2);
        let empty = dir.path().join("empty");
        fs::write(&empty, []).unwrap();
        assert!(matches!(load_idx(&empty, &lp), Err(Error::IdxFormat { .. })));
        // swapped files: magic numbers do not match their role
        assert!(matches!(load_idx(&lp, &ip), Err(Error::IdxFormat { .. })));
    }

    #[test]
    fn idx_truncated_body() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 3, 3);
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn federation_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let fed = generate_clustered(&clustered(4, 2, 10), 9).unwrap();
        let path = dir.path().join("fed.json");
        fed.save_json(&path).unwrap();
        assert_eq!(FederationData::load_json(&path).unwrap(), fed);
    }

    #[test]
    fn partition_pool_into_clusters() {
        let fed = generate_clustered(&clustered(5, 5, 40), 2).unwrap();
        let mut pool = fed.clients[0].clone();
        for c in &fed.clients[1..] {
            pool.features.extend_from_slice(&c.features);
            pool.labels.extend_from_slice(&c.labels);
        }
        let part = partition_clustered(&pool, fed.test_set.clone(), 10, 5, 2, 20, 4).unwrap();
        for (k, c) in part.clients.iter().enumerate() {
            let cl = k / 2;
            assert!(c.labels.iter().all(|&l| l / 2 == cl));
            assert_eq!(c.len(), 20);
        }
    }
}
