#![allow(dead_code)]

use std::path::Path;

use fedsim::data::ClusteredParams;
use fedsim::harness::config::{DataConfig, ExperimentConfig};

/// A clustered federation small enough to run in well under a second.
pub fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(0.5);
    cfg.data = DataConfig::Clustered(ClusteredParams {
        n_clients: 6,
        n_clusters: 3,
        labels_per_cluster: 2,
        n_classes: 6,
        n_features: 4,
        samples_per_client: 30,
        noise_scale: 0.8,
        test_size: 60,
    });
    cfg.model.n_features = 4;
    cfg.model.n_classes = 6;
    cfg.model.train.epochs = 3;
    cfg.model.train.batch_size = 8;
    cfg.dropout.rounds = 15;
    cfg.seeds = vec![1, 2];
    cfg.output_dir = out.to_path_buf();
    cfg
}
