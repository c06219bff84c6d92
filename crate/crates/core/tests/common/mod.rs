#![allow(dead_code)]

use std::path::Path;

use recon_ood::harness::RunConfig;

/// A pipeline small enough for plumbing tests.
pub fn small_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = out.to_path_buf();
    cfg.dataset.train_per_class = 24;
    cfg.dataset.calibration_per_class = 6;
    cfg.dataset.test_id_per_class = 8;
    cfg.dataset.test_ood_per_family = 10;
    cfg.encoder.hidden = vec![32];
    cfg.encoder.embed_dim = 8;
    cfg.encoder.batch_size = 32;
    cfg.encoder.accuracy_floor = 0.0;
    cfg.denoiser.hidden = vec![32];
    cfg.denoiser.time_dim = 8;
    cfg.denoiser.epochs = 2;
    cfg.denoiser.draws_per_image = 1;
    cfg
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
