//! Dual encoder: an MLP image tower and a learnable per-class table standing in
//! for the text tower, aligned with a symmetric contrastive objective.
//!
//! Both towers emit L2-normalized vectors. Zero-shot classification picks the
//! class whose embedding has the highest cosine similarity with the image.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::params::{AdamConfig, Checkpoint, ParamId, ParamStore};
use crate::rng::rng_from;
use crate::synth::{ImageGrid, LabeledSample, IMAGE_PIXELS};
use crate::tensor::Tensor;

const TOWER_PREFIX: &str = "encoder.image";
const CLASS_TABLE: &str = "encoder.class_table";
const LOG_TEMPERATURE: &str = "encoder.log_temperature";

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Normalizes `v` to unit length.
    pub fn normalized(v: &[f32]) -> Result<Self> {
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::domain("cannot normalize a zero or non-finite vector"));
        }
        Ok(EmbeddingVector(v.iter().map(|&x| (x as f64 / norm) as f32).collect()))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
    }

    /// Cosine similarity; both vectors are unit-norm so this is a dot product.
    pub fn cosine(&self, other: &EmbeddingVector) -> f32 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>() as f32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub temperature_init: f32,
    /// Held-out zero-shot accuracy below this fails training.
    pub accuracy_floor: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 32,
            hidden: vec![128, 64],
            num_classes: 4,
            batch_size: 64,
            epochs: 10,
            learning_rate: 3e-3,
            temperature_init: 0.07,
            accuracy_floor: 0.95,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("encoder needs at least two classes".into()));
        }
        if self.batch_size < 2 || self.epochs == 0 {
            return Err(Error::Config("encoder batch size must be ≥ 2 and epochs ≥ 1".into()));
        }
        if !(self.temperature_init > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.accuracy_floor) {
            return Err(Error::Config("accuracy floor must lie in [0, 1]".into()));
        }
        AdamConfig::with_lr(self.learning_rate)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![IMAGE_PIXELS];
        w.extend(&self.hidden);
        w.push(self.embed_dim);
        w
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    store: ParamStore,
    tower: Mlp,
    class_table: ParamId,
    log_temperature: ParamId,
    embed_dim: usize,
    num_classes: usize,
}

impl Encoder {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(seed, 0xE1);
        let mut store = ParamStore::new();
        let tower = Mlp::init(&mut store, TOWER_PREFIX, &cfg.widths(), &mut rng)?;
        let table: Vec<f32> = (0..cfg.num_classes * cfg.embed_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let class_table = store.add(CLASS_TABLE, Tensor::matrix(cfg.num_classes, cfg.embed_dim, table)?)?;
        let log_temperature = store.add(LOG_TEMPERATURE, Tensor::scalar(cfg.temperature_init.ln()))?;
        Ok(Encoder {
            store,
            tower,
            class_table,
            log_temperature,
            embed_dim: cfg.embed_dim,
            num_classes: cfg.num_classes,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn temperature(&self) -> f32 {
        self.store.value(self.log_temperature).data()[0].exp()
    }

    /// Normalized image embeddings for a batch, `B×d`.
    pub fn image_embeddings(&self, g: &mut Graph, images: &[&ImageGrid]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(images.len() * IMAGE_PIXELS);
        for img in images {
            data.extend_from_slice(img.pixels());
        }
        let x = g.input(Tensor::matrix(images.len(), IMAGE_PIXELS, data)?);
        let h = self.tower.forward(g, &self.store, x)?;
        g.l2_normalize_rows(h)
    }

    /// Normalized class embeddings, `K×d`.
    pub fn class_embeddings(&self, g: &mut Graph) -> Result<NodeId> {
        let t = g.param(&self.store, self.class_table);
        g.l2_normalize_rows(t)
    }

    /// `1/temperature` as a single-element node.
    fn inverse_temperature(&self, g: &mut Graph) -> NodeId {
        let lt = g.param(&self.store, self.log_temperature);
        let neg = g.scale(lt, -1.0);
        g.exp(neg)
    }

    pub fn encode_image(&self, image: &ImageGrid) -> Result<EmbeddingVector> {
        Ok(self.encode_images(&[image])?.remove(0))
    }

    pub fn encode_images(&self, images: &[&ImageGrid]) -> Result<Vec<EmbeddingVector>> {
        let mut g = Graph::new();
        let e = self.image_embeddings(&mut g, images)?;
        let v = g.value(e);
        Ok((0..v.rows()).map(|i| EmbeddingVector(v.row(i).to_vec())).collect())
    }

    pub fn encode_class(&self, class_id: usize) -> Result<EmbeddingVector> {
        if class_id >= self.num_classes {
            return Err(Error::domain(format!(
                "class id {class_id} outside [0, {})",
                self.num_classes
            )));
        }
        let row = self.store.value(self.class_table).row(class_id);
        EmbeddingVector::normalized(row)
    }

    /// Cosine similarity of the image with every class embedding.
    pub fn similarities(&self, image: &ImageGrid) -> Result<Vec<f32>> {
        let img = self.encode_image(image)?;
        (0..self.num_classes)
            .map(|k| Ok(img.cosine(&self.encode_class(k)?)))
            .collect()
    }

    pub fn zero_shot_classify(&self, image: &ImageGrid) -> Result<(usize, Vec<f32>)> {
        let sims = self.similarities(image)?;
        Ok((argmax_lowest(&sims), sims))
    }

    /// Maximum softmax probability over temperature-scaled similarities.
    pub fn max_softmax_probability(&self, image: &ImageGrid) -> Result<f32> {
        let sims = self.similarities(image)?;
        let inv_t = 1.0 / self.temperature() as f64;
        let logits: Vec<f64> = sims.iter().map(|&s| s as f64 * inv_t).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        Ok((1.0 / z) as f32)
    }

    /// Records the contrastive loss of `batch` on `g`.
    pub fn contrastive_loss_node(&self, g: &mut Graph, batch: &[&LabeledSample]) -> Result<NodeId> {
        let class_ids = batch_class_ids(batch, self.num_classes)?;
        let images: Vec<&ImageGrid> = batch.iter().map(|s| &s.image).collect();
        let img = self.image_embeddings(g, &images)?;
        let table = self.class_embeddings(g)?;
        let inv_t = self.inverse_temperature(g);
        info_nce(g, img, table, &class_ids, inv_t)
    }

    pub fn contrastive_loss(&self, batch: &[&LabeledSample]) -> Result<f32> {
        let mut g = Graph::new();
        let loss = self.contrastive_loss_node(&mut g, batch)?;
        g.value(loss).item()
    }

    /// Fraction of samples whose zero-shot class matches the label.
    pub fn zero_shot_accuracy(&self, samples: &[&LabeledSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::contract("accuracy of an empty set"));
        }
        let mut correct = 0;
        for s in samples {
            if self.zero_shot_classify(&s.image)?.0 as i32 == s.class_id {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }

    pub fn to_checkpoint(&self, zero_shot_accuracy: f64) -> Checkpoint {
        let mut c = self.store.to_checkpoint();
        c.set_meta("embed_dim", self.embed_dim as f32);
        c.set_meta("num_classes", self.num_classes as f32);
        c.set_meta("temperature", self.temperature());
        c.set_meta("zero_shot_accuracy", zero_shot_accuracy as f32);
        for (i, &w) in self.tower.widths().iter().enumerate() {
            c.set_meta(&format!("width.{i}"), w as f32);
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ckpt.meta(k)
                .ok_or_else(|| Error::format(format!("encoder checkpoint lacks `{k}`")))
        };
        let embed_dim = meta("embed_dim")? as usize;
        let num_classes = meta("num_classes")? as usize;
        let widths: Vec<usize> = (0..)
            .map_while(|i| ckpt.meta(&format!("width.{i}")))
            .map(|w| w as usize)
            .collect();
        let mut store = ParamStore::new();
        for (name, t) in &ckpt.records {
            if !name.starts_with("meta.") {
                store.add(name.clone(), t.clone())?;
            }
        }
        let tower = Mlp::bind(&store, TOWER_PREFIX, &widths)?;
        let find = |n: &str| store.id_of(n).ok_or_else(|| Error::format(format!("missing `{n}`")));
        Ok(Encoder {
            class_table: find(CLASS_TABLE)?,
            log_temperature: find(LOG_TEMPERATURE)?,
            tower,
            store,
            embed_dim,
            num_classes,
        })
    }
}

fn batch_class_ids(batch: &[&LabeledSample], num_classes: usize) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(batch.len());
    for s in batch {
        if s.class_id < 0 || s.class_id as usize >= num_classes {
            return Err(Error::contract(format!(
                "contrastive batch holds a sample with class id {} (tag `{}`)",
                s.class_id, s.family_tag
            )));
        }
        ids.push(s.class_id as usize);
    }
    Ok(ids)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_lowest(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Symmetric cross-entropy over the `B×B` matrix of image-to-caption
/// similarities, where sample `j`'s caption is its class embedding. Samples
/// sharing a class are all treated as positives, with equal weight.
pub fn info_nce(
    g: &mut Graph,
    image_emb: NodeId,
    class_emb: NodeId,
    class_ids: &[usize],
    inverse_temperature: NodeId,
) -> Result<NodeId> {
    let b = class_ids.len();
    if b < 2 {
        return Err(Error::contract("contrastive batch needs at least two samples"));
    }
    if class_ids.iter().all(|&c| c == class_ids[0]) {
        return Err(Error::contract("contrastive batch needs at least two distinct classes"));
    }
    let captions = g.gather_rows(class_emb, class_ids)?;
    let captions_t = g.transpose(captions)?;
    let sims = g.matmul(image_emb, captions_t)?;
    let logits = g.mul_scalar(sims, inverse_temperature)?;
    let logits_t = g.transpose(logits)?;

    let mut targets = vec![0.0f32; b * b];
    for i in 0..b {
        let same = class_ids.iter().filter(|&&c| c == class_ids[i]).count() as f32;
        for j in 0..b {
            if class_ids[i] == class_ids[j] {
                targets[i * b + j] = 1.0 / same;
            }
        }
    }
    let targets = Tensor::matrix(b, b, targets)?;
    let image_to_text = g.soft_cross_entropy(logits, targets.clone())?;
    let text_to_image = g.soft_cross_entropy(logits_t, targets)?;
    let sum = g.add(image_to_text, text_to_image)?;
    Ok(g.scale(sum, 0.5))
}

/// Mean contrastive loss at the start of training and after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub initial_loss: f32,
    pub epoch_losses: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainedEncoder {
    pub encoder: Encoder,
    pub curve: TrainingCurve,
    pub held_out_accuracy: f64,
}

/// Trains on `train` (ID samples only) and checks zero-shot accuracy on
/// `held_out` against the configured floor.
pub fn train_encoder(
    train: &[&LabeledSample],
    held_out: &[&LabeledSample],
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<TrainedEncoder> {
    if train.iter().chain(held_out).any(|s| !s.is_id()) {
        return Err(Error::contract("encoder training data must be in-distribution only"));
    }
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::contract("encoder training needs non-empty train and held-out sets"));
    }
    let mut encoder = Encoder::init(cfg, seed)?;
    let adam = AdamConfig::with_lr(cfg.learning_rate);

    let epoch_batches = |epoch: usize| -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from(seed, 0xE100 + epoch as u64));
        order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
    };
    let usable = |idx: &[usize]| {
        idx.len() >= 2 && idx.iter().any(|&i| train[i].class_id != train[idx[0]].class_id)
    };

    let mut initial = Vec::new();
    for idx in epoch_batches(0).iter().filter(|b| usable(b)) {
        let batch: Vec<&LabeledSample> = idx.iter().map(|&i| train[i]).collect();
        initial.push(encoder.contrastive_loss(&batch)?);
    }

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut losses = Vec::new();
        for idx in epoch_batches(epoch).iter().filter(|b| usable(b)) {
            let batch: Vec<&LabeledSample> = idx.iter().map(|&i| train[i]).collect();
            let mut g = Graph::new();
            let loss = encoder.contrastive_loss_node(&mut g, &batch)?;
            losses.push(g.value(loss).item()?);
            g.backward(loss, &mut encoder.store)?;
            encoder.store.adam_step(&adam)?;
        }
        epoch_losses.push(mean(&losses));
    }

    let held_out_accuracy = encoder.zero_shot_accuracy(held_out)?;
    if held_out_accuracy < cfg.accuracy_floor {
        return Err(Error::TrainingFailure(format!(
            "encoder zero-shot accuracy {:.4} below floor {:.4}",
            held_out_accuracy, cfg.accuracy_floor
        )));
    }
    Ok(TrainedEncoder {
        encoder,
        curve: TrainingCurve {
            initial_loss: mean(&initial),
            epoch_losses,
        },
        held_out_accuracy,
    })
}

fn mean(v: &[f32]) -> f32 {
    if v.is_empty() {
        return f32::NAN;
    }
    (v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::synth::{render_class, ID_TAG};

    fn sample(class_id: usize, seed: u64) -> LabeledSample {
        LabeledSample {
            image: render_class(class_id, seed).unwrap(),
            class_id: class_id as i32,
            family_tag: ID_TAG.into(),
        }
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            hidden: vec![16, 8],
            embed_dim: 6,
            ..Default::default()
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let enc = Encoder::init(&EncoderConfig::default(), 3).unwrap();
        let img = render_class(2, 11).unwrap();
        let a = enc.encode_image(&img).unwrap();
        assert_eq!(a, enc.encode_image(&img).unwrap());
        assert_eq!(a.dim(), 32);
        assert!((a.norm() - 1.0).abs() < 1e-5);
        for k in 0..4 {
            let c = enc.encode_class(k).unwrap();
            assert!((c.norm() - 1.0).abs() < 1e-5);
            assert_eq!(c, enc.encode_class(k).unwrap());
        }
        assert!(matches!(enc.encode_class(4), Err(Error::Domain(_))));
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax_lowest(&[0.2, 0.9, 0.1, 0.0]), 1);
        assert_eq!(argmax_lowest(&[0.1, 0.7, 0.7, 0.2]), 1);
        let s = [0.3f32, -0.2, 0.8, 0.79];
        let scaled: Vec<f32> = s.iter().map(|v| v * 37.5).collect();
        assert_eq!(argmax_lowest(&s), argmax_lowest(&scaled));
    }

    #[test]
    fn info_nce_matches_hand_softmax() {
        // Image i equals its own caption and is orthogonal to the other one,
        // so each row of logits is [1/t, 0] up to ordering.
        let t = 0.5f32;
        let mut g = Graph::new();
        let img = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let table = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let inv_t = g.input(Tensor::scalar(1.0 / t));
        let loss = info_nce(&mut g, img, table, &[0, 1], inv_t).unwrap();
        let e = (1.0f64 / t as f64).exp();
        let expected = -(e / (e + 1.0)).ln();
        assert!((g.value(loss).item().unwrap() as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn info_nce_uniform_logits_is_log_b() {
        let b = 6;
        let mut g = Graph::new();
        let img = g.input(Tensor::full(&[b, 3], 0.5));
        let table = g.input(Tensor::full(&[3, 3], 0.5));
        let inv_t = g.input(Tensor::scalar(4.0));
        let ids = [0, 1, 2, 0, 1, 2];
        let loss = info_nce(&mut g, img, table, &ids, inv_t).unwrap();
        assert!((g.value(loss).item().unwrap() as f64 - (b as f64).ln()).abs() < 1e-5);
    }

    #[test]
    fn contrastive_loss_is_permutation_invariant() {
        let enc = Encoder::init(&EncoderConfig::default(), 1).unwrap();
        let samples: Vec<LabeledSample> = (0..8).map(|i| sample(i % 4, i as u64)).collect();
        let fwd: Vec<&LabeledSample> = samples.iter().collect();
        let rev: Vec<&LabeledSample> = samples.iter().rev().collect();
        let a = enc.contrastive_loss(&fwd).unwrap();
        let b = enc.contrastive_loss(&rev).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn degenerate_batch_is_rejected() {
        let enc = Encoder::init(&EncoderConfig::default(), 1).unwrap();
        let s = [sample(1, 0), sample(1, 1)];
        let batch: Vec<&LabeledSample> = s.iter().collect();
        assert!(matches!(enc.contrastive_loss(&batch), Err(Error::Contract(_))));
        assert!(matches!(enc.contrastive_loss(&batch[..1]), Err(Error::Contract(_))));
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let enc = Encoder::init(&small_cfg(), 5).unwrap();
        let s = [sample(0, 1), sample(1, 2), sample(2, 3), sample(0, 4)];
        let batch: Vec<&LabeledSample> = s.iter().collect();
        let mut g = Graph::new();
        let loss = enc.contrastive_loss_node(&mut g, &batch).unwrap();
        let report = check_gradients(&g, loss, enc.params(), 200, 1e-3, 7).unwrap();
        assert!(report.coords.len() >= 100);
        assert!(report.max_rel_error() < 1e-3, "{:?}", report.failures(1e-3));
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let enc = Encoder::init(&small_cfg(), 2).unwrap();
        let back = Encoder::from_checkpoint(&enc.to_checkpoint(0.5)).unwrap();
        let img = render_class(3, 9).unwrap();
        assert_eq!(enc.encode_image(&img).unwrap(), back.encode_image(&img).unwrap());
        assert_eq!(enc.temperature(), back.temperature());
    }

    #[test]
    fn training_rejects_ood_samples() {
        let mut ood = sample(0, 0);
        ood.family_tag = "ood:ring".into();
        ood.class_id = -1;
        let ok = sample(1, 1);
        let r = train_encoder(&[&ood, &ok], &[&ok], &small_cfg(), 0);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
