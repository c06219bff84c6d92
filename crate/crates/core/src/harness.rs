//! End-to-end pipeline stages behind the command-line tool.
//!
//! Every artifact of a run lives under `<output_dir>/run-<config digest>/`.
//! A JSON ledger in that directory records, per stage, the content digests of
//! what it read and wrote plus a count of records read per family tag.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{
    make_schedule, reconstruct, reconstruction_error, train_denoiser, Denoiser, DenoiserConfig, NoiseSchedule,
    ReconstructionConfig,
};
use crate::encoder::{train_encoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    build_report, calibrate_threshold_with_ids, summarize_method, DetectionReport, ScoredSample, Truth,
};
use crate::params::Checkpoint;
use crate::rng::derive_seed;
use crate::synth::{build_dataset, load_manifest, DatasetManifest, DatasetReader, LabeledSample, Record, Split};

pub const SEED_ENV: &str = "RECON_OOD_SEED";

const STREAM_ENCODER: u64 = 1;
const STREAM_DENOISER: u64 = 2;
const STREAM_RECONSTRUCTION: u64 = 3;

/// Dataset sizes; the dataset seed is the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub name: String,
    pub train_per_class: usize,
    pub calibration_per_class: usize,
    pub test_id_per_class: usize,
    pub test_ood_per_family: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        let m = DatasetManifest::default();
        DatasetParams {
            name: m.name,
            train_per_class: m.train_per_class,
            calibration_per_class: m.calibration_per_class,
            test_id_per_class: m.test_id_per_class,
            test_ood_per_family: m.test_ood_per_family,
        }
    }
}

impl DatasetParams {
    pub fn manifest(&self, seed: u64) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            seed,
            train_per_class: self.train_per_class,
            calibration_per_class: self.calibration_per_class,
            test_id_per_class: self.test_id_per_class,
            test_ood_per_family: self.test_ood_per_family,
            ..DatasetManifest::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionParams {
    pub s_star: usize,
    pub n_steps: usize,
}

impl Default for ReconstructionParams {
    fn default() -> Self {
        let r = ReconstructionConfig::default();
        ReconstructionParams {
            s_star: r.s_star,
            n_steps: r.n_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetParams,
    pub encoder: EncoderConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub reconstruction: ReconstructionParams,
    pub output_dir: PathBuf,
    /// Scoring threads; 0 uses every available core. Never affects results.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            dataset: DatasetParams::default(),
            encoder: EncoderConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            reconstruction: ReconstructionParams::default(),
            output_dir: PathBuf::from("runs"),
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Applies `RECON_OOD_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Every sub-configuration checked by its own module, reported as a
    /// configuration error.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.dataset.manifest(self.seed).validate().map_err(as_config)?;
        self.encoder.validate().map_err(as_config)?;
        if self.encoder.num_classes != self.dataset.manifest(self.seed).classes.len() {
            return Err(Error::Config(format!(
                "encoder num_classes {} does not match the dataset's {} classes",
                self.encoder.num_classes,
                self.dataset.manifest(self.seed).classes.len()
            )));
        }
        self.denoiser.validate().map_err(as_config)?;
        let schedule = self.noise_schedule().map_err(as_config)?;
        self.reconstruction_config(0).validate(&schedule).map_err(as_config)?;
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn reconstruction_config(&self, seed: u64) -> ReconstructionConfig {
        ReconstructionConfig {
            s_star: self.reconstruction.s_star,
            n_steps: self.reconstruction.n_steps,
            seed,
        }
    }

    /// Everything that can change results; output location and worker count
    /// are left out.
    pub fn result_relevant_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("workers");
        }
        v
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.result_relevant_json().to_string().as_bytes())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!("run-{}", &self.digest()[..16]))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub wall_seconds: f64,
    /// Digest of every input file, keyed by path relative to the run directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Records handed out by the dataset reader, per family tag.
    pub records_read: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub config_digest: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub const LEDGER_FILE: &str = "ledger.json";

impl RunLedger {
    pub fn load_or_new(run_dir: &Path, config_digest: &str) -> Result<Self> {
        let path = run_dir.join(LEDGER_FILE);
        if !path.exists() {
            return Ok(RunLedger {
                config_digest: config_digest.to_string(),
                stages: BTreeMap::new(),
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ledger: RunLedger = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        if ledger.config_digest != config_digest {
            return Err(Error::Config(format!(
                "{} belongs to config {}, not {}",
                path.display(),
                ledger.config_digest,
                config_digest
            )));
        }
        Ok(ledger)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("ledger serializes") + "\n";
        write_file(&run_dir.join(LEDGER_FILE), text.as_bytes())
    }

    fn completed(&self, stage: &str) -> Option<&StageRecord> {
        self.stages.get(stage).filter(|r| r.status == StageStatus::Completed)
    }
}

/// File names inside a run directory.
pub mod layout {
    pub const DATA_DIR: &str = "data";
    pub const CONFIG: &str = "config.json";
    pub const ENCODER_CKPT: &str = "encoder.ckpt";
    pub const DENOISER_CKPT: &str = "denoiser.ckpt";
    pub const ENCODER_LOSS: &str = "encoder_loss.csv";
    pub const DENOISER_LOSS: &str = "denoiser_loss.csv";
    pub const SCORES: &str = "scores.csv";
    pub const CALIBRATION_SCORES: &str = "calibration_scores.csv";
    pub const MSP_SCORES: &str = "msp_scores.csv";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TABLE: &str = "report.txt";
    pub const PR_DIR: &str = "pr";
}

pub const STAGE_GEN_DATA: &str = "gen-data";
pub const STAGE_TRAIN: &str = "train";
pub const STAGE_EVALUATE: &str = "evaluate";

/// A run directory plus its ledger, bound to one configuration.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub ledger: RunLedger,
}

impl Run {
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.run_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let ledger = RunLedger::load_or_new(&dir, &config.digest())?;
        write_file(&dir.join(layout::CONFIG), config.to_json().as_bytes())?;
        Ok(Run { config, dir, ledger })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn data_dir(&self) -> PathBuf {
        self.path(layout::DATA_DIR)
    }

    fn manifest(&self) -> DatasetManifest {
        self.config.dataset.manifest(self.config.seed)
    }

    fn digests(&self, rels: &[String]) -> Result<BTreeMap<String, String>> {
        rels.iter()
            .map(|r| Ok((r.clone(), file_digest(&self.path(r))?)))
            .collect()
    }

    fn dataset_files(&self) -> Vec<String> {
        let m = self.manifest();
        let data = Path::new(layout::DATA_DIR);
        std::iter::once(m.manifest_path(data))
            .chain(Split::ALL.iter().map(|&s| m.split_path(data, s)))
            .map(|p| p.to_string_lossy().into_owned())
            .collect()
    }

    /// Fails with a stage-dependency error unless `stage` completed and every
    /// file it produced is still present with the recorded digest.
    fn require(&self, stage: &str, files: &[String]) -> Result<BTreeMap<String, String>> {
        let missing = |detail: String| Error::MissingStage {
            stage: stage.to_string(),
            detail,
        };
        let record = self
            .ledger
            .completed(stage)
            .ok_or_else(|| missing(format!("no completed `{stage}` stage in {}", self.dir.display())))?;
        let mut out = BTreeMap::new();
        for rel in files {
            let path = self.path(rel);
            if !path.exists() {
                return Err(missing(format!("{} does not exist", path.display())));
            }
            let digest = file_digest(&path)?;
            if record.outputs.get(rel) != Some(&digest) {
                return Err(missing(format!("{} changed since `{stage}` wrote it", path.display())));
            }
            out.insert(rel.clone(), digest);
        }
        Ok(out)
    }

    fn record(
        &mut self,
        stage: &str,
        started: Instant,
        inputs: BTreeMap<String, String>,
        outputs: &[String],
        records_read: BTreeMap<String, usize>,
    ) -> Result<()> {
        let record = StageRecord {
            status: StageStatus::Completed,
            wall_seconds: started.elapsed().as_secs_f64(),
            inputs,
            outputs: self.digests(outputs)?,
            records_read,
            error: None,
        };
        self.ledger.stages.insert(stage.to_string(), record);
        self.ledger.save(&self.dir)
    }

    fn record_failure(&mut self, stage: &str, started: Instant, err: &Error) -> Result<()> {
        let record = StageRecord {
            status: StageStatus::Failed,
            wall_seconds: started.elapsed().as_secs_f64(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            records_read: BTreeMap::new(),
            error: Some(err.to_string()),
        };
        self.ledger.stages.insert(stage.to_string(), record);
        self.ledger.save(&self.dir)
    }

    fn reader(&self) -> Result<DatasetReader> {
        let m = load_manifest(&self.manifest().manifest_path(&self.data_dir()))?;
        Ok(DatasetReader::open(&self.data_dir(), m))
    }
}

pub fn cmd_gen_data(run: &mut Run) -> Result<()> {
    let started = Instant::now();
    build_dataset(&run.manifest(), &run.data_dir())?;
    let outputs = run.dataset_files();
    run.record(STAGE_GEN_DATA, started, BTreeMap::new(), &outputs, BTreeMap::new())
}

fn loss_csv(rows: impl Iterator<Item = (usize, f32)>) -> String {
    let mut s = String::from("epoch,loss\n");
    for (epoch, loss) in rows {
        let _ = writeln!(s, "{epoch},{loss:.8e}");
    }
    s
}

fn samples(records: &[Record]) -> Vec<&LabeledSample> {
    records.iter().map(|r| &r.sample).collect()
}

/// Trains the encoder, then the denoiser against the frozen encoder. Reads
/// only the train and calibration splits.
pub fn cmd_train(run: &mut Run) -> Result<()> {
    let started = Instant::now();
    let inputs = run.require(STAGE_GEN_DATA, &run.dataset_files())?;
    let mut reader = run.reader()?;
    let train = reader.read(Split::Train)?;
    let held_out = reader.read(Split::Calibration)?;
    let cfg = run.config.clone();

    let trained = match train_encoder(
        &samples(&train),
        &samples(&held_out),
        &cfg.encoder,
        derive_seed(cfg.seed, STREAM_ENCODER),
    ) {
        Ok(t) => t,
        Err(e) => {
            run.record_failure(STAGE_TRAIN, started, &e)?;
            return Err(e);
        }
    };
    let curve = &trained.curve;
    let encoder_loss = loss_csv(
        std::iter::once((0, curve.initial_loss)).chain(curve.epoch_losses.iter().enumerate().map(|(i, &l)| (i + 1, l))),
    );
    trained
        .encoder
        .to_checkpoint(trained.held_out_accuracy)
        .save(&run.path(layout::ENCODER_CKPT))?;
    write_file(&run.path(layout::ENCODER_LOSS), encoder_loss.as_bytes())?;

    let schedule = cfg.noise_schedule()?;
    let (denoiser, dcurve) = train_denoiser(
        &samples(&train),
        &trained.encoder,
        &schedule,
        &cfg.denoiser,
        derive_seed(cfg.seed, STREAM_DENOISER),
    )?;
    if let Some(bad) = dcurve.epoch_losses.iter().find(|l| !l.is_finite()) {
        let e = Error::TrainingFailure(format!("denoiser loss diverged to {bad}"));
        run.record_failure(STAGE_TRAIN, started, &e)?;
        return Err(e);
    }
    denoiser
        .to_checkpoint(&schedule, &cfg.reconstruction_config(0))
        .save(&run.path(layout::DENOISER_CKPT))?;
    let denoiser_loss = loss_csv(dcurve.epoch_losses.iter().enumerate().map(|(i, &l)| (i + 1, l)));
    write_file(&run.path(layout::DENOISER_LOSS), denoiser_loss.as_bytes())?;

    let outputs: Vec<String> = [
        layout::ENCODER_CKPT,
        layout::DENOISER_CKPT,
        layout::ENCODER_LOSS,
        layout::DENOISER_LOSS,
    ]
    .map(String::from)
    .to_vec();
    let audit = reader.audit().clone();
    run.record(STAGE_TRAIN, started, inputs, &outputs, audit)
}

/// Reconstruction error of one record under the trained models.
pub fn score_record(
    encoder: &Encoder,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    cfg: &RunConfig,
    record: &Record,
) -> Result<f32> {
    let image = &record.sample.image;
    let condition = encoder.encode_image(image)?;
    let seed = derive_seed(derive_seed(cfg.seed, STREAM_RECONSTRUCTION), record.sample_id);
    let recon = reconstruct(denoiser, schedule, image, &condition, &cfg.reconstruction_config(seed))?;
    reconstruction_error(image, &recon)
}

fn score_all(
    records: &[Record],
    workers: usize,
    f: impl Fn(&Record) -> Result<f32> + Sync + Send,
) -> Result<Vec<f32>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| records.par_iter().map(&f).collect())
}

fn truth_of(sample: &LabeledSample) -> Result<Truth> {
    Truth::from_tag(&sample.family_tag)
}

fn scored(records: &[Record], errors: &[f32]) -> Result<Vec<ScoredSample>> {
    records
        .iter()
        .zip(errors)
        .map(|(r, &e)| {
            Ok(ScoredSample {
                sample_id: r.sample_id,
                truth: truth_of(&r.sample)?,
                error: e as f64,
            })
        })
        .collect()
}

pub fn scores_csv(records: &[Record], errors: &[f32]) -> String {
    let mut s = String::from("sample_id,family,error\n");
    for (r, e) in records.iter().zip(errors) {
        let _ = writeln!(s, "{},{},{:.8e}", r.sample_id, r.sample.family_tag, e);
    }
    s
}

/// Scores calibration and test splits, calibrates the threshold and writes
/// the report next to the MSP comparison.
pub fn cmd_evaluate(run: &mut Run) -> Result<()> {
    let started = Instant::now();
    let mut inputs = run.require(STAGE_GEN_DATA, &run.dataset_files())?;
    let model_files: Vec<String> = [layout::ENCODER_CKPT, layout::DENOISER_CKPT].map(String::from).to_vec();
    inputs.extend(run.require(STAGE_TRAIN, &model_files)?);

    let encoder = Encoder::from_checkpoint(&Checkpoint::load(&run.path(layout::ENCODER_CKPT))?)?;
    let denoiser = Denoiser::from_checkpoint(&Checkpoint::load(&run.path(layout::DENOISER_CKPT))?)?;
    let cfg = run.config.clone();
    let schedule = cfg.noise_schedule()?;

    let mut reader = run.reader()?;
    let calibration = reader.read(Split::Calibration)?;
    let test = reader.read(Split::Test)?;
    let score = |r: &Record| score_record(&encoder, &denoiser, &schedule, &cfg, r);
    let cal_errors = score_all(&calibration, cfg.workers, score)?;
    let test_errors = score_all(&test, cfg.workers, score)?;
    let msp = score_all(&test, cfg.workers, |r: &Record| {
        Ok(1.0 - encoder.max_softmax_probability(&r.sample.image)?)
    })?;

    let cal_pairs: Vec<(u64, f64)> = calibration
        .iter()
        .zip(&cal_errors)
        .map(|(r, &e)| (r.sample_id, e as f64))
        .collect();
    let threshold = calibrate_threshold_with_ids(&cal_pairs)?;
    let mut report = build_report(&scored(&test, &test_errors)?, &threshold)?;
    report.baselines.push(summarize_method("msp", &scored(&test, &msp)?)?);
    report.config = cfg.result_relevant_json();
    report.manifest_digest = inputs
        .get(&run.dataset_files()[0])
        .cloned()
        .unwrap_or_default();

    write_file(&run.path(layout::CALIBRATION_SCORES), scores_csv(&calibration, &cal_errors).as_bytes())?;
    write_file(&run.path(layout::SCORES), scores_csv(&test, &test_errors).as_bytes())?;
    write_file(&run.path(layout::MSP_SCORES), scores_csv(&test, &msp).as_bytes())?;
    write_file(&run.path(layout::REPORT_JSON), report.to_json().as_bytes())?;

    // Stage isolation: inputs must be byte-identical after evaluation.
    let after = run.digests(&inputs.keys().cloned().collect::<Vec<_>>())?;
    if after != inputs {
        return Err(Error::contract("evaluate modified its own inputs"));
    }
    let outputs: Vec<String> = [
        layout::CALIBRATION_SCORES,
        layout::SCORES,
        layout::MSP_SCORES,
        layout::REPORT_JSON,
    ]
    .map(String::from)
    .to_vec();
    let audit = reader.audit().clone();
    run.record(STAGE_EVALUATE, started, inputs, &outputs, audit)?;
    cmd_report(&run.path(layout::REPORT_JSON), &run.dir).map(|_| ())
}

/// Files written by [`cmd_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub pr_curves: Vec<PathBuf>,
}

pub fn load_report(path: &Path) -> Result<DetectionReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DetectionReport::from_json(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn pr_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("recall,precision\n");
    for (r, p) in points {
        let _ = writeln!(s, "{r:.12},{p:.12}");
    }
    s
}

/// Renders the table and writes one PR-curve CSV per family into `out_dir`.
pub fn cmd_report(report_json: &Path, out_dir: &Path) -> Result<ReportFiles> {
    let report = load_report(report_json)?;
    let table = out_dir.join(layout::REPORT_TABLE);
    write_file(&table, report.render_table().as_bytes())?;
    let mut pr_curves = Vec::new();
    for row in &report.families {
        let path = out_dir.join(layout::PR_DIR).join(format!("{}.csv", row.family));
        write_file(&path, pr_csv(&row.pr_curve).as_bytes())?;
        pr_curves.push(path);
    }
    Ok(ReportFiles { table, pr_curves })
}

/// `gen-data`, `train` and `evaluate` in sequence.
pub fn cmd_all(run: &mut Run) -> Result<DetectionReport> {
    cmd_gen_data(run)?;
    cmd_train(run)?;
    cmd_evaluate(run)?;
    load_report(&run.path(layout::REPORT_JSON))
}
