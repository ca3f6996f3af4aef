//! End-to-end runs: data, optional pre-training, federation, analyses, and
//! a manifest of everything written.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggkit::{
    optimal_convex_aggregation, sample_surface, segment_loss, surface_csv, trajectory_csv, ClassifierObjective,
};
use crate::config::{DatasetSource, ExperimentConfig, FpsPretrainConfig, PretrainSource};
use crate::data::{load_cifar10_binary, make_toy_dataset, TrainTest};
use crate::fedsim::{client_metrics_csv, metrics_csv, Federation, FederationOutcome, METRICS_HEADER};
use crate::ifs::{generate_archive, ArchiveReader, CodePool, FpsParams, SamplingConfig, ARCHIVE_VERSION};
use crate::nn::{read_checkpoint, write_checkpoint, ModelSpec, ModelWeights, CHECKPOINT_VERSION};
use crate::seed::{derive_rng, mix, stream};
use crate::ssl::{pretrain, PretrainConfig, PretrainOutcome};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.fedw";
pub const CLIENT_METRICS_FILE: &str = "client_metrics.csv";
pub const CODES_FILE: &str = "codes.json";
pub const ARCHIVE_FILE: &str = "pairs.fpsa";
pub const ENCODER_FILE: &str = "encoder.fedw";
pub const PRETRAIN_METRICS_FILE: &str = "pretrain.csv";
pub const LAMBDA_CSV: &str = "lambda_star.csv";
pub const LAMBDA_REPORT: &str = "lambda_star.json";
pub const SURFACE_CSV: &str = "surface.csv";
pub const SURFACE_SUMMARY: &str = "surface.json";
pub const SEGMENT_CSV: &str = "segment.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub analysis: u64,
    pub init: u64,
    pub pretrain: u64,
    pub codes: u64,
    pub pairs: u64,
}

impl Seeds {
    pub fn derive(cfg: &ExperimentConfig) -> Self {
        let m = cfg.seed;
        Seeds {
            master: m,
            analysis: cfg.analysis_seed,
            init: mix(m, &[stream::INIT]),
            pretrain: mix(m, &[stream::PRETRAIN]),
            codes: mix(m, &[stream::CODES]),
            pairs: mix(m, &[stream::PAIRS]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formats {
    pub manifest: u32,
    pub archive: u32,
    pub checkpoint: u32,
    pub metrics_header: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: String,
    pub seeds: Seeds,
    pub formats: Formats,
    pub stages: Vec<StageRecord>,
    /// Name of the stage that failed, if any.
    pub failed_stage: Option<String>,
    pub final_accuracy: Option<f64>,
    pub files: Vec<FileRecord>,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

struct Run {
    dir: PathBuf,
    files: Vec<String>,
    stages: Vec<StageRecord>,
}

impl Run {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.track(name);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, text.as_bytes())
    }

    fn track(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Run) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        match f(self) {
            Ok(v) => {
                self.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Done,
                    error: None,
                });
                Ok(v)
            }
            Err(e) => {
                self.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Failed,
                    error: Some(e.to_string()),
                });
                Err(Error::Stage {
                    stage: name.into(),
                    source: Box::new(e),
                })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub federation: Option<FederationOutcome>,
    pub pretrain: Option<PretrainOutcome>,
}

fn load_data(cfg: &ExperimentConfig) -> Result<Option<TrainTest>> {
    match &cfg.dataset {
        DatasetSource::Toy(spec) => make_toy_dataset(spec, cfg.seed).map(Some),
        DatasetSource::Cifar10 { path } => load_cifar10_binary(path).map(Some),
        DatasetSource::FpsArchive { .. } => Ok(None),
    }
}

fn pretrain_csv(out: &PretrainOutcome) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in out.epoch_losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

/// Generates a code pool and pair archive in `run.dir`, then pre-trains.
fn fps_pretrain(
    run: &mut Run,
    fps: &FpsPretrainConfig,
    side: usize,
    encoder: &ModelSpec,
    seeds: &Seeds,
) -> Result<PretrainOutcome> {
    let pool = CodePool::generate(seeds.codes, fps.codes, &SamplingConfig::default())?;
    pool.save_json(&run.dir.join(CODES_FILE))?;
    run.track(CODES_FILE);
    let params = FpsParams {
        n_iters: fps.n_iters,
        codes: fps.codes_per_image,
        augment: fps.augment,
        ..FpsParams::square(side)
    };
    let workers = if fps.workers == 0 {
        rayon::current_num_threads()
    } else {
        fps.workers
    };
    let archive = run.dir.join(ARCHIVE_FILE);
    generate_archive(&pool, fps.pairs, &params, seeds.pairs, workers, &archive)?;
    run.track(ARCHIVE_FILE);
    let training = PretrainConfig {
        seed: seeds.pretrain,
        ..fps.training.clone()
    };
    let out = pretrain(&archive, encoder, &training)?;
    write_checkpoint(&run.dir.join(ENCODER_FILE), &out.encoder)?;
    run.track(ENCODER_FILE);
    run.write(PRETRAIN_METRICS_FILE, pretrain_csv(&out).as_bytes())?;
    Ok(out)
}

fn write_manifest(run: &Run, cfg: &ExperimentConfig, final_accuracy: Option<f64>) -> Result<Manifest> {
    let mut files = Vec::new();
    for name in &run.files {
        let (bytes, sha256) = sha256_file(&run.dir.join(name))?;
        files.push(FileRecord {
            path: name.clone(),
            bytes,
            sha256,
        });
    }
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash()?,
        config: cfg.to_toml()?,
        seeds: Seeds::derive(cfg),
        formats: Formats {
            manifest: MANIFEST_VERSION,
            archive: ARCHIVE_VERSION,
            checkpoint: CHECKPOINT_VERSION,
            metrics_header: METRICS_HEADER.into(),
        },
        failed_stage: run
            .stages
            .iter()
            .find(|s| s.status == StageStatus::Failed)
            .map(|s| s.name.clone()),
        stages: run.stages.clone(),
        final_accuracy,
        files,
    };
    let path = run.dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Runs every configured stage in order. On failure the manifest still
/// records the stages that ran, the failing one, and the files written so far.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut run = Run {
        dir: dir.clone(),
        files: Vec::new(),
        stages: Vec::new(),
    };
    let mut federation = None;
    let mut pretrained = None;
    let result = pipeline(cfg, &mut run, &mut federation, &mut pretrained);
    let final_accuracy = federation.as_ref().map(|f: &FederationOutcome| f.final_eval.accuracy);
    let manifest = write_manifest(&run, cfg, final_accuracy)?;
    result?;
    Ok(RunReport {
        dir,
        manifest,
        federation,
        pretrain: pretrained,
    })
}

fn pipeline(
    cfg: &ExperimentConfig,
    run: &mut Run,
    federation: &mut Option<FederationOutcome>,
    pretrained: &mut Option<PretrainOutcome>,
) -> Result<()> {
    let seeds = Seeds::derive(cfg);

    if let DatasetSource::FpsArchive { path } = &cfg.dataset {
        let out = run.stage("pretrain", |run| {
            let header = ArchiveReader::open(path)?.header();
            let encoder = cfg.model.build(header.width as usize, 10)?.encoder()?;
            let training = match &cfg.pretrain {
                PretrainSource::Fps(f) => f.training.clone(),
                _ => PretrainConfig::default(),
            };
            let out = pretrain(
                path,
                &encoder,
                &PretrainConfig {
                    seed: seeds.pretrain,
                    ..training
                },
            )?;
            write_checkpoint(&run.dir.join(FINAL_CHECKPOINT), &out.encoder)?;
            run.track(FINAL_CHECKPOINT);
            run.write(PRETRAIN_METRICS_FILE, pretrain_csv(&out).as_bytes())?;
            Ok(out)
        })?;
        *pretrained = Some(out);
        return Ok(());
    }

    let data = run.stage("data", |_| load_data(cfg))?.expect("image dataset");
    let side = data.train.image_shape()[1];
    let spec = cfg.model.build(side, data.train.classes)?;

    let mut init = spec.init(&mut derive_rng(seeds.init, &[]));
    match &cfg.pretrain {
        PretrainSource::None => {}
        PretrainSource::Fps(fps) => {
            let out = run.stage("pretrain", |run| fps_pretrain(run, fps, side, &spec.encoder()?, &seeds))?;
            init.overlay(&out.encoder)?;
            *pretrained = Some(out);
        }
        PretrainSource::Checkpoint { path } => {
            run.stage("pretrain", |_| init.overlay(&read_checkpoint(path)?))?;
        }
    }

    let outcome = run.stage("federate", |run| {
        let mut fed = Federation::new(&spec, &data.train, &data.test, cfg.federation_config())?;
        fed.lambda_search = crate::aggkit::LambdaSearchConfig {
            seed: mix(cfg.seed, &[stream::LAMBDA]),
            ..cfg.analysis.lambda.clone()
        };
        let outcome = fed.run(init.clone())?;
        run.write(METRICS_FILE, metrics_csv(&outcome.metrics).as_bytes())?;
        write_checkpoint(&run.dir.join(FINAL_CHECKPOINT), &outcome.weights)?;
        run.track(FINAL_CHECKPOINT);
        if cfg.analysis.decomposition {
            run.write(CLIENT_METRICS_FILE, client_metrics_csv(&outcome.metrics).as_bytes())?;
        }
        Ok(outcome)
    })?;

    let a = &cfg.analysis;
    if a.lambda_star || a.surface || a.segment {
        run.stage("analyze", |run| {
            let models: Vec<ModelWeights> = outcome.last_local.iter().map(|l| l.weights.clone()).collect();
            let sizes: Vec<usize> = outcome.last_local.iter().map(|l| l.size).collect();
            analyze(run, cfg, &spec, &data, &models, &sizes)
        })?;
    }
    *federation = Some(outcome);
    Ok(())
}

fn analyze(
    run: &mut Run,
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    data: &TrainTest,
    models: &[ModelWeights],
    sizes: &[usize],
) -> Result<()> {
    let a = &cfg.analysis;
    if models.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "analyses need ≥ 2 local models from the last round, have {}",
            models.len()
        )));
    }
    let objective = ClassifierObjective { spec, data: &data.test };
    let m = models.len();
    if a.lambda_star {
        let lambda_cfg = crate::aggkit::LambdaSearchConfig {
            seed: mix(cfg.analysis_seed, &[stream::ANALYSIS, 0]),
            ..a.lambda.clone()
        };
        let search = optimal_convex_aggregation(models, sizes, &objective, &lambda_cfg)?;
        log::warn!("{}", search.report.warning);
        run.write(LAMBDA_CSV, trajectory_csv(&search.report, m).as_bytes())?;
        run.write_json(LAMBDA_REPORT, &search.report)?;
    }
    if a.surface {
        let mut rng = derive_rng(cfg.analysis_seed, &[stream::ANALYSIS, 1]);
        let surface = sample_surface(models, a.surface_samples, &objective, &mut rng)?;
        run.write(SURFACE_CSV, surface_csv(&surface, m).as_bytes())?;
        run.write_json(
            SURFACE_SUMMARY,
            &serde_json::json!({
                "samples": surface.samples.len(),
                "mean_loss": surface.mean_loss,
                "mean_accuracy": surface.mean_accuracy,
                "ci95_loss": [surface.ci95.0, surface.ci95.1],
            }),
        )?;
    }
    if a.segment {
        // The two largest participants.
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&x, &y| sizes[y].cmp(&sizes[x]).then(x.cmp(&y)));
        let profile = segment_loss(&models[order[0]], &models[order[1]], a.segment_steps, &objective)?;
        let mut csv = String::from("t,loss,acc\n");
        for p in profile {
            csv.push_str(&format!("{},{},{}\n", p.t, p.loss, p.accuracy));
        }
        run.write(SEGMENT_CSV, csv.as_bytes())?;
    }
    Ok(())
}

/// Runs the enabled post-hoc analyses on externally supplied client models,
/// evaluating on the configured dataset's test split. Returns the files
/// written to `dir`.
pub fn analyze_checkpoints(
    cfg: &ExperimentConfig,
    models: &[ModelWeights],
    sizes: &[usize],
    dir: &Path,
) -> Result<Vec<String>> {
    let data = load_data(cfg)?.ok_or_else(|| Error::Config("analyses need a labelled dataset source".into()))?;
    let spec = cfg.model.build(data.train.image_shape()[1], data.train.classes)?;
    for m in models {
        spec.zeros().ensure_aligned(m)?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut run = Run {
        dir: dir.to_path_buf(),
        files: Vec::new(),
        stages: Vec::new(),
    };
    analyze(&mut run, cfg, &spec, &data, models, sizes)?;
    Ok(run.files)
}

impl ExperimentConfig {
    /// Federation settings with the experiment seed filled in.
    pub fn federation_config(&self) -> crate::fedsim::FederationConfig {
        crate::fedsim::FederationConfig {
            seed: self.seed,
            ..self.federation.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verification {
    pub checked: usize,
    pub problems: Vec<String>,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Re-hashes every listed file and flags unlisted files in the directory.
pub fn verify_manifest(dir: &Path) -> Result<Verification> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut problems = Vec::new();
    let mut listed = BTreeSet::new();
    for f in &manifest.files {
        listed.insert(f.path.clone());
        let p = dir.join(&f.path);
        if !p.exists() {
            problems.push(format!("{}: missing", f.path));
            continue;
        }
        let (bytes, sha) = sha256_file(&p)?;
        if bytes != f.bytes || sha != f.sha256 {
            problems.push(format!("{}: digest mismatch", f.path));
        }
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name != MANIFEST_FILE && !listed.contains(&name) {
            problems.push(format!("{name}: not listed in manifest"));
        }
    }
    Ok(Verification {
        checked: manifest.files.len(),
        problems,
    })
}
