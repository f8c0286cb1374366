//! The experiment pipelines behind each CLI subcommand. Every artifact is a
//! function of the generator config and the master seed.

use std::fs;
use std::path::{Path, PathBuf};

use lse_core::archive::{ArchiveKind, MatrixArchive, ProbeArchive, TrainingInfo};
use lse_core::geometry::{self, FairSampleConfig};
use lse_core::latentopt::{self, EditSpec, OptSettings};
use lse_core::metrics::{self, ClassReport, MiouAccumulator};
use lse_core::probes::{self, FewShotOptions, ProbeKind, ProbeWeights, SemanticPredictor, TrainSchedule, TrainedProbe};
use lse_core::rng::{derive_indexed, stream_rng};
use lse_core::{
    sample_latent, AnalyticSegmenter, FeatureGenerator, GeneratorConfig, LatentVector, SemanticMask, SyntheticGenerator,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::wire;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_ARCHIVE: i32 = 4;
pub const EXIT_IO: i32 = 5;
pub const EXIT_ARCHIVE_VERSION: i32 = 6;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] lse_core::Error),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use lse_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::InvalidConfig(_)) => EXIT_CONFIG,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Core(E::Io(_)) => EXIT_IO,
            CliError::Core(E::ArchiveVersion { .. }) => EXIT_ARCHIVE_VERSION,
            CliError::Core(E::Archive(_)) => EXIT_ARCHIVE,
            _ => EXIT_RUNTIME,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write(path, serde_json::to_vec_pretty(value)?)
}

/// Shared flags.
#[derive(Debug, Clone)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Common {
    pub fn generator_config(&self) -> CliResult<GeneratorConfig> {
        match &self.config {
            None => Ok(GeneratorConfig::default()),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                GeneratorConfig::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            }
        }
    }

    pub fn generator(&self) -> CliResult<SyntheticGenerator> {
        SyntheticGenerator::new(self.generator_config()?).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        Ok(&self.out)
    }
}

/// `desk`, `paper`, or a positive multiple of the desk schedule.
pub fn parse_scale(scale: &str) -> CliResult<TrainSchedule> {
    match scale {
        "desk" => Ok(TrainSchedule::desk()),
        "paper" => Ok(TrainSchedule::paper()),
        other => {
            let factor: f64 = other
                .parse()
                .map_err(|_| CliError::Usage(format!("--scale takes desk, paper or a number, got {other:?}")))?;
            Ok(TrainSchedule::desk().scaled(factor)?)
        }
    }
}

pub fn load_probe<G: FeatureGenerator>(path: &Path, gen: &G) -> CliResult<ProbeArchive> {
    Ok(ProbeArchive::load_for(path, gen)?)
}

pub fn train_probe(common: &Common, kind: &str, scale: &str) -> CliResult<serde_json::Value> {
    let gen = common.generator()?;
    let kind = ProbeKind::parse(kind).map_err(|e| CliError::Usage(e.to_string()))?;
    let schedule = parse_scale(scale)?;
    let seg = AnalyticSegmenter::new(&gen);
    let outcome = probes::train_full(&gen, &seg, &schedule, kind, common.seed)?;
    let out = common.out_dir()?;
    let archive = ProbeArchive::new(
        outcome.probe,
        gen.class_names(),
        TrainingInfo {
            config_hash: gen.config_hash(),
            shots: None,
            iterations: Some(outcome.iterations),
            seed: Some(common.seed),
        },
    );
    archive.save(out.join("probe.tar"))?;
    let summary = json!({
        "probe": kind.as_str(),
        "iterations": outcome.iterations,
        "samples": schedule.total_samples(),
        "final_loss": outcome.loss_curve.last(),
        "train_miou": outcome.train_miou,
        "loss_curve": outcome.loss_curve,
    });
    write_json(&out.join("training.json"), &summary)?;
    Ok(summary)
}

fn write_report(out: &Path, report: &ClassReport) -> CliResult<()> {
    write_json(&out.join("report.json"), report)?;
    write(&out.join("report.txt"), report.to_table())
}

/// `probe` is an archive path or `zero` for an untrained LSE.
pub fn eval_probe(common: &Common, probe: &str, samples: usize) -> CliResult<ClassReport> {
    let gen = common.generator()?;
    let seg = AnalyticSegmenter::new(&gen);
    let predictor = if probe == "zero" {
        TrainedProbe::Lse(ProbeWeights::for_generator(&gen))
    } else {
        load_probe(Path::new(probe), &gen)?.probe
    };
    let report = metrics::evaluate_probe(&gen, &seg, &predictor, samples, common.seed)?;
    write_report(common.out_dir()?, &report)?;
    Ok(report)
}

/// Latents and analytic masks standing in for user annotations.
pub fn annotations(gen: &SyntheticGenerator, count: usize, seed: u64) -> CliResult<Vec<(LatentVector, SemanticMask)>> {
    (0..count)
        .map(|i| {
            let z = sample_latent(gen.latent_dim(), derive_indexed(seed, "annotate", i as u64), None)?;
            let mask = gen.analytic_mask(&z)?;
            Ok((z, mask))
        })
        .collect()
}

pub fn few_shot(common: &Common, shots: usize, samples: usize) -> CliResult<serde_json::Value> {
    let gen = common.generator()?;
    probes::fewshot_schedule(shots).map_err(|e| CliError::Usage(e.to_string()))?;
    let anns = annotations(&gen, shots, common.seed)?;
    let options = FewShotOptions {
        seed: common.seed,
        ..FewShotOptions::default()
    };
    let outcome = probes::train_fewshot(&gen, &anns, shots, &options)?;
    let seg = AnalyticSegmenter::new(&gen);
    let report = metrics::evaluate_probe(&gen, &seg, &outcome.probe, samples, common.seed)?;
    let out = common.out_dir()?;
    let archive = ProbeArchive::new(
        outcome.probe,
        gen.class_names(),
        TrainingInfo {
            config_hash: gen.config_hash(),
            shots: Some(shots),
            iterations: Some(outcome.iterations),
            seed: Some(common.seed),
        },
    );
    archive.save(out.join("probe.tar"))?;
    write_report(out, &report)?;
    Ok(json!({
        "shots": shots,
        "iterations": outcome.iterations,
        "batch_size": outcome.batch_size,
        "miou": report.miou,
    }))
}

pub fn geometry(common: &Common, scale: &str, samples: usize) -> CliResult<serde_json::Value> {
    let gen = common.generator()?;
    let seg = AnalyticSegmenter::new(&gen);
    let cfg = match scale {
        "paper" => FairSampleConfig::paper(common.seed),
        "desk" => FairSampleConfig::desk(common.seed),
        other => return Err(CliError::Usage(format!("geometry --scale takes desk or paper, got {other:?}"))),
    };
    let pool = geometry::fair_sample(&gen, &seg, &cfg)?;
    let centers = geometry::class_centers(&pool)?;
    let confusion = geometry::cosine_confusion(&pool)?;
    let mut acc = MiouAccumulator::new(gen.num_classes());
    for i in 0..samples {
        let z = sample_latent(gen.latent_dim(), derive_indexed(common.seed, "eval", i as u64), None)?;
        let stack = gen.generate(&z)?;
        acc.add(&geometry::center_segment(&stack, &centers)?, &gen.analytic_mask(&z)?)?;
    }
    let report = acc.finish(gen.class_names());
    let (diag, off) = geometry::diagonal_contrast(&confusion);
    let out = common.out_dir()?;
    let depths: Vec<usize> = gen.layer_meta().iter().map(|l| l.depth).collect();
    MatrixArchive::new(ArchiveKind::Centers, centers.centers.clone(), gen.class_names(), depths.clone(), gen.config_hash())?
        .save(out.join("centers.tar"))?;
    MatrixArchive::new(ArchiveKind::Confusion, confusion.clone(), gen.class_names(), depths, gen.config_hash())?
        .save(out.join("confusion.tar"))?;
    write(&out.join("confusion.txt"), geometry::matrix_to_text(&confusion, &gen.class_names()))?;
    write_report(out, &report)?;
    Ok(json!({
        "images_used": pool.images_used,
        "t1": pool.t1,
        "t2": pool.t2,
        "center_miou": report.miou,
        "chance": 1.0 / gen.num_classes() as f64,
        "confusion_diagonal_mean": diag,
        "confusion_off_diagonal_mean": off,
    }))
}

/// Optional per-run overrides of [`OptSettings`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsOverride {
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lambda_edit: Option<f64>,
    pub lambda_p: Option<f64>,
    pub lambda_n: Option<f64>,
    pub lambda_z: Option<f64>,
    pub semantic_preservation: Option<bool>,
    pub n_init: Option<usize>,
}

impl SettingsOverride {
    pub fn apply(&self, mut s: OptSettings) -> OptSettings {
        s.iterations = self.iterations.unwrap_or(s.iterations);
        s.learning_rate = self.learning_rate.unwrap_or(s.learning_rate);
        s.lambda_edit = self.lambda_edit.unwrap_or(s.lambda_edit);
        s.lambda_p = self.lambda_p.unwrap_or(s.lambda_p);
        s.lambda_n = self.lambda_n.unwrap_or(s.lambda_n);
        s.lambda_z = self.lambda_z.unwrap_or(s.lambda_z);
        s.semantic_preservation = self.semantic_preservation.unwrap_or(s.semantic_preservation);
        s.n_init = self.n_init.unwrap_or(s.n_init);
        s
    }
}

/// One row of an editing manifest. Without `target`, a rectangle of a
/// random foreground class is painted onto the current segmentation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub seed: u64,
    /// Path of a grayscale PNG target mask, relative to the manifest.
    pub target: Option<PathBuf>,
    #[serde(default)]
    pub settings: SettingsOverride,
}

/// Paints `[y0, y1) × [x0, x1)` with `class`.
pub fn paint_rect(mask: &SemanticMask, class: u8, (y0, x0): (usize, usize), (y1, x1): (usize, usize)) -> SemanticMask {
    let mut out = mask.clone();
    for y in y0..y1.min(mask.height) {
        for x in x0..x1.min(mask.width) {
            out.labels[y * mask.width + x] = class;
        }
    }
    out
}

/// A random rectangle edit of the predictor's current segmentation.
pub fn random_edit(mask: &SemanticMask, classes: usize, seed: u64) -> SemanticMask {
    let mut rng = stream_rng(seed, "sie-edit");
    let (h, w) = (mask.height, mask.width);
    let class = rng.random_range(1..classes.max(2)) as u8;
    let (eh, ew) = (rng.random_range(h / 8..=h / 3).max(1), rng.random_range(w / 8..=w / 3).max(1));
    let (y0, x0) = (rng.random_range(0..=h - eh), rng.random_range(0..=w - ew));
    paint_rect(mask, class, (y0, x0), (y0 + eh, x0 + ew))
}

pub fn sie(common: &Common, probe: &Path, samples: usize, manifest: Option<&Path>) -> CliResult<serde_json::Value> {
    let gen = common.generator()?;
    let predictor = load_probe(probe, &gen)?.probe;
    let rows: Vec<ManifestRow> = match manifest {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let mut rows: Vec<ManifestRow> =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new("."));
            for row in &mut rows {
                if let Some(t) = &mut row.target {
                    *t = base.join(&*t);
                }
            }
            rows
        }
        None => (0..samples)
            .map(|i| ManifestRow {
                seed: derive_indexed(common.seed, "sie-run", i as u64),
                ..ManifestRow::default()
            })
            .collect(),
    };
    let out = common.out_dir()?;
    let (h, w) = gen.output_size();
    let mut records = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let z0 = sample_latent(gen.latent_dim(), derive_indexed(row.seed, "sie-latent", 0), None)?;
        let stack0 = gen.generate(&z0)?;
        let before = predictor.mask(&stack0)?;
        let target = match &row.target {
            Some(path) => {
                let bytes = fs::read(path).map_err(io_err(path))?;
                wire::png_to_mask(&bytes, h, w, gen.num_classes())?
            }
            None => random_edit(&before, gen.num_classes(), row.seed),
        };
        let settings = row.settings.apply(OptSettings::sie());
        let spec = EditSpec::Semantic { target: target.clone() };
        let result = latentopt::edit_latent(&z0, &spec, &settings, &gen, &predictor)?;
        let stack = gen.generate(&result.latent)?;
        let after = predictor.mask(&stack)?;
        let stem = format!("run_{i:03}");
        write(&out.join(format!("{stem}_before.png")), wire::mask_to_png(&before)?)?;
        write(&out.join(format!("{stem}_target.png")), wire::mask_to_png(&target)?)?;
        write(&out.join(format!("{stem}_after.png")), wire::mask_to_png(&after)?)?;
        write(&out.join(format!("{stem}_image.png")), wire::image_to_png(&stack.image)?)?;
        records.push(json!({
            "run": i,
            "seed": row.seed,
            "latent": result.latent,
            "initial_edit_loss": result.trace.edit.first(),
            "final_edit_loss": result.trace.edit.last(),
            "trace": result.trace,
            "target_miou_before": metrics::pair_miou(&target, &before, gen.num_classes())?,
            "target_miou_after": metrics::pair_miou(&target, &after, gen.num_classes())?,
        }));
    }
    let improved = records
        .iter()
        .filter(|r| r["final_edit_loss"].as_f64() < r["initial_edit_loss"].as_f64())
        .count();
    write_json(&out.join("results.json"), &records)?;
    Ok(json!({ "runs": records.len(), "improved": improved }))
}

pub const SCS_SAMPLES_PER_TARGET: usize = 3;

pub fn scs(common: &Common, probe: &Path, targets: usize) -> CliResult<serde_json::Value> {
    let gen = common.generator()?;
    let predictor = load_probe(probe, &gen)?.probe;
    let settings = OptSettings::scs();
    let out = common.out_dir()?;
    let mut target_masks = Vec::with_capacity(targets);
    let mut init_sets = Vec::with_capacity(targets);
    let mut opt_sets = Vec::with_capacity(targets);
    for t in 0..targets {
        let zt = sample_latent(gen.latent_dim(), derive_indexed(common.seed, "scs-target", t as u64), None)?;
        let target = gen.analytic_mask(&zt)?;
        let mut inits = Vec::new();
        let mut opts = Vec::new();
        for s in 0..SCS_SAMPLES_PER_TARGET {
            let seed = derive_indexed(common.seed, &format!("scs-{t}"), s as u64);
            let result = latentopt::scs_sample(&target, &settings, &gen, &predictor, seed)?;
            inits.push(predictor.mask(&gen.generate(&result.init.latent)?)?);
            let stack = gen.generate(&result.latent)?;
            let mask = predictor.mask(&stack)?;
            write(&out.join(format!("target_{t:02}_sample_{s}.png")), wire::image_to_png(&stack.image)?)?;
            opts.push(mask);
        }
        write(&out.join(format!("target_{t:02}.png")), wire::mask_to_png(&target)?)?;
        target_masks.push(target);
        init_sets.push(inits);
        opt_sets.push(opts);
    }
    let m = gen.num_classes();
    let summary = json!({
        "targets": targets,
        "samples_per_target": SCS_SAMPLES_PER_TARGET,
        "agreement_init": metrics::scs_agreement(&target_masks, &init_sets, m)?,
        "agreement_optimized": metrics::scs_agreement(&target_masks, &opt_sets, m)?,
    });
    write_json(&out.join("results.json"), &summary)?;
    Ok(summary)
}
