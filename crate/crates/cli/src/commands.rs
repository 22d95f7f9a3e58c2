//! One function per subcommand; `main` only parses arguments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pgm_core::diffusion::{train_diffusion, Denoiser};
use pgm_core::guidance::{
    ablate, capture, Arm, ArmReport, InitMode, Models, Pipeline, GRADIENT_ARMS, INIT_ARMS,
    TRACKING_ARMS,
};
use pgm_core::motion::compute_metrics;
use pgm_core::motion::io::{motion_from_jsonl_tagged, motion_to_jsonl_tagged};
use pgm_core::nn::{load_checkpoint, save_checkpoint};
use pgm_core::synth::dataset::{generate_dataset, Split};
use pgm_core::synth::{read_dataset, write_dataset, Dataset, Sample};
use pgm_core::vae::{train_vae, VaeModel};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::report::{
    ablation_csv, directional_checks, published_points, write_json, AblationTable, CaptureReport,
    EvalReport, TrackSummary, ABLATION_SCHEMA, CAPTURE_SCHEMA, EVAL_SCHEMA,
};

fn tagged(mut meta: BTreeMap<String, String>, cfg: &PipelineConfig) -> BTreeMap<String, String> {
    meta.extend(cfg.provenance());
    meta
}

fn required(path: Option<&Path>, fallback: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    path.map(Path::to_path_buf)
        .or_else(|| fallback.clone())
        .ok_or_else(|| {
            CliError::Config(format!(
                "paths.{what}: no path given on the command line or in the config"
            ))
        })
}

fn existing(path: PathBuf, what: &str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Config(format!(
            "paths.{what}: {} does not exist",
            path.display()
        )))
    }
}

pub fn load_dataset(cfg: &PipelineConfig, path: Option<&Path>) -> CliResult<Dataset> {
    let path = existing(required(path, &cfg.paths.dataset, "dataset")?, "dataset")?;
    let ds = read_dataset(&path).map_err(CliError::data)?;
    cfg.check_provenance(&format!("dataset {}", path.display()), &ds.provenance)?;
    Ok(ds)
}

pub fn load_vae(cfg: &PipelineConfig, path: Option<&Path>) -> CliResult<VaeModel> {
    let path = existing(required(path, &cfg.paths.vae, "vae")?, "vae")?;
    let (store, meta) = load_checkpoint(&path).map_err(CliError::model)?;
    cfg.check_provenance(&format!("checkpoint {}", path.display()), &meta)?;
    VaeModel::from_store(store, &meta).map_err(CliError::model)
}

fn load_denoiser(cfg: &PipelineConfig, path: &Path) -> CliResult<Denoiser> {
    let path = existing(path.to_path_buf(), "denoiser")?;
    let (store, meta) = load_checkpoint(&path).map_err(CliError::model)?;
    cfg.check_provenance(&format!("checkpoint {}", path.display()), &meta)?;
    Denoiser::from_store(store, &meta).map_err(CliError::model)
}

pub fn gen_data(cfg: &PipelineConfig, out: &Path) -> CliResult<Dataset> {
    let mut ds = generate_dataset(&cfg.data).map_err(CliError::data)?;
    ds.provenance = cfg.provenance();
    write_dataset(out, &ds).map_err(CliError::runtime)?;
    log::info!("wrote {} sequences to {}", ds.samples.len(), out.display());
    Ok(ds)
}

pub fn train_vae_cmd(cfg: &PipelineConfig, dataset: Option<&Path>, out: &Path) -> CliResult<()> {
    let ds = load_dataset(cfg, dataset)?;
    let (model, log) = train_vae(&ds, &cfg.vae).map_err(CliError::runtime)?;
    let last = log.epochs.last().map(|e| e.total).unwrap_or(f64::NAN);
    log::info!(
        "VAE trained for {} epochs, final loss {last:.4}",
        log.epochs.len()
    );
    save_checkpoint(out, &model.store, &tagged(model.meta(), cfg)).map_err(CliError::runtime)
}

/// Train a denoiser; `init` overrides the config's noise initialization.
pub fn train_diffusion_cmd(
    cfg: &PipelineConfig,
    dataset: Option<&Path>,
    vae: Option<&Path>,
    init: Option<InitMode>,
    out: &Path,
) -> CliResult<()> {
    let ds = load_dataset(cfg, dataset)?;
    let model = load_vae(cfg, vae)?;
    let mut dcfg = cfg.diffusion.clone();
    if let Some(init) = init {
        dcfg.init = init;
    }
    // standard-init arms are only ever run untracked
    if dcfg.init == InitMode::Standard {
        dcfg.p_phys = 0.0;
    }
    let tracker = (dcfg.p_phys > 0.0).then_some(&cfg.tracker);
    let (den, log) = train_diffusion(&ds, &model, tracker, &dcfg).map_err(CliError::runtime)?;
    let last = log.epochs.last().map(|e| e.total).unwrap_or(f64::NAN);
    log::info!(
        "denoiser trained for {} epochs, final loss {last:.4}",
        log.epochs.len()
    );
    save_checkpoint(out, &den.store, &tagged(den.meta(), cfg)).map_err(CliError::runtime)
}

pub struct CaptureArgs<'a> {
    pub vae: Option<&'a Path>,
    pub denoiser: Option<&'a Path>,
    pub observations: Option<&'a Path>,
    pub sequence: usize,
    pub arm: Option<&'a str>,
    pub out: &'a Path,
}

/// Diagnostics land next to the motion file.
pub fn diagnostics_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".diagnostics.json");
    out.with_file_name(name)
}

pub fn capture_cmd(cfg: &PipelineConfig, args: &CaptureArgs) -> CliResult<CaptureReport> {
    let ds = load_dataset(cfg, args.observations)?;
    let sample = ds.samples.get(args.sequence).ok_or_else(|| {
        CliError::Data(format!(
            "sequence {} out of range ({} available)",
            args.sequence,
            ds.samples.len()
        ))
    })?;
    let vae = load_vae(cfg, args.vae)?;
    let (arm_name, gcfg) = match args.arm {
        Some(name) => {
            let arm: Arm = name.parse().map_err(CliError::config)?;
            (arm.name, arm.config)
        }
        None => ("config".to_string(), cfg.guidance.clone()),
    };
    gcfg.validate()
        .map_err(|e| CliError::Config(format!("guidance: {e}")))?;
    let denoiser = if gcfg.steps > 0 {
        let fallback = match gcfg.init {
            InitMode::Latent => &cfg.paths.latent_denoiser,
            InitMode::Standard => &cfg.paths.standard_denoiser,
        };
        Some(load_denoiser(
            cfg,
            &required(args.denoiser, fallback, "denoiser")?,
        )?)
    } else {
        None
    };
    let pipe = Pipeline {
        vae: &vae,
        skeleton: &ds.skeleton,
        denoiser: denoiser.as_ref(),
        tracker: Some(&cfg.tracker),
    };
    let res = capture(
        &pipe,
        &sample.observations,
        &ds.camera,
        ds.fps,
        &gcfg,
        cfg.seed,
    )
    .map_err(CliError::runtime)?;
    let skeleton = ds
        .skeleton
        .with_scales(&res.beta)
        .map_err(CliError::runtime)?;
    let text = motion_to_jsonl_tagged(&skeleton, &res.motion, &cfg.provenance())
        .map_err(CliError::runtime)?;
    fs::write(args.out, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", args.out.display())))?;
    let report = CaptureReport {
        schema: CAPTURE_SCHEMA.into(),
        provenance: cfg.provenance(),
        arm: arm_name,
        sequence: args.sequence,
        beta: res.beta.clone(),
        tracked: res.track.as_ref().map(|t| TrackSummary {
            success: t.success,
            frames_succeeded: t.frames_succeeded(),
            frames: t.success_mask.len(),
        }),
        diagnostics: res.diagnostics.clone(),
    };
    write_json(&diagnostics_path(args.out), &report)?;
    Ok(report)
}

fn read_tagged_motion(
    path: &Path,
) -> CliResult<(
    pgm_core::motion::Skeleton,
    pgm_core::motion::Motion,
    BTreeMap<String, String>,
)> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    motion_from_jsonl_tagged(&text).map_err(CliError::data)
}

/// Metrics of `pred` against `gt`, measured on the ground-truth skeleton.
/// Provenance is the config's when one was given, else the prediction's.
pub fn eval_cmd(
    cfg: Option<&PipelineConfig>,
    pred: &Path,
    gt: &Path,
    out: &Path,
) -> CliResult<EvalReport> {
    let (_, pm, ptags) = read_tagged_motion(pred)?;
    let (gskel, gm, _) = read_tagged_motion(gt)?;
    let metrics = compute_metrics(&pm, &gm, &gskel).map_err(CliError::data)?;
    let report = EvalReport {
        schema: EVAL_SCHEMA.into(),
        provenance: cfg.map_or(ptags, PipelineConfig::provenance),
        metrics,
    };
    write_json(out, &report)?;
    Ok(report)
}

pub struct AblateArgs<'a> {
    pub dataset: Option<&'a Path>,
    pub vae: Option<&'a Path>,
    pub latent: Option<&'a Path>,
    pub standard: Option<&'a Path>,
    pub arms: &'a [String],
    pub out: &'a Path,
}

/// Every named ablation arm, in table order without repeats.
pub fn default_arms() -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for a in INIT_ARMS.iter().chain(&TRACKING_ARMS).chain(&GRADIENT_ARMS) {
        if !out.iter().any(|x| x == a) {
            out.push(a.to_string());
        }
    }
    out
}

pub fn ablation_table(cfg: &PipelineConfig, rows: Vec<ArmReport>) -> AblationTable {
    AblationTable {
        schema: ABLATION_SCHEMA.into(),
        provenance: cfg.provenance(),
        checks: directional_checks(&rows),
        published: published_points(&rows),
        rows,
    }
}

pub fn ablate_cmd(cfg: &PipelineConfig, args: &AblateArgs) -> CliResult<AblationTable> {
    let ds = load_dataset(cfg, args.dataset)?;
    let vae = load_vae(cfg, args.vae)?;
    let optional = |p: Option<&Path>, fallback: &Option<PathBuf>| -> CliResult<Option<Denoiser>> {
        match p.map(Path::to_path_buf).or_else(|| fallback.clone()) {
            Some(path) => load_denoiser(cfg, &path).map(Some),
            None => Ok(None),
        }
    };
    let latent = optional(args.latent, &cfg.paths.latent_denoiser)?;
    let standard = optional(args.standard, &cfg.paths.standard_denoiser)?;
    let names = if args.arms.is_empty() {
        default_arms()
    } else {
        args.arms.to_vec()
    };
    let arms: Vec<Arm> = names
        .iter()
        .map(|n| n.parse().map_err(CliError::config))
        .collect::<CliResult<_>>()?;
    let samples: Vec<&Sample> = ds.split(Split::Test).collect();
    let models = Models {
        vae: &vae,
        skeleton: &ds.skeleton,
        latent: latent.as_ref(),
        standard: standard.as_ref(),
        tracker: Some(&cfg.tracker),
    };
    let rows = ablate(&samples, &ds.skeleton, &ds.camera, &models, &arms, cfg.seed)
        .map_err(CliError::runtime)?;
    let table = ablation_table(cfg, rows);
    write_json(args.out, &table)?;
    let csv_path = args.out.with_extension("csv");
    fs::write(&csv_path, ablation_csv(&table)?)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", csv_path.display())))?;
    for c in &table.checks {
        log::info!("{}: {:?} ({})", c.name, c.passed, c.detail);
    }
    Ok(table)
}
