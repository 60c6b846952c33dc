use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::artifacts::{sha256_file, verify_stage, FileHash, StageWriter, RUN_MANIFEST};
use super::config::{RunConfig, ValidationMode};
use super::phantom::generate_phantom;
use super::report::report_tables;
use crate::data::raw::{save_volume, RawTensor};
use crate::data::{
    build_pairs, extract_slices, load_scan, normalize_volume, register_rigid, split_by_patient,
    DatasetManifest, ImageSlice, PairedSample, PatientEntry, Plane, RangePolicy, ScanEntry,
    SplitPlan, CLEAN_LABEL,
};
use crate::diffusion::{DiffusionSimulator, SimulationOptions, VarianceSchedule};
use crate::error::{Error, Result};
use crate::metrics::{nmse_with, psnr, ssim, MetricRecord, MetricsReport};
use crate::models::{
    train, DdpmObjective, EpochRecord, ModelCheckpoint, SsimObjective, TrainedUNetPredictor, UNet,
};
use crate::par;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const STAGE_DDPM: &str = "ddpm";
pub const STAGE_SIMULATE: &str = "simulate";
pub const STAGE_CORRECTOR: &str = "corrector";
pub const STAGE_EVALUATE: &str = "evaluate";
pub const STAGE_REPORT: &str = "report";

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PAIRS_FILE: &str = "pairs.raw";
const DEGRADED_CSV: &str = "degraded.csv";
const CORRECTED_CSV: &str = "corrected.csv";

const STREAM_PHANTOM: u64 = 10;
const STREAM_DDPM: u64 = 11;
const STREAM_SIMULATE: u64 = 12;
const STREAM_CORRECTOR: u64 = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Phantom,
    TrainDdpm,
    Simulate,
    TrainCorrector,
    Evaluate,
    Report,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Phantom,
        Command::TrainDdpm,
        Command::Simulate,
        Command::TrainCorrector,
        Command::Evaluate,
        Command::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Phantom => "phantom",
            Command::TrainDdpm => "train-ddpm",
            Command::Simulate => "simulate",
            Command::TrainCorrector => "train-corrector",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    log::info!("{} (config {})", command.as_str(), &cfg.hash()[..12]);
    match command {
        Command::Phantom => phantom(cfg),
        Command::TrainDdpm => train_ddpm(cfg),
        Command::Simulate => simulate(cfg),
        Command::TrainCorrector => train_corrector(cfg),
        Command::Evaluate => evaluate(cfg),
        Command::Report => report(cfg),
    }
}

fn stage_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn input_hash(path: &Path) -> Result<FileHash> {
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

fn missing(path: &Path, detail: &str) -> Error {
    Error::MissingArtifact {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.dataset_manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

fn phantom(cfg: &RunConfig) -> Result<()> {
    let spec = &cfg.phantom;
    let rng = RngStream::new(spec.seed.unwrap_or(cfg.seed), STREAM_PHANTOM);
    let corpus = generate_phantom(spec, &rng)?;
    let mut w = StageWriter::new(&dataset_dir(cfg))?;
    let mut manifest = DatasetManifest::default();
    for scans in &corpus {
        let mut entry = PatientEntry {
            id: scans[0].volume.patient_id.clone(),
            scans: Vec::new(),
        };
        for s in scans {
            let name = format!("{}_{}.raw", s.volume.patient_id, s.volume.label);
            save_volume(&w.path(&name), &s.volume)?;
            entry.scans.push(ScanEntry {
                path: name,
                label: s.volume.label.clone(),
                degradation: s.degradation.clone(),
            });
        }
        manifest.patients.push(entry);
    }
    let mname = cfg
        .dataset_manifest
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config("dataset_manifest must name a file".into()))?
        .to_string();
    manifest.save(&w.path(&mname))?;
    let spec_json = serde_json::to_string_pretty(spec)? + "\n";
    w.write("phantom_spec.json", spec_json)?;
    w.finish(
        Command::Phantom.as_str(),
        &cfg.hash(),
        rng.seed(),
        Vec::new(),
    )?;
    log::info!(
        "wrote {} phantom patients to {}",
        corpus.len(),
        dataset_dir(cfg).display()
    );
    Ok(())
}

struct Dataset {
    manifest: DatasetManifest,
    path: PathBuf,
    plan: SplitPlan,
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.dataset_manifest.clone();
    if !path.is_file() {
        return Err(missing(&path, "dataset manifest not found"));
    }
    // a generated corpus carries its own run manifest; check it is intact
    let dir = dataset_dir(cfg);
    if dir.join(RUN_MANIFEST).is_file() {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        verify_stage(&dir, &[name.as_str()])?;
    }
    let manifest = DatasetManifest::load(&path)?;
    let plan = split_by_patient(&manifest.patient_ids(), cfg.split.counts, cfg.split.seed)
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(Dataset {
        manifest,
        path,
        plan,
    })
}

impl Dataset {
    /// Normalized slices of every scan of `patient` whose label satisfies
    /// `want`, in manifest order.
    fn slices(
        &self,
        cfg: &RunConfig,
        patient: &str,
        want: impl Fn(&str) -> bool,
    ) -> Result<Vec<Vec<ImageSlice>>> {
        let entry = self
            .manifest
            .patient(patient)
            .ok_or_else(|| Error::InvalidArgument(format!("patient {patient} not in manifest")))?;
        let mut out = Vec::new();
        for scan in entry.scans.iter().filter(|s| want(&s.label)) {
            let file = DatasetManifest::resolve(&self.path, scan);
            if !file.is_file() {
                return Err(missing(
                    &file,
                    "scan listed in the dataset manifest not found",
                ));
            }
            let vol = normalize_volume(&load_scan(&file, patient, &scan.label)?);
            out.push(extract_slices(
                &vol,
                cfg.plane,
                RangePolicy::Central(cfg.slices_per_scan),
            ));
        }
        Ok(out)
    }

    fn flat(
        &self,
        cfg: &RunConfig,
        patients: &[String],
        want: impl Fn(&str) -> bool + Copy,
    ) -> Result<Vec<ImageSlice>> {
        let mut all = Vec::new();
        for p in patients {
            all.extend(self.slices(cfg, p, want)?.into_iter().flatten());
        }
        Ok(all)
    }
}

fn is_clean(label: &str) -> bool {
    label == CLEAN_LABEL
}

fn is_motion(label: &str) -> bool {
    label != CLEAN_LABEL
}

fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,validation_loss\n");
    for h in history {
        s.push_str(&format!(
            "{},{},{}\n",
            h.epoch, h.train_loss, h.validation_loss
        ));
    }
    s
}

fn train_ddpm(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let tensors = |ids: &[String]| -> Result<Vec<Tensor>> {
        Ok(ds
            .flat(cfg, ids, is_motion)?
            .iter()
            .map(ImageSlice::to_tensor)
            .collect())
    };
    let train_set = tensors(&ds.plan.ddpm_train)?;
    let val_set = tensors(&ds.plan.ddpm_val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(
            "no motion-affected scans in the diffusion training or validation patients".into(),
        ));
    }
    log::info!(
        "diffusion training on {} slices, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let sched = VarianceSchedule::from_config(&cfg.schedule)?;
    let rng = RngStream::new(cfg.seed, STREAM_DDPM);
    let model = UNet::new(cfg.ddpm.model, &mut rng.split(0))?;
    let objective = DdpmObjective::new(&cfg.ddpm.model, sched, train_set, val_set)?;
    let outcome = train(
        model,
        &objective,
        &cfg.ddpm.trainer,
        &rng.split(1),
        (&ds.plan.ddpm_train, &ds.plan.ddpm_val),
        false,
    )?;

    let mut w = StageWriter::new(&stage_dir(cfg, STAGE_DDPM))?;
    outcome.checkpoint.save(&w.path(CHECKPOINT_FILE))?;
    w.write("history.csv", history_csv(&outcome.history))?;
    w.write("split.json", serde_json::to_string_pretty(&ds.plan)? + "\n")?;
    w.finish(
        Command::TrainDdpm.as_str(),
        &cfg.hash(),
        cfg.seed,
        vec![input_hash(&ds.path)?],
    )?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PairMeta {
    role: String,
    patient: String,
    plane: Plane,
    index: usize,
    label: String,
}

fn save_pairs(path: &Path, pairs: &[(&str, &PairedSample)]) -> Result<()> {
    let (h, w) = pairs[0].1.clean().pixels.dim();
    let mut data = Vec::with_capacity(pairs.len() * 2 * h * w);
    let mut meta = Vec::new();
    for (role, p) in pairs {
        data.extend(p.degraded().pixels.iter().copied());
        data.extend(p.clean().pixels.iter().copied());
        meta.push(PairMeta {
            role: role.to_string(),
            patient: p.clean().patient_id.clone(),
            plane: p.clean().plane,
            index: p.clean().index,
            label: p.degraded().label.clone(),
        });
    }
    RawTensor {
        shape: vec![pairs.len(), 2, h, w],
        data,
        meta: json!({ "pairs": meta }),
    }
    .save(path)
}

fn simulate(cfg: &RunConfig) -> Result<()> {
    let ddpm_dir = stage_dir(cfg, STAGE_DDPM);
    verify_stage(&ddpm_dir, &[CHECKPOINT_FILE])?;
    let ds = load_dataset(cfg)?;
    let ckpt_path = ddpm_dir.join(CHECKPOINT_FILE);
    let ckpt = ModelCheckpoint::load(&ckpt_path)?;
    let sched_cfg = ckpt
        .schedule
        .ok_or_else(|| missing(&ckpt_path, "diffusion checkpoint has no schedule"))?;
    if sched_cfg != cfg.schedule {
        log::warn!("using the checkpoint's schedule {sched_cfg:?}, not the configured one");
    }
    let sched = VarianceSchedule::from_config(&sched_cfg)?;
    let presets = cfg.simulation.selected(&sched)?;
    let predictor = TrainedUNetPredictor::new(ckpt.to_unet()?, sched.clone())?;
    let mut simulator = DiffusionSimulator::new(predictor, sched, presets)?;
    simulator.options = SimulationOptions {
        coefficient: cfg.coefficient_mode(),
        output: cfg.simulation.output,
        ..Default::default()
    };
    let k = simulator.presets.len();

    let rng = RngStream::new(cfg.seed, STREAM_SIMULATE);
    let train_clean = ds.flat(cfg, &ds.plan.unet_train, is_clean)?;
    if train_clean.is_empty() {
        return Err(Error::Config(
            "no clean scans among the corrector training patients".into(),
        ));
    }
    log::info!(
        "simulating {k} degraded images for each of {} clean slices",
        train_clean.len()
    );
    let train_pairs = build_pairs(&train_clean, &simulator, k, &rng.split(0))?;
    let mut rows: Vec<(&str, &PairedSample)> = train_pairs.iter().map(|p| ("train", p)).collect();
    let val_pairs;
    if cfg.validation == ValidationMode::HeldOut {
        let val_clean = ds.flat(cfg, &ds.plan.unet_val, is_clean)?;
        if val_clean.is_empty() {
            return Err(Error::Config(
                "no clean scans among the corrector validation patients".into(),
            ));
        }
        val_pairs = build_pairs(&val_clean, &simulator, k, &rng.split(1))?;
        rows.extend(val_pairs.iter().map(|p| ("val", p)));
    }

    let mut w = StageWriter::new(&stage_dir(cfg, STAGE_SIMULATE))?;
    save_pairs(&w.path(PAIRS_FILE), &rows)?;
    let inputs = vec![input_hash(&ds.path)?, input_hash(&ckpt_path)?];
    w.finish(Command::Simulate.as_str(), &cfg.hash(), cfg.seed, inputs)?;
    Ok(())
}

type ImagePair = (Tensor, Tensor);
/// Pairs plus the patients they came from.
type PairSet = (Vec<ImagePair>, Vec<String>);

fn load_pairs(path: &Path) -> Result<(PairSet, PairSet)> {
    let raw = RawTensor::load(path)?;
    let bad = |d: &str| Error::format(path, d.to_string());
    if raw.shape.len() != 4 || raw.shape[1] != 2 {
        return Err(bad("expected a [N, 2, H, W] pair tensor"));
    }
    let meta: Vec<PairMeta> = serde_json::from_value(
        raw.meta
            .get("pairs")
            .cloned()
            .ok_or_else(|| bad("no pair metadata"))?,
    )
    .map_err(|e| bad(&e.to_string()))?;
    let (h, w) = (raw.shape[2], raw.shape[3]);
    if meta.len() != raw.shape[0] {
        return Err(bad("pair metadata does not match the tensor"));
    }
    let (mut train, mut val, mut tp, mut vp) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, m) in meta.iter().enumerate() {
        let base = i * 2 * h * w;
        let degraded = Tensor::from_f32([h, w], &raw.data[base..base + h * w])?;
        let clean = Tensor::from_f32([h, w], &raw.data[base + h * w..base + 2 * h * w])?;
        let (set, ids) = if m.role == "val" {
            (&mut val, &mut vp)
        } else {
            (&mut train, &mut tp)
        };
        set.push((degraded, clean));
        if !ids.contains(&m.patient) {
            ids.push(m.patient.clone());
        }
    }
    Ok(((train, tp), (val, vp)))
}

fn train_corrector(cfg: &RunConfig) -> Result<()> {
    let sim_dir = stage_dir(cfg, STAGE_SIMULATE);
    verify_stage(&sim_dir, &[PAIRS_FILE])?;
    let pairs_path = sim_dir.join(PAIRS_FILE);
    let ((train_set, train_ids), (mut val_set, mut val_ids)) = load_pairs(&pairs_path)?;
    let allow_overlap = cfg.validation == ValidationMode::TrainingSet;
    if allow_overlap {
        val_set = train_set.clone();
        val_ids = train_ids.clone();
    }
    log::info!(
        "corrector training on {} pairs, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let rng = RngStream::new(cfg.seed, STREAM_CORRECTOR);
    let model = UNet::new(cfg.corrector.model, &mut rng.split(0))?;
    let objective = SsimObjective::new(&cfg.corrector.model, &cfg.metrics, train_set, val_set)?;
    let outcome = train(
        model,
        &objective,
        &cfg.corrector.trainer,
        &rng.split(1),
        (&train_ids, &val_ids),
        allow_overlap,
    )?;

    let mut w = StageWriter::new(&stage_dir(cfg, STAGE_CORRECTOR))?;
    outcome.checkpoint.save(&w.path(CHECKPOINT_FILE))?;
    w.write("history.csv", history_csv(&outcome.history))?;
    w.finish(
        Command::TrainCorrector.as_str(),
        &cfg.hash(),
        cfg.seed,
        vec![input_hash(&pairs_path)?],
    )?;
    Ok(())
}

fn metric_record(cfg: &RunConfig, x: &Tensor, clean: &ImageSlice) -> Result<MetricRecord> {
    let reference = clean.to_tensor();
    Ok(MetricRecord {
        patient: clean.patient_id.clone(),
        plane: clean.plane,
        slice: clean.index,
        ssim: ssim(x, &reference, &cfg.metrics)?,
        nmse: nmse_with(x, &reference, cfg.metrics.nmse)?,
        psnr: psnr(x, &reference, &cfg.metrics)?,
    })
}

fn evaluate(cfg: &RunConfig) -> Result<()> {
    let corr_dir = stage_dir(cfg, STAGE_CORRECTOR);
    verify_stage(&corr_dir, &[CHECKPOINT_FILE])?;
    let ckpt_path = corr_dir.join(CHECKPOINT_FILE);
    let net = ModelCheckpoint::load(&ckpt_path)?.to_unet()?;
    let ds = load_dataset(cfg)?;

    let mut jobs: Vec<(ImageSlice, ImageSlice)> = Vec::new();
    for p in &ds.plan.test {
        let clean = ds.slices(cfg, p, is_clean)?;
        let Some(clean) = clean.first() else {
            log::warn!("test patient {p} has no clean scan; skipped");
            continue;
        };
        for motion in ds.slices(cfg, p, is_motion)? {
            jobs.extend(clean.iter().cloned().zip(motion));
        }
    }
    if jobs.is_empty() {
        return Err(Error::Config(
            "no test patients with both clean and motion-affected scans".into(),
        ));
    }
    log::info!("evaluating {} slice pairs", jobs.len());
    let results = par::try_map_range(jobs.len(), |i| -> Result<(MetricRecord, MetricRecord)> {
        let (clean, moving) = &jobs[i];
        let degraded = if cfg.registration.enabled {
            register_rigid(moving, clean, cfg.registration.max_shift)?.slice
        } else {
            moving.clone()
        };
        let x = degraded.to_tensor();
        let corrected = net.correct(&x)?.map(|v| v.clamp(0.0, 1.0));
        Ok((
            metric_record(cfg, &x, clean)?,
            metric_record(cfg, &corrected, clean)?,
        ))
    })?;
    let (degraded, corrected): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let (degraded, corrected) = (MetricsReport::new(degraded), MetricsReport::new(corrected));
    for (name, r) in [("degraded", &degraded), ("corrected", &corrected)] {
        let (s, sd) = r.overall("ssim").unwrap_or_default();
        let (n, nd) = r.overall("nmse").unwrap_or_default();
        log::info!("{name}: ssim {s:.4} ± {sd:.4}, nmse {n:.4} ± {nd:.4}");
    }

    let mut w = StageWriter::new(&stage_dir(cfg, STAGE_EVALUATE))?;
    w.write(DEGRADED_CSV, degraded.to_csv())?;
    w.write("degraded_summary.csv", degraded.summary_csv())?;
    w.write(CORRECTED_CSV, corrected.to_csv())?;
    w.write("corrected_summary.csv", corrected.summary_csv())?;
    let inputs = vec![input_hash(&ds.path)?, input_hash(&ckpt_path)?];
    w.finish(Command::Evaluate.as_str(), &cfg.hash(), cfg.seed, inputs)?;
    Ok(())
}

fn report(cfg: &RunConfig) -> Result<()> {
    let eval_dir = stage_dir(cfg, STAGE_EVALUATE);
    verify_stage(&eval_dir, &[DEGRADED_CSV, CORRECTED_CSV])?;
    let mut sources = Vec::new();
    let mut inputs = Vec::new();
    for name in [DEGRADED_CSV, CORRECTED_CSV] {
        let p = eval_dir.join(name);
        sources.push((
            name.trim_end_matches(".csv").to_string(),
            MetricsReport::read(&p)?,
        ));
        inputs.push(input_hash(&p)?);
    }
    let (summary, plot) = report_tables(&sources, &cfg.report.groupings);
    let mut w = StageWriter::new(&stage_dir(cfg, STAGE_REPORT))?;
    w.write("summary.csv", summary)?;
    w.write("plotdata.csv", plot)?;
    w.finish(Command::Report.as_str(), &cfg.hash(), cfg.seed, inputs)?;
    Ok(())
}
