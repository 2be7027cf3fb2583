//! Trial matrices (samplers × downsampling factors × seeds) and their CSV output.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::alignment::{default_thresholds, make_alignment_pair, optimize_alignment, recall_from_errors, sample_perturbation};
use super::optimizer::OptimizerConfig;
use super::texture::gen_texture;
use crate::autograd;
use crate::error::{Error, Result};
use crate::raster::{io, Image};
use crate::rng;
use crate::sampler::{LinearizationConfig, PreparedSampler, SamplerKind, SigmaPolicy};
use crate::transform::{AffineParams, PARAM_NAMES};

/// A source image: a file on disk or a generated texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    Texture {
        texture_seed: u64,
        #[serde(default = "default_side")]
        height: usize,
        #[serde(default = "default_side")]
        width: usize,
        #[serde(default = "default_channels")]
        channels: usize,
    },
    File {
        path: PathBuf,
    },
}

fn default_side() -> usize {
    96
}

fn default_channels() -> usize {
    1
}

impl ImageSource {
    pub fn texture(seed: u64) -> Self {
        ImageSource::Texture { texture_seed: seed, height: default_side(), width: default_side(), channels: 1 }
    }

    /// Relative paths are resolved against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<Image> {
        match self {
            ImageSource::Texture { texture_seed, height, width, channels } => {
                gen_texture(*texture_seed, *height, *width, *channels)
            }
            ImageSource::File { path } => io::load_image(base_dir.join(path)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerEntry {
    /// Column value in the CSV output; defaults to the sampler's kind name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub kind: SamplerKind,
}

impl SamplerEntry {
    pub fn new(label: impl Into<String>, kind: SamplerKind) -> Self {
        Self { label: Some(label.into()), kind }
    }

    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(self.kind.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub images: Vec<ImageSource>,
    pub samplers: Vec<SamplerEntry>,
    pub downsample_factors: Vec<f64>,
    /// Extra scale folded into both the initial and ground-truth warps. Values
    /// below 1 zoom into the source, i.e. upsample it.
    pub zoom: f64,
    /// Multiplier on the perturbation standard deviations.
    pub perturbation_scale: f64,
    pub trials: usize,
    /// Explicit trial seeds; overrides `trials` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    pub master_seed: u64,
    pub optimizer: OptimizerConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            images: vec![ImageSource::texture(0)],
            samplers: vec![
                SamplerEntry { label: None, kind: SamplerKind::Bilinear },
                SamplerEntry { label: None, kind: SamplerKind::multiscale_default() },
                SamplerEntry { label: None, kind: SamplerKind::Linearized(LinearizationConfig::default()) },
            ],
            downsample_factors: vec![1.0],
            zoom: 1.0,
            perturbation_scale: 1.0,
            trials: 80,
            seeds: None,
            master_seed: 0,
            optimizer: OptimizerConfig::default(),
            thresholds: None,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn trial_seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| (0..self.trials as u64).collect())
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.thresholds.clone().unwrap_or_else(default_thresholds)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.images.is_empty() {
            return bad("at least one image is required".into());
        }
        if self.samplers.is_empty() {
            return bad("at least one sampler is required".into());
        }
        let mut labels = HashSet::new();
        for s in &self.samplers {
            s.kind.validate().map_err(|e| Error::InvalidSpec(format!("sampler {}: {e}", s.label())))?;
            if !labels.insert(s.label()) {
                return bad(format!("duplicate sampler label {:?}", s.label()));
            }
        }
        if self.downsample_factors.is_empty() {
            return bad("at least one downsample factor is required".into());
        }
        if let Some(f) = self.downsample_factors.iter().find(|f| !(**f >= 1.0 && f.is_finite())) {
            return bad(format!("downsample factors must be >= 1, got {f}"));
        }
        if !(self.zoom > 0.0 && self.zoom.is_finite()) {
            return bad(format!("zoom must be positive, got {}", self.zoom));
        }
        if !(self.perturbation_scale >= 0.0 && self.perturbation_scale.is_finite()) {
            return bad(format!("perturbation_scale must be nonnegative, got {}", self.perturbation_scale));
        }
        if self.trial_seeds().is_empty() {
            return bad("at least one trial is required".into());
        }
        if let Some(t) = &self.thresholds {
            if t.is_empty() || t.iter().any(|x| x.is_nan()) {
                return bad("thresholds must be a nonempty list of numbers".into());
            }
        }
        self.optimizer.validate().map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    pub fn load_images(&self, base_dir: &Path) -> Result<Vec<Image>> {
        self.images.iter().map(|s| s.load(base_dir)).collect()
    }

    pub fn ground_truth(&self, seed: u64) -> AffineParams {
        let mut r = rng::substream(self.master_seed, rng::tag::PERTURBATION, seed);
        sample_perturbation(&mut r, self.perturbation_scale).then_zoom(self.zoom)
    }

    pub fn initial_params(&self) -> AffineParams {
        AffineParams::IDENTITY.then_zoom(self.zoom)
    }

    /// The sampler as run for trial `seed`: linearized samplers get a seed
    /// derived from the master seed, the trial seed and their own seed.
    pub fn trial_sampler(&self, kind: &SamplerKind, seed: u64) -> SamplerKind {
        match kind {
            SamplerKind::Linearized(cfg) => SamplerKind::Linearized(LinearizationConfig {
                seed: rng::derive_seed(self.master_seed, &[seed, cfg.seed]),
                ..*cfg
            }),
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial_id: usize,
    pub sampler: String,
    pub downsample_factor: f64,
    pub seed: u64,
    pub gt_params: AffineParams,
    pub final_params: AffineParams,
    pub iterations: usize,
    pub final_loss: f64,
    pub final_error_px: f64,
    pub converged: bool,
    /// A non-finite loss or gradient ended the trial.
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallRow {
    pub sampler: String,
    pub downsample_factor: f64,
    pub threshold_px: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub trials: Vec<TrialRow>,
    pub recall: Vec<RecallRow>,
}

impl ExperimentResult {
    pub fn rows<'a>(&'a self, sampler: &'a str, factor: f64) -> impl Iterator<Item = &'a TrialRow> + 'a {
        self.trials.iter().filter(move |r| r.sampler == sampler && r.downsample_factor == factor)
    }

    /// Fraction of trials of one configuration with error at most `threshold`.
    pub fn recall_at(&self, sampler: &str, factor: f64, threshold: f64) -> f64 {
        let errors: Vec<f64> = self.rows(sampler, factor).map(|r| r.final_error_px).collect();
        recall_from_errors(&errors, &[threshold]).map(|v| v[0].1).unwrap_or(f64::NAN)
    }

    pub fn mean_error(&self, sampler: &str, factor: f64) -> f64 {
        let errors: Vec<f64> = self.rows(sampler, factor).map(|r| r.final_error_px).collect();
        errors.iter().sum::<f64>() / errors.len() as f64
    }

    pub fn aborted(&self, sampler: &str, factor: f64) -> usize {
        self.rows(sampler, factor).filter(|r| r.aborted).count()
    }

    pub fn write_trials_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["trial_id", "sampler", "downsample_factor", "seed"].map(String::from).to_vec();
        header.extend(PARAM_NAMES.iter().map(|n| format!("gt_{n}")));
        header.extend(PARAM_NAMES.iter().map(|n| format!("final_{n}")));
        header.extend(["iterations", "final_loss", "final_error_px", "converged", "aborted"].map(String::from));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.trials {
            let mut rec = vec![r.trial_id.to_string(), r.sampler.clone(), r.downsample_factor.to_string(), r.seed.to_string()];
            rec.extend(r.gt_params.to_array().iter().map(f64::to_string));
            rec.extend(r.final_params.to_array().iter().map(f64::to_string));
            rec.extend([
                r.iterations.to_string(),
                r.final_loss.to_string(),
                r.final_error_px.to_string(),
                r.converged.to_string(),
                r.aborted.to_string(),
            ]);
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::InvalidParams(e.to_string()))
    }

    pub fn write_recall_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.recall {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::InvalidParams(e.to_string()))
    }

    pub fn trials_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_trials_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn recall_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_recall_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidParams(format!("csv: {e}"))
}

struct Job<'a> {
    sampler: &'a SamplerEntry,
    factor: f64,
    seed: u64,
}

/// Runs every trial of `spec`. Images are loaded (and every field validated)
/// before any trial starts; relative image paths resolve against `base_dir`.
///
/// Trials run in parallel on the current rayon pool; each depends only on
/// `(master seed, sampler, factor, trial seed)` so results do not depend on
/// the schedule.
pub fn run_experiment(spec: &ExperimentSpec, base_dir: &Path) -> Result<ExperimentResult> {
    spec.validate()?;
    let images = spec.load_images(base_dir)?;
    for &f in &spec.downsample_factors {
        for img in &images {
            // surface degenerate sizes up front rather than mid-run
            make_alignment_pair(img, &AffineParams::IDENTITY, f)?;
        }
    }
    let seeds = spec.trial_seeds();
    let mut jobs = Vec::new();
    for sampler in &spec.samplers {
        for &factor in &spec.downsample_factors {
            jobs.extend(seeds.iter().map(|&seed| Job { sampler, factor, seed }));
        }
    }

    let trials = jobs
        .par_iter()
        .enumerate()
        .map(|(trial_id, job)| run_trial(spec, &images, job, trial_id))
        .collect::<Result<Vec<_>>>()?;

    let thresholds = spec.thresholds();
    let mut recall = Vec::new();
    for s in &spec.samplers {
        for &f in &spec.downsample_factors {
            let errors: Vec<f64> = trials
                .iter()
                .filter(|r| r.sampler == s.label() && r.downsample_factor == f)
                .map(|r| r.final_error_px)
                .collect();
            for (t, rc) in recall_from_errors(&errors, &thresholds)? {
                recall.push(RecallRow { sampler: s.label().to_string(), downsample_factor: f, threshold_px: t, recall: rc });
            }
        }
    }
    Ok(ExperimentResult { trials, recall })
}

fn run_trial(spec: &ExperimentSpec, images: &[Image], job: &Job, trial_id: usize) -> Result<TrialRow> {
    let src = &images[(job.seed % images.len() as u64) as usize];
    let gt = spec.ground_truth(job.seed);
    let target = make_alignment_pair(src, &gt, job.factor)?;
    let kind = spec.trial_sampler(&job.sampler.kind, job.seed);
    let report = optimize_alignment(src, &target, &spec.initial_params(), &kind, &spec.optimizer, Some(&gt))?;
    Ok(TrialRow {
        trial_id,
        sampler: job.sampler.label().to_string(),
        downsample_factor: job.factor,
        seed: job.seed,
        gt_params: gt,
        final_params: report.final_params,
        iterations: report.iterations(),
        final_loss: report.final_loss,
        final_error_px: report.final_error_px.unwrap_or(f64::NAN),
        converged: report.converged,
        aborted: report.aborted(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub sampler: String,
    pub downsample_factor: f64,
    pub forward_ms: f64,
    pub backward_ms: f64,
}

/// Mean wall time per forward and per backward call for each sampler, on
/// the first image and first trial's warp.
pub fn time_samplers(spec: &ExperimentSpec, base_dir: &Path, calls: usize) -> Result<Vec<TimingRow>> {
    spec.validate()?;
    let calls = calls.max(1);
    let src = spec.images[0].load(base_dir)?;
    let seed = spec.trial_seeds()[0];
    let gt = spec.ground_truth(seed);
    let params = spec.initial_params();
    let mut rows = Vec::new();
    for &f in &spec.downsample_factors {
        let target = make_alignment_pair(&src, &gt, f)?;
        for s in &spec.samplers {
            let sampler = PreparedSampler::new(&src, &spec.trial_sampler(&s.kind, seed), target.height(), target.width())?;
            let (mut fwd, mut bwd) = (0.0, 0.0);
            for _ in 0..calls {
                let t0 = Instant::now();
                let out = sampler.forward(&params);
                let t1 = Instant::now();
                let loss = autograd::l2_loss(&out.image, &target)?;
                let t2 = Instant::now();
                std::hint::black_box(sampler.backward(&out, &loss, &params)?);
                let t3 = Instant::now();
                fwd += (t1 - t0).as_secs_f64();
                bwd += (t3 - t2).as_secs_f64();
            }
            let n = calls as f64;
            rows.push(TimingRow {
                sampler: s.label().to_string(),
                downsample_factor: f,
                forward_ms: 1e3 * fwd / n,
                backward_ms: 1e3 * bwd / n,
            });
        }
    }
    Ok(rows)
}

fn linearized(label: String, cfg: LinearizationConfig) -> SamplerEntry {
    SamplerEntry::new(label, SamplerKind::Linearized(cfg))
}

/// σ sweep over output-pixel multipliers, at factor 2 unless `base` already
/// lists factors other than the default.
pub fn sigma_ablation(base: &ExperimentSpec, multipliers: &[f64]) -> ExperimentSpec {
    let cfg = base_linearized(base);
    ExperimentSpec {
        samplers: multipliers
            .iter()
            .map(|&m| linearized(format!("sigma_x{m}"), LinearizationConfig { sigma: SigmaPolicy::OutputPixel { multiplier: m }, ..cfg }))
            .collect(),
        downsample_factors: factors_or(base, 2.0),
        ..base.clone()
    }
}

/// Sweep over the total sample count K, at factor 4 by default.
pub fn k_ablation(base: &ExperimentSpec, ks: &[usize]) -> ExperimentSpec {
    let cfg = base_linearized(base);
    ExperimentSpec {
        samplers: ks.iter().map(|&k| linearized(format!("k{k}"), LinearizationConfig { k, ..cfg })).collect(),
        downsample_factors: factors_or(base, 4.0),
        ..base.clone()
    }
}

/// Collapse prevention on and off under `upsample`× zoom-in at factor 1.
pub fn collapse_ablation(base: &ExperimentSpec, upsample: f64) -> ExperimentSpec {
    let cfg = base_linearized(base);
    ExperimentSpec {
        samplers: vec![
            linearized("collapse_on".into(), LinearizationConfig { collapse_prevention: true, ..cfg }),
            linearized("collapse_off".into(), LinearizationConfig { collapse_prevention: false, ..cfg }),
        ],
        downsample_factors: vec![1.0],
        zoom: 1.0 / upsample,
        ..base.clone()
    }
}

fn base_linearized(base: &ExperimentSpec) -> LinearizationConfig {
    base.samplers
        .iter()
        .find_map(|s| match s.kind {
            SamplerKind::Linearized(cfg) => Some(cfg),
            _ => None,
        })
        .unwrap_or_default()
}

fn factors_or(base: &ExperimentSpec, default: f64) -> Vec<f64> {
    if base.downsample_factors == [1.0] {
        vec![default]
    } else {
        base.downsample_factors.clone()
    }
}
