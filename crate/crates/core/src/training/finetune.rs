//! Detection fine-tuning loop.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::data::CaseSet;
use super::loss::{detection_loss, DetectionLoss, DetectionTargets};
use super::optim::AdamW;
use super::pretrain::log_err;
use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::model::{AttnStats, Detector, ModelConfig, Params, TokenInput};
use crate::rng::{purpose, stream, Stream};
use crate::sampling::{CropPolicy, CropSample, CropSampler, CROP};
use crate::synthvasc::Case;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub multi_match_radius_mm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub crops_per_case: usize,
    /// Probability that a crop of a lesion-bearing case is centred on one of
    /// its lesions (with jitter) instead of drawn at random.
    pub positive_fraction: f64,
    /// Maximum per-axis offset, in voxels, of a lesion-centred crop.
    pub jitter_voxels: usize,
    pub crop: CropPolicy,
    pub max_skip_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-4,
            weight_decay: 0.05,
            multi_match_radius_mm: 1.0,
            batch_size: 8,
            seed: 0,
            crops_per_case: 1,
            positive_fraction: 0.5,
            jitter_voxels: 16,
            crop: CropPolicy::default(),
            max_skip_fraction: 0.5,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.multi_match_radius_mm > 0.0) {
            return Err(Error::Config("multi_match_radius_mm must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.crops_per_case == 0 {
            return Err(Error::Config("epochs, batch_size and crops_per_case must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config("positive_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
    pub skipped: usize,
}

pub const FINETUNE_LOG_HEADER: &str = "epoch,step,loss,bce,center,size,iou";

/// Detector whose encoder comes from a pre-training checkpoint; the MAE
/// decoder weights are ignored.
pub fn detector_from_pretrained(config: &ModelConfig, seed: u64, ckpt: &Path) -> Result<Detector<f32>> {
    let ck = checkpoint::load(ckpt)?;
    let mut det = Detector::new(config, seed)?;
    ck.restore_from(ckpt, config, &mut det, "encoder.")?;
    Ok(det)
}

/// A crop centred on a random lesion of `case`, offset by up to `jitter`
/// voxels per axis and clamped inside the volume.
pub fn lesion_centered_crop(sampler: &CropSampler, case: &Case, jitter: usize, rng: &mut Stream) -> Option<CropSample> {
    if case.lesions.is_empty() {
        return None;
    }
    let l = &case.lesions[rng.random_range(0..case.lesions.len())];
    let dims = case.dims();
    let j = jitter as isize;
    let origin = [0, 1, 2].map(|a| {
        let c = (l.center_mm[a] / case.spacing_mm[a]).round() as isize;
        let off = if j > 0 { rng.random_range(-(j as i64)..=j as i64) as isize } else { 0 };
        (c - (CROP / 2) as isize + off).clamp(0, (dims[a] - CROP) as isize)
    });
    Some(sampler.extract(origin))
}

pub fn finetune(model: &mut Detector<f32>, data: &CaseSet, cfg: &FinetuneConfig, log: &mut dyn Write) -> Result<FinetuneReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    writeln!(log, "{FINETUNE_LOG_HEADER}").map_err(log_err)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut report = FinetuneReport::default();
    let prior = model.config.side_prior_mm;
    model.zero_grad();

    for epoch in 0..cfg.epochs {
        let mut jobs: Vec<(usize, usize)> =
            (0..data.len()).flat_map(|i| (0..cfg.crops_per_case).map(move |k| (i, k))).collect();
        jobs.shuffle(&mut stream(cfg.seed, &[purpose::SHUFFLE, 1 << 32 | epoch as u64]));
        let mut batch: Vec<DetectionLoss> = Vec::new();
        let mut skipped = 0;
        let (mut sum, mut count) = (0.0, 0usize);
        for &(i, k) in &jobs {
            let item = data.get(i)?;
            let mut rng = stream(cfg.seed, &[purpose::FINETUNE_CROP, epoch as u64, i as u64, k as u64]);
            let sampler = CropSampler::new(&item.case, &item.dmap)?;
            let positive = rng.random::<f64>() < cfg.positive_fraction;
            let crop = match positive.then(|| lesion_centered_crop(&sampler, &item.case, cfg.jitter_voxels, &mut rng)).flatten() {
                Some(c) => c,
                None => match sampler.sample(&cfg.crop, &mut rng) {
                    Ok(c) => c,
                    Err(e @ Error::NoValidCrop { .. }) => {
                        warn!("skipping {}: {e}", item.case.case_id);
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                },
            };
            let gts = crop.lesions_centered_inside();
            let input = TokenInput::<f32>::from_crop(&crop, |_| true);
            let (out, cache) = model.forward(&input, &mut AttnStats::default());
            let targets = DetectionTargets {
                lesions: &gts,
                spacing_mm: crop.spacing_mm,
                side_prior_mm: prior,
                radius_mm: cfg.multi_match_radius_mm,
            };
            let (l, _, grad) = detection_loss(&out, &targets)?;
            model.backward(&cache, &grad);
            batch.push(l);
            if batch.len() == cfg.batch_size {
                let (s, n) = flush(model, &mut opt, cfg.lr, &mut batch, epoch, log)?;
                sum += s;
                count += n;
            }
        }
        if !batch.is_empty() {
            let (s, n) = flush(model, &mut opt, cfg.lr, &mut batch, epoch, log)?;
            sum += s;
            count += n;
        }
        report.skipped += skipped;
        if skipped as f64 > cfg.max_skip_fraction * jobs.len() as f64 {
            return Err(Error::Training(format!(
                "epoch {epoch}: {skipped} of {} crops had no valid position",
                jobs.len()
            )));
        }
        let mean = if count > 0 { sum / count as f64 } else { f64::NAN };
        info!("finetune epoch {epoch}: loss {mean:.6}");
        report.epoch_loss.push(mean);
    }
    report.steps = opt.steps();
    Ok(report)
}

fn flush(
    model: &mut Detector<f32>,
    opt: &mut AdamW,
    lr: f64,
    batch: &mut Vec<DetectionLoss>,
    epoch: usize,
    log: &mut dyn Write,
) -> Result<(f64, usize)> {
    let n = batch.len() as f64;
    opt.step(model, lr, 1.0 / n);
    model.zero_grad();
    let mean = |f: fn(&DetectionLoss) -> f64| batch.iter().map(f).sum::<f64>() / n;
    let loss = mean(|l| l.loss);
    writeln!(
        log,
        "{epoch},{},{loss},{},{},{},{}",
        opt.steps(),
        mean(|l| l.bce),
        mean(|l| l.center),
        mean(|l| l.size),
        mean(|l| l.iou)
    )
    .map_err(log_err)?;
    let count = batch.len();
    batch.clear();
    Ok((loss * n, count))
}
