//! Masked-autoencoder pre-training loop.

use std::io::Write;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::CaseSet;
use super::loss::{mae_loss, MaeLoss};
use super::optim::{cosine_lr, AdamW};
use crate::error::{Error, Result};
use crate::model::tokens::patchify;
use crate::model::{AttnStats, MaeModel, Params, TokenInput};
use crate::rng::{purpose, stream};
use crate::sampling::{plan_mask, CropPolicy, CropSampler, MaskingParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub crops_per_case: usize,
    pub masking: MaskingParams,
    pub crop: CropPolicy,
    /// Restrict crops to the artery-overlap policy; off draws crops
    /// uniformly.
    pub biased_sampling: bool,
    /// Include the distance channel in the objective.
    pub reconstruct_distance: bool,
    /// Abort when more than this fraction of crops in an epoch is skipped.
    pub max_skip_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_start: 1.5e-3,
            lr_end: 1.5e-4,
            weight_decay: 0.05,
            batch_size: 8,
            seed: 0,
            crops_per_case: 1,
            masking: MaskingParams::default(),
            crop: CropPolicy::default(),
            biased_sampling: true,
            reconstruct_distance: true,
            max_skip_fraction: 0.5,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.crops_per_case == 0 {
            return Err(Error::Config("epochs, batch_size and crops_per_case must be positive".into()));
        }
        Ok(())
    }

    pub fn crop_policy(&self) -> CropPolicy {
        if self.biased_sampling {
            self.crop
        } else {
            CropPolicy {
                min_artery_fraction: 0.0,
                ..self.crop
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PretrainReport {
    /// Mean loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
    pub skipped: usize,
}

pub const PRETRAIN_LOG_HEADER: &str = "epoch,step,loss,loss_intensity,loss_distance";

/// Runs pre-training, writing one CSV row per optimizer step to `log`.
pub fn pretrain(model: &mut MaeModel<f32>, data: &CaseSet, cfg: &PretrainConfig, log: &mut dyn Write) -> Result<PretrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    writeln!(log, "{PRETRAIN_LOG_HEADER}").map_err(log_err)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let policy = cfg.crop_policy();
    let mut report = PretrainReport::default();
    model.zero_grad();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr_start, cfg.lr_end, epoch, cfg.epochs);
        let mut jobs: Vec<(usize, usize)> =
            (0..data.len()).flat_map(|i| (0..cfg.crops_per_case).map(move |k| (i, k))).collect();
        jobs.shuffle(&mut stream(cfg.seed, &[purpose::SHUFFLE, epoch as u64]));

        let mut batch = Vec::new();
        let mut skipped = 0;
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for &(i, k) in &jobs {
            let key = [epoch as u64, i as u64, k as u64];
            let item = data.get(i)?;
            let sampler = CropSampler::new(&item.case, &item.dmap)?;
            let crop = match sampler.sample(&policy, &mut stream(cfg.seed, &[purpose::CROP, key[0], key[1], key[2]])) {
                Ok(c) => c,
                Err(e @ Error::NoValidCrop { .. }) => {
                    warn!("skipping {}: {e}", item.case.case_id);
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let plan = plan_mask(
                &crop.patch_artery_frac,
                &cfg.masking,
                &mut stream(cfg.seed, &[purpose::MASK, key[0], key[1], key[2]]),
            )?;
            let target = patchify(&crop.channels);
            let visible = TokenInput::<f32>::from_patches(&target, |t| !plan.masked[t]);
            let (recon, cache) = model.forward(&visible, &mut AttnStats::default());
            let (l, grad) = mae_loss(&recon, &target, &plan, &cfg.masking, cfg.reconstruct_distance)?;
            model.backward(&cache, &grad);
            batch.push(l);

            if batch.len() == cfg.batch_size {
                let lt = flush(model, &mut opt, lr, &mut batch, epoch, log)?;
                epoch_sum += lt.0;
                epoch_n += lt.1;
            }
        }
        if !batch.is_empty() {
            let lt = flush(model, &mut opt, lr, &mut batch, epoch, log)?;
            epoch_sum += lt.0;
            epoch_n += lt.1;
        }
        report.skipped += skipped;
        if skipped as f64 > cfg.max_skip_fraction * jobs.len() as f64 {
            return Err(Error::Training(format!(
                "epoch {epoch}: {skipped} of {} crops had no valid position",
                jobs.len()
            )));
        }
        let mean = if epoch_n > 0 { epoch_sum / epoch_n as f64 } else { f64::NAN };
        info!("pretrain epoch {epoch}: lr {lr:.3e} loss {mean:.6}");
        report.epoch_loss.push(mean);
    }
    report.steps = opt.steps();
    Ok(report)
}

pub(crate) fn log_err(e: std::io::Error) -> Error {
    Error::Training(format!("writing log: {e}"))
}

/// Applies one optimizer step over the accumulated batch and logs it.
/// Returns the summed loss and the batch size.
fn flush(
    model: &mut MaeModel<f32>,
    opt: &mut AdamW,
    lr: f64,
    batch: &mut Vec<MaeLoss>,
    epoch: usize,
    log: &mut dyn Write,
) -> Result<(f64, usize)> {
    let n = batch.len() as f64;
    opt.step(model, lr, 1.0 / n);
    model.zero_grad();
    let mean = |f: fn(&MaeLoss) -> f64| batch.iter().map(f).sum::<f64>() / n;
    let (lt, li, ld) = (mean(|l| l.loss), mean(|l| l.intensity), mean(|l| l.distance));
    writeln!(log, "{epoch},{},{lt},{li},{ld}", opt.steps()).map_err(log_err)?;
    let count = batch.len();
    batch.clear();
    Ok((lt * n, count))
}
