use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    adam_step, augment_pair, clip_grad_norm, lr_at, random_crop_pair, total_loss, AdamState, LossWeights, TrainConfig,
};
use crate::checkpoint::save_store;
use crate::data::{psnr, ShadowPair};
use crate::error::{Error, Result};
use crate::model::ReHiTModel;
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One metric-log line: `step=<n> lr=<v> loss=<v> psnr=<v>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={:.6e} loss={:.6} psnr={:.4}",
            self.step, self.lr, self.loss, self.psnr
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Mean PSNR of the clamped model output over whole pairs.
pub fn evaluate_psnr<T: Real>(model: &ReHiTModel<T>, data: &[ShadowPair<T>]) -> Result<f64> {
    let mut total = 0.0;
    for p in data {
        let out = model.infer(&p.i_sh)?.clamp01();
        total += psnr(&out, &p.i_gt, 1.0)?;
    }
    Ok(total / data.len().max(1) as f64)
}

fn checkpoint<T: Real>(model: &ReHiTModel<T>, dir: Option<&Path>, step: usize, out: &mut TrainOutcome) -> Result<()> {
    if let Some(dir) = dir {
        let path = dir.join(format!("ckpt_{step}.reht"));
        save_store(&model.store, &path)?;
        out.checkpoints.push(path);
    }
    Ok(())
}

/// Trains `model` for `cfg.iters` steps of crop → augment → forward → loss →
/// backward → clip → Adam. `on_log` receives every logged record.
pub fn train_loop<T: Real>(
    model: &mut ReHiTModel<T>,
    data: &[ShadowPair<T>],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let weights = LossWeights {
        l1: cfg.w_l1,
        msssim: cfg.w_msssim,
        deep: cfg.w_deep,
        msssim_scales: cfg.msssim_scales,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.store);
    let mut out = TrainOutcome::default();
    for step in 0..cfg.iters {
        let mut inputs = Vec::with_capacity(cfg.batch);
        let mut targets = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let pair = &data[rng.random_range(0..data.len())];
            let mut p = random_crop_pair(pair, cfg.crop, &mut rng)?;
            if cfg.augment {
                p = augment_pair(&p, &mut rng);
            }
            inputs.push(p.i_sh);
            targets.push(p.i_gt);
        }
        let x = Tensor::stack(&inputs)?;
        let y = Tensor::stack(&targets)?;

        let mut tape = Tape::new();
        let xv = tape.input(x);
        let yv = tape.input(y.clone());
        let fwd = model.forward(&mut tape, xv)?;
        let terms = total_loss(&mut tape, &fwd, yv, &weights)?;
        let loss = tape.value(terms.total).data()[0].to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss at step {step}"),
            });
        }
        tape.backward(terms.total)?;
        model.store.zero_grads();
        tape.accumulate_param_grads(&mut model.store);
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut model.store, c);
        }
        let lr = lr_at(step, cfg.iters, cfg)?;
        adam_step(&mut model.store, &mut adam, lr, cfg)?;

        let done = step + 1;
        if (cfg.log_every > 0 && done % cfg.log_every == 0) || done == cfg.iters {
            let rec = LogRecord {
                step: done,
                lr,
                loss,
                psnr: psnr(&tape.value(fwd.i_out).clamp01(), &y, 1.0)?,
            };
            on_log(&rec);
            out.log.push(rec);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.iters {
            checkpoint(model, checkpoint_dir, done, &mut out)?;
        }
    }
    checkpoint(model, checkpoint_dir, cfg.iters, &mut out)?;
    Ok(out)
}
