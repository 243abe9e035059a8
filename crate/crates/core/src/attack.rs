//! Gradient inversion against a shared model update.
//!
//! The attacker sees the global parameters before the round and a
//! client's parameters after it, infers the gradient, and optimizes dummy
//! images until their gradient points the same way.

use std::fs;
use std::path::{Path, PathBuf};

use fedleak_tensor::{RngStream, Tape, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::write_pgm;
use crate::error::{CoreError, Result};
use crate::models::{bce_loss, forward_tape, save_tensor, BnMode, ModelSpec, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// `1 - <g', g> / (|g'| |g|)`.
    NormProduct,
    /// `1 - <g', g> / |g' - g|`.
    NormDifference,
    /// `|g' - g|^2`.
    L2,
}

/// How the TV prior inside the matching loss is reduced over pixel pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvReduction {
    /// Plain sum, as returned by [`tv`].
    Sum,
    /// Horizontal and vertical differences each averaged over their count.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub max_steps: usize,
    pub lr: f64,
    pub lr_drop: f64,
    pub tv_weight: f64,
    pub tv_reduction: TvReduction,
    pub trials: usize,
    pub mode: MatchMode,
    /// Normalization the attacker uses for the dummy forward pass.
    pub bn_mode: BnMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            max_steps: 2_000,
            lr: 0.1,
            lr_drop: 0.1,
            tv_weight: 1e-2,
            tv_reduction: TvReduction::Mean,
            trials: 3,
            mode: MatchMode::NormProduct,
            bn_mode: BnMode::FixedStats,
        }
    }
}

impl AttackConfig {
    /// Full-length schedule of 20,000 steps.
    pub fn full() -> Self {
        Self {
            max_steps: 20_000,
            ..Self::default()
        }
    }

    /// Steps after which the learning rate drops.
    pub fn milestones(&self) -> [usize; 3] {
        [3, 5, 7].map(|k| self.max_steps * k / 8)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self.milestones().iter().filter(|&&m| step >= m).count() as i32;
        self.lr * self.lr_drop.powi(drops)
    }
}

/// `(before - after) / lr` over the trainable tensors of `before`.
pub fn infer_update_gradient(before: &ParamSet, after: &ParamSet, lr: f64) -> Result<Vec<Tensor>> {
    if !(lr > 0.0) {
        return Err(CoreError::Invalid(format!("learning rate {lr} must be positive")));
    }
    if !before.same_layout(after) {
        return Err(CoreError::Shape("before/after parameter layouts differ".into()));
    }
    let inv = 1.0 / lr;
    Ok(before
        .trainable_indices()
        .into_iter()
        .map(|i| {
            let (a, b) = (&before.tensors()[i], &after.tensors()[i]);
            let d = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| ((*x as f64 - *y as f64) * inv) as f32)
                .collect();
            Tensor::new(a.shape().to_vec(), d).expect("same shape")
        })
        .collect())
}

/// Label of a single sample from the output-bias gradient `sigmoid(z) - y`.
pub fn recover_label(bias_grad: f32) -> Result<u8> {
    if bias_grad < 0.0 {
        Ok(1)
    } else if bias_grad > 0.0 {
        Ok(0)
    } else {
        Err(CoreError::Attack("zero bias gradient leaves the label ambiguous".into()))
    }
}

/// Anisotropic total variation of a rank-2 image.
pub fn tv(image: &Tensor) -> Result<f64> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(CoreError::Shape(format!("tv needs a rank-2 image, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let x = image.data();
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            let v = x[i * w + j] as f64;
            if i + 1 < h {
                acc += (x[(i + 1) * w + j] as f64 - v).abs();
            }
            if j + 1 < w {
                acc += (x[i * w + j + 1] as f64 - v).abs();
            }
        }
    }
    Ok(acc)
}

/// Forward-difference matrix `[n-1, n]` repeated `blocks` times on the diagonal.
fn diff_matrix(n: usize, blocks: usize) -> Result<Tensor> {
    let (rows, cols) = (blocks * (n - 1), blocks * n);
    let mut d = vec![0f32; rows * cols];
    for b in 0..blocks {
        for i in 0..n - 1 {
            let r = b * (n - 1) + i;
            d[r * cols + b * n + i] = -1.0;
            d[r * cols + b * n + i + 1] = 1.0;
        }
    }
    Ok(Tensor::new(vec![rows, cols], d)?)
}

/// Anisotropic TV of an `[N, C, H, W]` batch on the tape. `Sum` adds up
/// [`tv`] over the images.
pub fn tv_tape(tape: &mut Tape, x: Var, reduction: TvReduction) -> Result<Var> {
    let s = tape.shape(x)?.to_vec();
    if s.len() != 4 {
        return Err(CoreError::Shape(format!("tv_tape needs [N, C, H, W], got {s:?}")));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let rows = tape.reshape(x, &[planes * h, w])?;
    let mut total: Option<Var> = None;
    if w > 1 {
        let dh = tape.constant(diff_matrix(w, 1)?);
        let dht = tape.transpose(dh)?;
        let horiz = tape.matmul(rows, dht)?;
        let a = tape.abs(horiz)?;
        let sh = match reduction {
            TvReduction::Sum => tape.sum(a)?,
            TvReduction::Mean => tape.mean(a)?,
        };
        total = Some(sh);
    }
    if h > 1 {
        let dv = tape.constant(diff_matrix(h, planes)?);
        let vert = tape.matmul(dv, rows)?;
        let a = tape.abs(vert)?;
        let sv = match reduction {
            TvReduction::Sum => tape.sum(a)?,
            TvReduction::Mean => tape.mean(a)?,
        };
        total = Some(match total {
            Some(t) => tape.add(t, sv)?,
            None => sv,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => {
            let z = tape.constant(Tensor::scalar(0.0));
            Ok(z)
        }
    }
}

/// Gradient-matching objective plus `tv_weight * TV(image)`.
pub fn match_loss(
    tape: &mut Tape,
    dummy: &[Var],
    target: &[Tensor],
    image: Var,
    tv_weight: f64,
    tv_reduction: TvReduction,
    mode: MatchMode,
) -> Result<Var> {
    if dummy.len() != target.len() || dummy.is_empty() {
        return Err(CoreError::Shape(format!("{} dummy vs {} target gradients", dummy.len(), target.len())));
    }
    let target_norm = target.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if !(target_norm > 0.0) {
        return Err(CoreError::Attack("target gradient has zero norm".into()));
    }
    let mut dot: Option<Var> = None;
    let mut dd: Option<Var> = None;
    let mut diff_sq: Option<Var> = None;
    let acc = |tape: &mut Tape, slot: &mut Option<Var>, v: Var| -> Result<()> {
        *slot = Some(match *slot {
            Some(s) => tape.add(s, v)?,
            None => v,
        });
        Ok(())
    };
    for (&g, t) in dummy.iter().zip(target) {
        if tape.shape(g)? != t.shape() {
            return Err(CoreError::Shape(format!("{:?} vs {:?}", tape.shape(g)?, t.shape())));
        }
        let tc = tape.constant(t.clone());
        match mode {
            MatchMode::NormProduct => {
                let p = tape.mul(g, tc)?;
                let p = tape.sum(p)?;
                acc(tape, &mut dot, p)?;
                let q = tape.mul(g, g)?;
                let q = tape.sum(q)?;
                acc(tape, &mut dd, q)?;
            }
            MatchMode::NormDifference | MatchMode::L2 => {
                if mode == MatchMode::NormDifference {
                    let p = tape.mul(g, tc)?;
                    let p = tape.sum(p)?;
                    acc(tape, &mut dot, p)?;
                }
                let d = tape.sub(g, tc)?;
                let q = tape.mul(d, d)?;
                let q = tape.sum(q)?;
                acc(tape, &mut diff_sq, q)?;
            }
        }
    }
    let base = match mode {
        MatchMode::NormProduct => {
            let n = tape.sqrt(dd.expect("accumulated"))?;
            let n = tape.scale(n, target_norm as f32)?;
            let c = tape.div(dot.expect("accumulated"), n)?;
            let c = tape.neg(c)?;
            tape.add_scalar(c, 1.0)?
        }
        MatchMode::NormDifference => {
            let n = tape.sqrt(diff_sq.expect("accumulated"))?;
            let c = tape.div(dot.expect("accumulated"), n)?;
            let c = tape.neg(c)?;
            tape.add_scalar(c, 1.0)?
        }
        MatchMode::L2 => diff_sq.expect("accumulated"),
    };
    if tv_weight == 0.0 {
        return Ok(base);
    }
    let t = tv_tape(tape, image, tv_reduction)?;
    let t = tape.scale(t, tv_weight as f32)?;
    Ok(tape.add(base, t)?)
}

/// Matching loss at `dummy` and, when asked, its gradient with respect to `dummy`.
pub fn attack_objective(
    model: &ParamSet,
    target: &[Tensor],
    labels: &[f32],
    dummy: &Tensor,
    cfg: &AttackConfig,
    with_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let mut tape = Tape::higher_order();
    let x = tape.leaf(dummy.clone());
    let vars = model.bind(&mut tape);
    let leaves: Vec<Var> = model.trainable_indices().into_iter().map(|i| vars[i]).collect();
    let f = forward_tape(&mut tape, model, &vars, x, cfg.bn_mode)?;
    let l = bce_loss(&mut tape, f.logits, labels)?;
    let g = tape.grad(l, &leaves)?;
    let m = match_loss(&mut tape, &g, target, x, cfg.tv_weight, cfg.tv_reduction, cfg.mode)?;
    let loss = tape.value(m)?.item()? as f64;
    if !with_grad {
        return Ok((loss, None));
    }
    let gx = tape.grad_detached(m, &[x])?[0];
    Ok((loss, Some(tape.value(gx)?.clone())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    /// Normalized-space dummy batch after the last step.
    pub dummy: Tensor,
    pub final_loss: Option<f64>,
    pub aborted: Option<String>,
    pub trace: Vec<TracePoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionResult {
    pub best_trial: usize,
    pub best_loss: f64,
    /// Normalized-space best batch `[N, 1, S, S]`.
    pub best_dummy: Tensor,
    /// Best batch mapped to pixels and clamped to `[0, 1]`, one `[S, S]` per image.
    pub images: Vec<Tensor>,
    pub labels: Vec<f32>,
    pub trials: Vec<TrialResult>,
}

fn run_trial(model: &ParamSet, target: &[Tensor], labels: &[f32], cfg: &AttackConfig, rng: &RngStream, trial: usize) -> Result<TrialResult> {
    let spec = model.spec();
    let shape = spec.input_shape(labels.len());
    let mut r = rng.child(format!("trial{trial}"));
    let n: usize = shape.iter().product();
    let mut x = Tensor::new(shape, (0..n).map(|_| r.normal() as f32).collect())?;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut m, mut v) = (vec![0f64; n], vec![0f64; n]);
    let mut trace = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let lr = cfg.lr_at(step);
        let (loss, g) = match attack_objective(model, target, labels, &x, cfg, true) {
            Ok(v) if v.0.is_finite() => v,
            Ok(_) => return Ok(aborted(trial, x, trace, "non-finite loss")),
            Err(CoreError::Tensor(e)) => return Ok(aborted(trial, x, trace, &e.to_string())),
            Err(e) => return Err(e),
        };
        trace.push(TracePoint { step, loss, lr });
        let g = g.expect("gradient requested");
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (k, (xv, &gv)) in x.data_mut().iter_mut().zip(g.data()).enumerate() {
            let s = if gv > 0.0 {
                1.0
            } else if gv < 0.0 {
                -1.0
            } else {
                0.0
            };
            m[k] = b1 * m[k] + (1.0 - b1) * s;
            v[k] = b2 * v[k] + (1.0 - b2) * s * s;
            let upd = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            *xv = (*xv as f64 - upd) as f32;
        }
    }
    match attack_objective(model, target, labels, &x, cfg, false) {
        Ok((loss, _)) if loss.is_finite() => Ok(TrialResult {
            trial,
            dummy: x,
            final_loss: Some(loss),
            aborted: None,
            trace,
        }),
        Ok(_) => Ok(aborted(trial, x, trace, "non-finite final loss")),
        Err(CoreError::Tensor(e)) => Ok(aborted(trial, x, trace, &e.to_string())),
        Err(e) => Err(e),
    }
}

/// Map a normalized `[N, 1, S, S]` dummy batch to `[S, S]` pixel images clamped to `[0, 1]`.
pub fn to_pixels(spec: &ModelSpec, dummy: &Tensor) -> Result<Vec<Tensor>> {
    let pixels = spec.denormalize(dummy);
    (0..dummy.shape()[0])
        .map(|i| {
            let img = pixels.select(i)?.reshape(&[spec.side, spec.side])?;
            Ok(img.map(|v| v.clamp(0.0, 1.0)))
        })
        .collect()
}

fn aborted(trial: usize, dummy: Tensor, trace: Vec<TracePoint>, why: &str) -> TrialResult {
    TrialResult {
        trial,
        dummy,
        final_loss: None,
        aborted: Some(why.to_string()),
        trace,
    }
}

/// Run `cfg.trials` independent reconstructions and keep the one with the
/// lowest final matching loss. Only the model, the target gradient and the
/// labels are used.
pub fn run_attack(model: &ParamSet, target: &[Tensor], labels: &[f32], cfg: &AttackConfig, rng: &RngStream) -> Result<ReconstructionResult> {
    if labels.is_empty() || cfg.trials == 0 {
        return Err(CoreError::Attack("need at least one label and one trial".into()));
    }
    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(model, target, labels, cfg, rng, t))
        .collect::<Result<Vec<_>>>()?;
    let best = trials
        .iter()
        .filter_map(|t| t.final_loss.map(|l| (t.trial, l)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .ok_or_else(|| CoreError::Attack("every trial aborted".into()))?;
    let dummy = trials[best.0].dummy.clone();
    let images = to_pixels(model.spec(), &dummy)?;
    Ok(ReconstructionResult {
        best_trial: best.0,
        best_loss: best.1,
        best_dummy: dummy,
        images,
        labels: labels.to_vec(),
        trials,
    })
}

#[derive(Serialize)]
struct BestMarker<'a> {
    best_trial: usize,
    best_loss: f64,
    labels: &'a [f32],
    trial_final_losses: Vec<Option<f64>>,
    aborted: Vec<Option<String>>,
}

impl ReconstructionResult {
    /// PGM and FTN1 images, one loss-trace CSV per trial and `best.json`.
    pub fn export(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(CoreError::at(dir))?;
        let mut files = Vec::new();
        for (i, img) in self.images.iter().enumerate() {
            let p = dir.join(format!("recon_{i:02}.pgm"));
            let mut buf = Vec::new();
            write_pgm(&mut buf, img)?;
            fs::write(&p, buf).map_err(CoreError::at(&p))?;
            files.push(p);
        }
        let stacked = Tensor::stack(&self.images)?;
        files.push(save_tensor(&dir.join("recon.ftn"), &stacked)?);
        for t in &self.trials {
            let p = dir.join(format!("trial_{}_trace.csv", t.trial));
            let mut w = csv::Writer::from_path(&p)?;
            for pt in &t.trace {
                w.serialize(pt)?;
            }
            w.flush()?;
            files.push(p);
        }
        let marker = BestMarker {
            best_trial: self.best_trial,
            best_loss: self.best_loss,
            labels: &self.labels,
            trial_final_losses: self.trials.iter().map(|t| t.final_loss).collect(),
            aborted: self.trials.iter().map(|t| t.aborted.clone()).collect(),
        };
        let p = dir.join("best.json");
        fs::write(&p, serde_json::to_vec_pretty(&marker)?).map_err(CoreError::at(&p))?;
        files.push(p);
        Ok(files)
    }
}
