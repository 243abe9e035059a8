//! DP-SGD and Rényi accounting for the Poisson-subsampled Gaussian mechanism.

use fedleak_tensor::{batch_grad, per_sample_grad, RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::models::{BatchLoss, ParamSet};

/// Rényi orders 1.1, 1.2, ..., 10.9 followed by 12, 13, ..., 63.
pub fn default_alpha_grid() -> Vec<f64> {
    (11..=109).map(|k| k as f64 / 10.0).chain((12..=63).map(f64::from)).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(CoreError::Privacy("empty alpha grid".into()));
    }
    if let Some(a) = grid.iter().find(|&&a| !(a > 1.0) || !a.is_finite()) {
        return Err(CoreError::Privacy(format!("alpha {a} must be finite and > 1")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClipBound {
    Global(f64),
    /// One bound per trainable tensor, in mask order.
    PerLayer(Vec<f64>),
}

impl ClipBound {
    fn check(&self, tensors: usize) -> Result<()> {
        let bounds: &[f64] = match self {
            ClipBound::Global(c) => std::slice::from_ref(c),
            ClipBound::PerLayer(v) => {
                if v.len() != tensors {
                    return Err(CoreError::Invalid(format!("{} per-layer bounds for {tensors} tensors", v.len())));
                }
                v
            }
        };
        if let Some(c) = bounds.iter().find(|&&c| !(c > 0.0)) {
            return Err(CoreError::Invalid(format!("clip bound {c} must be positive")));
        }
        Ok(())
    }

    /// ℓ2 sensitivity of one clipped sample.
    pub fn sensitivity(&self) -> f64 {
        match self {
            ClipBound::Global(c) => *c,
            ClipBound::PerLayer(v) => v.iter().map(|c| c * c).sum::<f64>().sqrt(),
        }
    }
}

fn sq_norm(ts: &[Tensor]) -> f64 {
    ts.iter().map(Tensor::sq_norm).sum()
}

fn scale_in_place(t: &mut Tensor, s: f64) {
    let s = s as f32;
    t.data_mut().iter_mut().for_each(|v| *v *= s);
}

/// Clip one sample's gradient (trainable tensors only) in place.
pub fn clip_per_sample(grads: &mut [Tensor], bound: &ClipBound) -> Result<()> {
    bound.check(grads.len())?;
    match bound {
        ClipBound::Global(c) => {
            let norm = sq_norm(grads).sqrt();
            if norm > *c {
                grads.iter_mut().for_each(|g| scale_in_place(g, c / norm));
            }
        }
        ClipBound::PerLayer(cs) => {
            for (g, c) in grads.iter_mut().zip(cs) {
                let norm = g.l2_norm();
                if norm > *c {
                    scale_in_place(g, c / norm);
                }
            }
        }
    }
    Ok(())
}

/// `(sum of clipped grads + N(0, (sigma * sensitivity)^2)) / L`.
///
/// `sigma = 0` skips the noise entirely, which also makes an infinite
/// bound usable.
pub fn privatize_batch(per_sample: Vec<Vec<Tensor>>, sigma: f64, bound: &ClipBound, rng: &mut RngStream) -> Result<Vec<Tensor>> {
    if per_sample.is_empty() {
        return Err(CoreError::Invalid("privatize_batch needs at least one sample".into()));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(CoreError::Invalid(format!("noise multiplier {sigma} must be nonnegative")));
    }
    let std = sigma * bound.sensitivity();
    if sigma > 0.0 && !std.is_finite() {
        return Err(CoreError::Invalid("noise with an infinite clip bound".into()));
    }
    let l = per_sample.len();
    let mut sum: Option<Vec<Tensor>> = None;
    for mut g in per_sample {
        clip_per_sample(&mut g, bound)?;
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                if acc.len() != g.len() {
                    return Err(CoreError::Shape("samples disagree on tensor count".into()));
                }
                for (a, b) in acc.iter_mut().zip(&g) {
                    if a.shape() != b.shape() {
                        return Err(CoreError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
                    }
                    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut out = sum.expect("non-empty batch");
    let inv = 1.0 / l as f64;
    for t in &mut out {
        for v in t.data_mut() {
            let noise = if sigma > 0.0 { std * rng.normal() } else { 0.0 };
            *v = ((*v as f64 + noise) * inv) as f32;
        }
    }
    Ok(out)
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// RDP of one subsampled Gaussian step at integer order `alpha >= 2`.
fn rdp_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let term = ln_binomial(alpha, k) + k as f64 * lq + (alpha - k) as f64 * l1q + (k * k - k) as f64 / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc.max(0.0) / (alpha - 1) as f64
}

/// Per-order RDP of one step with sampling rate `q` and noise multiplier `sigma`.
pub fn rdp_step(q: f64, sigma: f64, grid: &[f64]) -> Result<Vec<f64>> {
    check_grid(grid)?;
    if !(sigma > 0.0) {
        return Err(CoreError::Privacy(format!("noise multiplier {sigma} must be positive")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(CoreError::Privacy(format!("sampling rate {q} outside [0,1]")));
    }
    Ok(grid
        .iter()
        .map(|&a| {
            if q == 0.0 {
                0.0
            } else if q == 1.0 {
                a / (2.0 * sigma * sigma)
            } else {
                rdp_int(q, sigma, a.ceil() as u64)
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
}

/// Accumulated privacy cost of one client. Steps are stored as integer
/// counts per `(q, sigma)`, so composition never rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    grid: Vec<f64>,
    entries: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn new(grid: Vec<f64>) -> Result<Self> {
        check_grid(&grid)?;
        Ok(Self { grid, entries: Vec::new() })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn steps(&self) -> u64 {
        self.entries.iter().map(|e| e.steps).sum()
    }

    /// Charge `steps` steps. `sigma = 0` is allowed and costs infinite RDP.
    pub fn record(&mut self, q: f64, sigma: f64, steps: u64) -> Result<()> {
        if !(sigma >= 0.0) || !(0.0..=1.0).contains(&q) {
            return Err(CoreError::Privacy(format!("invalid step q={q}, sigma={sigma}")));
        }
        if steps == 0 {
            return Ok(());
        }
        match self
            .entries
            .iter_mut()
            .find(|e| e.q.to_bits() == q.to_bits() && e.sigma.to_bits() == sigma.to_bits())
        {
            Some(e) => e.steps += steps,
            None => self.entries.push(LedgerEntry { q, sigma, steps }),
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PrivacyLedger) -> Result<()> {
        if self.grid != other.grid {
            return Err(CoreError::Privacy("cannot merge ledgers over different grids".into()));
        }
        for e in &other.entries {
            self.record(e.q, e.sigma, e.steps)?;
        }
        Ok(())
    }

    /// Total RDP per grid order.
    pub fn rdp(&self) -> Result<Vec<f64>> {
        let mut total = vec![0.0; self.grid.len()];
        for e in &self.entries {
            let t = e.steps as f64;
            if e.q == 0.0 {
                continue;
            }
            if e.sigma == 0.0 {
                total.iter_mut().for_each(|v| *v = f64::INFINITY);
                continue;
            }
            if e.q == 1.0 {
                for (v, &a) in total.iter_mut().zip(&self.grid) {
                    *v += a * t / (2.0 * e.sigma * e.sigma);
                }
            } else {
                for (v, r) in total.iter_mut().zip(rdp_step(e.q, e.sigma, &self.grid)?) {
                    *v += t * r;
                }
            }
        }
        Ok(total)
    }

    pub fn epsilon(&self, delta: f64) -> Result<(f64, f64)> {
        to_epsilon(&self.rdp()?, &self.grid, delta)
    }
}

/// `(alpha*, eps)` minimizing `rdp(alpha) + ln(1/delta)/(alpha-1)`; ties go to the smaller order.
pub fn to_epsilon(rdp: &[f64], grid: &[f64], delta: f64) -> Result<(f64, f64)> {
    check_grid(grid)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CoreError::Privacy(format!("delta {delta} outside (0,1)")));
    }
    if rdp.len() != grid.len() {
        return Err(CoreError::Privacy(format!("{} RDP values for {} orders", rdp.len(), grid.len())));
    }
    let log_inv = (1.0 / delta).ln();
    let mut best = (grid[0], f64::INFINITY);
    for (&a, &r) in grid.iter().zip(rdp) {
        let eps = r + log_inv / (a - 1.0);
        if eps < best.1 {
            best = (a, eps);
        }
    }
    Ok(best)
}

pub fn delta_for_client(n_train: usize) -> f64 {
    (0.9 / n_train as f64).min(1e-2)
}

pub const SIGMA_RANGE: (f64, f64) = (0.1, 64.0);
pub const SIGMA_TOL: f64 = 1e-3;

fn eps_after(q: f64, sigma: f64, steps: u64, delta: f64, grid: &[f64]) -> Result<f64> {
    let mut l = PrivacyLedger::new(grid.to_vec())?;
    l.record(q, sigma, steps)?;
    Ok(l.epsilon(delta)?.1)
}

/// Smallest noise multiplier (to within [`SIGMA_TOL`]) whose accounted
/// epsilon after `steps` steps does not exceed `target_eps`.
pub fn calibrate_sigma(target_eps: f64, delta: f64, q: f64, steps: u64, grid: &[f64]) -> Result<f64> {
    if !(target_eps > 0.0) {
        return Err(CoreError::Privacy(format!("target epsilon {target_eps} must be positive")));
    }
    let (mut lo, mut hi) = SIGMA_RANGE;
    if eps_after(q, hi, steps, delta, grid)? > target_eps {
        return Err(CoreError::Privacy(format!(
            "epsilon {target_eps} unreachable with sigma <= {hi} ({steps} steps, q={q})"
        )));
    }
    if eps_after(q, lo, steps, delta, grid)? <= target_eps {
        return Ok(lo);
    }
    while hi - lo > SIGMA_TOL {
        let mid = 0.5 * (lo + hi);
        if eps_after(q, mid, steps, delta, grid)? <= target_eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Median per-sample gradient norm over `epochs` epochs of plain
/// centralized SGD on `(x, labels)`. `params` must not use batch statistics.
pub fn estimate_clip_bound(params: &ParamSet, x: &Tensor, labels: &[f32], epochs: usize, batch_size: usize, lr: f64, rng: &RngStream) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Err(CoreError::Data("empty auxiliary dataset".into()));
    }
    let mode = params.train_bn_mode();
    if mode != crate::models::BnMode::FixedStats {
        return Err(CoreError::Invalid("clip-bound estimation needs fixed normalization statistics".into()));
    }
    let mut params = params.clone();
    let b = batch_size.clamp(1, n);
    let mut norms = Vec::new();
    for e in 0..epochs {
        let order = rng.child(format!("epoch{e}")).permutation(n);
        for chunk in order.chunks(b) {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let loss = BatchLoss {
                params: &params,
                x,
                labels,
                mode,
            };
            let (bx, by) = loss.rows(&idx)?;
            let batch = BatchLoss {
                params: &params,
                x: &bx,
                labels: &by,
                mode,
            };
            let trainable = params.trainable_tensors();
            for g in per_sample_grad(&batch, &trainable)? {
                norms.push(sq_norm(&g).sqrt());
            }
            let (_, g) = batch_grad(&batch, &trainable, &(0..idx.len()).collect::<Vec<_>>())?;
            let updated = sgd(&trainable, &g, lr);
            params.set_trainable_tensors(updated)?;
        }
    }
    let m = median(&mut norms);
    if !(m > 0.0) {
        return Err(CoreError::Privacy("median gradient norm is zero".into()));
    }
    Ok(m)
}

pub(crate) fn sgd(params: &[Tensor], grads: &[Tensor], lr: f64) -> Vec<Tensor> {
    let lr = lr as f32;
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            let mut p = p.clone();
            p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= lr * d);
            p
        })
        .collect()
}

/// Median with the mean of the two middle values for even counts; NaN if empty.
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One client's accounting summary, shaped like a row of the budget table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LedgerReport {
    pub client_id: usize,
    pub n_train: usize,
    pub target_epsilon: Option<f64>,
    pub sigma: f64,
    pub sample_rate: f64,
    pub clip: ClipBound,
    pub steps: u64,
    pub delta: f64,
    pub alpha_star: f64,
    pub epsilon: f64,
    pub sampling: String,
    pub alphas: Vec<f64>,
    pub rdp: Vec<f64>,
}

pub const SAMPLING_NOTE: &str = "accounted as Poisson subsampling; batches drawn by shuffling";

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_slice(v).unwrap()
    }

    #[test]
    fn grid_shape() {
        let g = default_alpha_grid();
        assert_eq!(g.len(), 99 + 52);
        assert_eq!((g[0], g[98], g[99], g[150]), (1.1, 10.9, 12.0, 63.0));
    }

    #[test]
    fn clipping() {
        let mut g = vec![t(&[3.0, 4.0])];
        clip_per_sample(&mut g, &ClipBound::Global(1.0)).unwrap();
        assert!((g[0].data()[0] - 0.6).abs() < 1e-7 && (g[0].data()[1] - 0.8).abs() < 1e-7);
        let mut small = vec![t(&[0.1, 0.2])];
        clip_per_sample(&mut small, &ClipBound::Global(1.0)).unwrap();
        assert_eq!(small[0].data(), &[0.1, 0.2]);
        let mut a = vec![t(&[1.0, -2.0, 0.5])];
        let mut b = a.clone();
        clip_per_sample(&mut a, &ClipBound::Global(0.42)).unwrap();
        clip_per_sample(&mut b, &ClipBound::PerLayer(vec![0.42])).unwrap();
        assert_eq!(a, b);
        assert!(clip_per_sample(&mut a, &ClipBound::Global(0.0)).is_err());
        assert!(clip_per_sample(&mut a, &ClipBound::PerLayer(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn per_layer_clips_each_tensor() {
        let mut g = vec![t(&[3.0, 4.0]), t(&[0.5])];
        clip_per_sample(&mut g, &ClipBound::PerLayer(vec![1.0, 1.0])).unwrap();
        assert!((g[0].l2_norm() - 1.0).abs() < 1e-6);
        assert_eq!(g[1].data(), &[0.5]);
    }

    #[test]
    fn privatize_without_noise_is_clipped_mean() {
        let mut r = RngStream::new(0, "n");
        let out = privatize_batch(vec![vec![t(&[3.0, 4.0])], vec![t(&[0.0, 0.5])]], 0.0, &ClipBound::Global(1.0), &mut r).unwrap();
        assert!((out[0].data()[0] - 0.3).abs() < 1e-7);
        assert!((out[0].data()[1] - 0.65).abs() < 1e-7);
        let inf = privatize_batch(vec![vec![t(&[3.0, 4.0])]], 0.0, &ClipBound::Global(f64::INFINITY), &mut r).unwrap();
        assert_eq!(inf[0].data(), &[3.0, 4.0]);
        assert!(privatize_batch(vec![vec![t(&[1.0])]], -1.0, &ClipBound::Global(1.0), &mut r).is_err());
        assert!(privatize_batch(vec![], 1.0, &ClipBound::Global(1.0), &mut r).is_err());
    }

    fn noise_std(l: usize, draws: usize) -> f64 {
        let mut r = RngStream::new(7, "noise");
        let mut vals = Vec::with_capacity(draws);
        for _ in 0..draws {
            let g = vec![vec![t(&[0.0])]; l];
            vals.push(privatize_batch(g, 1.0, &ClipBound::Global(1.0), &mut r).unwrap()[0].data()[0] as f64);
        }
        let mean = vals.iter().sum::<f64>() / draws as f64;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt()
    }

    #[test]
    fn noise_statistics() {
        let s1 = noise_std(1, 10_000);
        assert!((0.97..=1.03).contains(&s1), "{s1}");
        let s2 = noise_std(2, 10_000);
        assert!((s2 / s1 - 0.5).abs() < 0.03, "{s2} vs {s1}");
    }

    #[test]
    fn full_batch_rdp_closed_form() {
        let r = rdp_step(1.0, 1.0, &[2.0]).unwrap();
        assert_eq!(r, vec![1.0]);
        let mut l = PrivacyLedger::new(vec![3.0]).unwrap();
        l.record(1.0, 2.0, 10).unwrap();
        assert_eq!(l.rdp().unwrap(), vec![3.75]);
        assert!(rdp_step(0.5, 0.0, &[2.0]).is_err());
        assert!(rdp_step(0.5, 1.0, &[]).is_err());
    }

    /// Rényi divergence of the subsampled Gaussian by direct quadrature of
    /// E_{z~N(0,s^2)} [((1-q) + q exp((2z-1)/(2s^2)))^a].
    fn quadrature_rdp(q: f64, s: f64, a: f64) -> f64 {
        let (lo, hi, n) = (-20.0 * s, 20.0 * s + 1.0, 200_000usize);
        let h = (hi - lo) / n as f64;
        let f = |z: f64| {
            let p0 = (-(z * z) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            p0 * ((1.0 - q) + q * ((2.0 * z - 1.0) / (2.0 * s * s)).exp()).powf(a)
        };
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        (acc * h / 3.0).ln() / (a - 1.0)
    }

    #[test]
    fn subsampled_rdp_matches_quadrature() {
        for (q, s, a) in [(0.1, 1.0, 2.0), (0.1, 1.0, 5.0), (0.05, 2.0, 8.0), (0.3, 1.5, 3.0)] {
            let got = rdp_step(q, s, &[a]).unwrap()[0];
            let want = quadrature_rdp(q, s, a);
            assert!((got - want).abs() < 1e-6, "q={q} s={s} a={a}: {got} vs {want}");
        }
    }

    #[test]
    fn fractional_alpha_uses_ceiling() {
        let r = rdp_step(0.1, 1.0, &[2.3, 3.0]).unwrap();
        assert_eq!(r[0], r[1]);
    }

    #[test]
    fn epsilon_examples() {
        let (a, e) = to_epsilon(&[3.75], &[3.0], 1e-2).unwrap();
        assert_eq!(a, 3.0);
        assert!((e - (3.75 + 100f64.ln() / 2.0)).abs() < 1e-12);
        assert!((e - 6.0526).abs() < 1e-4);
        let g = default_alpha_grid();
        let (a, e) = to_epsilon(&vec![0.0; g.len()], &g, 1e-5).unwrap();
        assert_eq!(a, 63.0);
        assert!((e - 1e5f64.ln() / 62.0).abs() < 1e-12);
        assert!(to_epsilon(&[], &[], 1e-2).is_err());
        assert!(to_epsilon(&[1.0], &[2.0], 1.0).is_err());
    }

    #[test]
    fn delta_policy() {
        assert!((delta_for_client(350) - 0.9 / 350.0).abs() < 1e-18);
        assert_eq!(delta_for_client(1), 1e-2);
        assert_eq!(delta_for_client(90), 1e-2);
    }

    #[test]
    fn zero_noise_costs_infinity() {
        let mut l = PrivacyLedger::new(default_alpha_grid()).unwrap();
        l.record(0.5, 0.0, 1).unwrap();
        assert!(l.epsilon(1e-2).unwrap().1.is_infinite());
    }

    #[test]
    fn calibration_properties() {
        let g = default_alpha_grid();
        let s10 = calibrate_sigma(10.0, 1e-2, 1.0, 10, &g).unwrap();
        let s1 = calibrate_sigma(1.0, 1e-2, 1.0, 10, &g).unwrap();
        assert!(s10 < s1);
        let s20 = calibrate_sigma(1.0, 1e-2, 1.0, 20, &g).unwrap();
        assert!(s20 >= s1);
        assert!(calibrate_sigma(1e-4, 1e-2, 1.0, 10_000, &g).is_err());
        assert!(calibrate_sigma(0.0, 1e-2, 1.0, 10, &g).is_err());
    }

    #[test]
    fn clip_bound_rejects_constant_loss() {
        use crate::models::{build_model, FreezeMode, ModelSpec};
        let spec = ModelSpec::mlp(4, vec![2, 1]);
        let mut p = build_model(&spec, &RngStream::new(0, "m")).unwrap();
        let vals: Vec<Tensor> = p
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| Tensor::full(t.shape(), if i == 3 { 40.0 } else { 0.0 }).unwrap())
            .collect();
        p.set_trainable_tensors(vals).unwrap();
        let p = p.apply_freeze(FreezeMode::AllButLast);
        let x = Tensor::full(&[3, 1, 4, 4], 0.5).unwrap();
        let r = estimate_clip_bound(&p, &x, &[1.0, 1.0, 1.0], 1, 2, 0.1, &RngStream::new(0, "c"));
        assert!(matches!(r, Err(CoreError::Privacy(_))), "{r:?}");
        assert!(estimate_clip_bound(&p, &x, &[], 1, 2, 0.1, &RngStream::new(0, "c")).is_err());
    }

    proptest! {
        #[test]
        fn composition_is_exact(a in 0u64..500, b in 0u64..500, q in 0.01f64..1.0, s in 0.5f64..5.0) {
            let g = default_alpha_grid();
            let mut split = PrivacyLedger::new(g.clone()).unwrap();
            split.record(q, s, a).unwrap();
            let mut other = PrivacyLedger::new(g.clone()).unwrap();
            other.record(q, s, b).unwrap();
            split.merge(&other).unwrap();
            let mut whole = PrivacyLedger::new(g).unwrap();
            whole.record(q, s, a + b).unwrap();
            prop_assert_eq!(split.rdp().unwrap(), whole.rdp().unwrap());
        }

        #[test]
        fn accumulation_is_monotone(steps in 1u64..200, q in 0.01f64..1.0, s in 0.5f64..5.0) {
            let g = default_alpha_grid();
            let mut l = PrivacyLedger::new(g).unwrap();
            l.record(q, s, steps).unwrap();
            let before = l.rdp().unwrap();
            l.record(q, s, 1).unwrap();
            for (x, y) in before.iter().zip(l.rdp().unwrap()) {
                prop_assert!(y >= *x);
            }
        }

        #[test]
        fn epsilon_matches_brute_force(rdp in prop::collection::vec(0.0f64..50.0, 151), delta in 1e-6f64..0.5) {
            let g = default_alpha_grid();
            let (a, e) = to_epsilon(&rdp, &g, delta).unwrap();
            let brute = g.iter().zip(&rdp).map(|(al, r)| r + (1.0 / delta).ln() / (al - 1.0)).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(e, brute);
            let i = g.iter().position(|&x| x == a).unwrap();
            prop_assert_eq!(rdp[i] + (1.0 / delta).ln() / (a - 1.0), e);
        }
    }
}
