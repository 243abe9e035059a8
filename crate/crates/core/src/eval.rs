//! Metrics: PSNR, greedy reconstruction matching, AUC, MAE, gradient-norm
//! summaries and attribute probes.

use std::path::Path;

use fedleak_tensor::{RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{CoreError, Result};
use crate::fed::RoundReport;
use crate::models::{bce_loss, build_model, forward, forward_tape, BnMode, FreezeMode, ModelSpec, ParamSet};

/// Peak signal-to-noise ratio in dB. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, max_i: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CoreError::Shape(format!("psnr of {:?} and {:?}", a.shape(), b.shape())));
    }
    if !(max_i > 0.0) {
        return Err(CoreError::Invalid(format!("max_i {max_i} must be positive")));
    }
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (max_i / mse.sqrt()).log10())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub reconstruction: usize,
    pub original: usize,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchAssignment {
    /// `perm[r]` is the original matched to reconstruction `r`.
    pub perm: Vec<usize>,
    /// Pairs in selection order.
    pub pairs: Vec<MatchedPair>,
}

impl MatchAssignment {
    pub fn mean_psnr(&self) -> f64 {
        self.pairs.iter().map(|p| p.psnr).sum::<f64>() / self.pairs.len() as f64
    }

    pub fn best_psnr(&self) -> f64 {
        self.pairs.iter().map(|p| p.psnr).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Greedy assignment on a score matrix indexed `[original][reconstruction]`.
/// Ties go to the lowest original, then lowest reconstruction index.
pub fn greedy_match_scores(scores: &[Vec<f64>]) -> Result<MatchAssignment> {
    let n = scores.len();
    if n == 0 || scores.iter().any(|r| r.len() != n) {
        return Err(CoreError::Invalid("greedy matching needs a non-empty square matrix".into()));
    }
    let (mut used_o, mut used_r) = (vec![false; n], vec![false; n]);
    let mut perm = vec![0; n];
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(usize, usize)> = None;
        for o in (0..n).filter(|&o| !used_o[o]) {
            for r in (0..n).filter(|&r| !used_r[r]) {
                if best.is_none_or(|(bo, br)| scores[o][r] > scores[bo][br]) {
                    best = Some((o, r));
                }
            }
        }
        let (o, r) = best.expect("remaining pair");
        used_o[o] = true;
        used_r[r] = true;
        perm[r] = o;
        pairs.push(MatchedPair {
            reconstruction: r,
            original: o,
            psnr: scores[o][r],
        });
    }
    Ok(MatchAssignment { perm, pairs })
}

pub fn greedy_match(originals: &[Tensor], reconstructions: &[Tensor], max_i: f64) -> Result<MatchAssignment> {
    if originals.len() != reconstructions.len() {
        return Err(CoreError::Invalid(format!(
            "{} originals vs {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    let scores = originals
        .iter()
        .map(|o| reconstructions.iter().map(|r| psnr(o, r, max_i)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    greedy_match_scores(&scores)
}

/// Area under the ROC curve via the Mann-Whitney statistic, ties counted as 1/2.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::Invalid("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(CoreError::Invalid("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(CoreError::Invalid("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(CoreError::Invalid("mae needs equal non-empty inputs".into()));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean PSNR of each original against `draws` uniform-noise images.
pub fn random_baseline_psnr(originals: &[Tensor], draws: usize, max_i: f64, rng: &mut RngStream) -> Result<f64> {
    if originals.is_empty() || draws == 0 {
        return Err(CoreError::Invalid("random baseline needs originals and draws".into()));
    }
    let mut total = 0.0;
    for o in originals {
        for _ in 0..draws {
            let noise = Tensor::new(o.shape().to_vec(), (0..o.numel()).map(|_| rng.uniform() as f32).collect())?;
            total += psnr(o, &noise, max_i)?;
        }
    }
    Ok(total / (originals.len() * draws) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub round: usize,
    pub layer: String,
    pub mean_of_medians: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSummary {
    pub rows: Vec<NormRow>,
    /// `(round, mean over layers of the per-layer value)`.
    pub overall: Vec<(usize, f64)>,
}

/// Per round and layer, the mean over clients of their median step norms.
pub fn norm_summary(reports: &[RoundReport], layers: &[String]) -> NormSummary {
    let mut rows = Vec::new();
    let mut overall = Vec::new();
    for r in reports {
        let mut per_layer = Vec::new();
        for (l, name) in layers.iter().enumerate() {
            let vals: Vec<f64> = r
                .clients
                .iter()
                .filter_map(|c| c.median_grad_norms.get(l).copied())
                .filter(|v| v.is_finite())
                .collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            per_layer.push(m);
            rows.push(NormRow {
                round: r.round,
                layer: name.clone(),
                mean_of_medians: m,
            });
        }
        if !per_layer.is_empty() {
            overall.push((r.round, per_layer.iter().sum::<f64>() / per_layer.len() as f64));
        }
    }
    NormSummary { rows, overall }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    AttrBinary,
    AttrScalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.05,
        }
    }
}

/// A small_cnn trained to predict one synthetic attribute from pixels.
pub struct Probe {
    pub task: ProbeTask,
    model: ParamSet,
}

fn attr_target(img: &LabeledImage, task: ProbeTask) -> Result<f32> {
    let a = img.attributes.ok_or_else(|| CoreError::Data("probe image without attributes".into()))?;
    Ok(match task {
        ProbeTask::AttrBinary => a.attr_binary as f32,
        ProbeTask::AttrScalar => a.attr_scalar,
    })
}

fn pixel_batch(spec: &ModelSpec, images: &[&Tensor]) -> Result<Tensor> {
    let s = spec.side;
    let mut data = Vec::with_capacity(images.len() * s * s);
    for img in images {
        if img.shape() != [s, s] {
            return Err(CoreError::Shape(format!("probe input {:?}, expected [{s}, {s}]", img.shape())));
        }
        data.extend(img.data().iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(spec.normalize(&Tensor::new(vec![images.len(), 1, s, s], data)?))
}

pub fn train_probe(train: &[LabeledImage], task: ProbeTask, spec: &ModelSpec, cfg: &ProbeConfig, rng: &RngStream) -> Result<Probe> {
    if train.is_empty() {
        return Err(CoreError::Data("empty probe training set".into()));
    }
    let targets = train.iter().map(|i| attr_target(i, task)).collect::<Result<Vec<_>>>()?;
    let x = pixel_batch(spec, &train.iter().map(|i| &i.image).collect::<Vec<_>>())?;
    let mut model = build_model(spec, &rng.child("init"))?.apply_freeze(FreezeMode::BatchNorm);
    let n = train.len();
    let b = cfg.batch_size.clamp(1, n);
    for e in 0..cfg.epochs {
        for batch in crate::fed::epoch_batches(rng, e, n, b) {
            let rows = batch.iter().map(|&i| x.select(i)).collect::<fedleak_tensor::Result<Vec<_>>>()?;
            let bx = Tensor::stack(&rows)?;
            let by: Vec<f32> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let xv = tape.constant(bx);
            let f = forward_tape(&mut tape, &model, &vars, xv, BnMode::FixedStats)?;
            let loss = match task {
                ProbeTask::AttrBinary => bce_loss(&mut tape, f.logits, &by)?,
                ProbeTask::AttrScalar => {
                    let t = tape.constant(Tensor::new(vec![by.len(), 1], by)?);
                    let d = tape.sub(f.logits, t)?;
                    let sq = tape.mul(d, d)?;
                    tape.mean(sq)?
                }
            };
            let idx = model.trainable_indices();
            let leaves: Vec<Var> = idx.iter().map(|&i| vars[i]).collect();
            let grads = tape.grad(loss, &leaves)?;
            let grads = grads
                .into_iter()
                .map(|g| tape.value(g).cloned())
                .collect::<fedleak_tensor::Result<Vec<_>>>()?;
            let updated = crate::dp::sgd(&model.trainable_tensors(), &grads, cfg.lr);
            model.set_trainable_tensors(updated)?;
        }
    }
    Ok(Probe { task, model })
}

impl Probe {
    /// Scores for pixel-space `[S, S]` images (clamped to `[0,1]` first).
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<f64>> {
        let x = pixel_batch(self.model.spec(), images)?;
        let z = forward(&self.model, &x, BnMode::FixedStats)?;
        Ok(z.data().iter().map(|&v| v as f64).collect())
    }

    /// AUC for the binary task, MAE for the scalar task.
    pub fn score(&self, images: &[&Tensor], truth: &[&LabeledImage]) -> Result<f64> {
        let pred = self.predict(images)?;
        let t = truth.iter().map(|i| attr_target(i, self.task)).collect::<Result<Vec<_>>>()?;
        match self.task {
            ProbeTask::AttrBinary => auc(&pred, &t.iter().map(|&v| v as u8).collect::<Vec<_>>()),
            ProbeTask::AttrScalar => mae(&pred, &t.iter().map(|&v| v as f64).collect::<Vec<_>>()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    /// `auc` or `mae`.
    pub metric: String,
    pub score_original: f64,
    pub score_reconstruction: f64,
    pub samples: usize,
}

/// Train a probe on `train` and score it on originals and on their
/// reconstructions (same indices, attributes taken from the originals).
pub fn attribute_probe(
    train: &[LabeledImage],
    eval_orig: &[LabeledImage],
    eval_recon: &[Tensor],
    task: ProbeTask,
    spec: &ModelSpec,
    cfg: &ProbeConfig,
    rng: &RngStream,
) -> Result<ProbeReport> {
    if eval_orig.len() != eval_recon.len() || eval_orig.is_empty() {
        return Err(CoreError::Invalid("probe needs one reconstruction per original".into()));
    }
    let probe = train_probe(train, task, spec, cfg, rng)?;
    let truth: Vec<&LabeledImage> = eval_orig.iter().collect();
    let orig: Vec<&Tensor> = eval_orig.iter().map(|i| &i.image).collect();
    Ok(ProbeReport {
        task,
        metric: match task {
            ProbeTask::AttrBinary => "auc".into(),
            ProbeTask::AttrScalar => "mae".into(),
        },
        score_original: probe.score(&orig, &truth)?,
        score_reconstruction: probe.score(&eval_recon.iter().collect::<Vec<_>>(), &truth)?,
        samples: eval_orig.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub metric: String,
    pub reduction: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(experiment: &str, metric: &str, reduction: &str, value: f64) -> Self {
        Self {
            experiment: experiment.into(),
            metric: metric.into(),
            reduction: reduction.into(),
            value,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fed::ClientRound;
    use proptest::prelude::*;

    fn img(v: &[f32]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = img(&[0.0; 4]);
        let b = img(&[0.1; 4]);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &img(&[0.0; 3]), 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn random_pairs_sit_near_7_8_db() {
        let mut r = RngStream::new(0, "mc");
        let mut total = 0.0;
        for _ in 0..10_000 {
            let mut draw = || Tensor::new(vec![16, 16], (0..256).map(|_| r.uniform() as f32).collect()).unwrap();
            let (a, b) = (draw(), draw());
            total += psnr(&a, &b, 1.0).unwrap();
        }
        let mean = total / 10_000.0;
        assert!((mean - 7.8).abs() < 0.1, "{mean}");
    }

    #[test]
    fn greedy_examples() {
        let id = greedy_match_scores(&[vec![10.0, 1.0], vec![1.0, 10.0]]).unwrap();
        assert_eq!(id.perm, vec![0, 1]);
        let g = greedy_match_scores(&[vec![10.0, 9.0], vec![8.0, 1.0]]).unwrap();
        assert_eq!(g.perm, vec![0, 1]);
        assert_eq!(g.pairs.iter().map(|p| p.psnr).collect::<Vec<_>>(), vec![10.0, 1.0]);
        let one = greedy_match(&[img(&[0.5])], &[img(&[0.2])], 1.0).unwrap();
        assert_eq!(one.perm, vec![0]);
        assert!(greedy_match(&[img(&[0.5])], &[], 1.0).is_err());
    }

    #[test]
    fn auc_examples() {
        assert!((auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    fn brute_auc(s: &[f64], l: &[u8]) -> f64 {
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    pairs += 1.0;
                    acc += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        acc / pairs
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count_and_is_rank_invariant(
            raw in prop::collection::vec((0u8..6, 0u8..2), 2..40)
        ) {
            let s: Vec<f64> = raw.iter().map(|(v, _)| *v as f64 / 5.0).collect();
            let l: Vec<u8> = raw.iter().map(|(_, c)| *c).collect();
            prop_assume!(l.contains(&0) && l.contains(&1));
            let a = auc(&s, &l).unwrap();
            prop_assert!((a - brute_auc(&s, &l)).abs() < 1e-12);
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert!((auc(&t, &l).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn psnr_symmetric_and_decreasing(seed in any::<u64>()) {
            let mut r = RngStream::new(seed, "p");
            let a = Tensor::new(vec![4, 4], (0..16).map(|_| r.uniform() as f32).collect()).unwrap();
            let b = Tensor::new(vec![4, 4], (0..16).map(|_| r.uniform() as f32).collect()).unwrap();
            prop_assume!(a != b);
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
            let far = b.map(|v| v + 0.5);
            let near_mse = psnr(&a, &b, 1.0).unwrap();
            let diff: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + 2.0 * (y - x)).collect();
            let doubled = Tensor::new(vec![4, 4], diff).unwrap();
            prop_assert!(psnr(&a, &doubled, 1.0).unwrap() < near_mse);
            prop_assert!(psnr(&a, &far, 1.0).unwrap().is_finite());
        }

        #[test]
        fn greedy_pairs_are_non_increasing(vals in prop::collection::vec(0.0f64..40.0, 25)) {
            let m: Vec<Vec<f64>> = vals.chunks(5).map(|c| c.to_vec()).collect();
            let g = greedy_match_scores(&m).unwrap();
            let mut seen = g.perm.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..5).collect::<Vec<_>>());
            for w in g.pairs.windows(2) {
                prop_assert!(w[0].psnr >= w[1].psnr);
            }
        }
    }

    fn report(round: usize, medians: &[&[f64]]) -> RoundReport {
        RoundReport {
            round,
            lr: 0.01,
            selected: (0..medians.len()).collect(),
            clients: medians
                .iter()
                .enumerate()
                .map(|(i, m)| ClientRound {
                    client_id: i,
                    n_train: 1,
                    steps: 1,
                    mean_loss: 0.0,
                    median_grad_norms: m.to_vec(),
                })
                .collect(),
            val_auc: vec![],
            mean_val_auc: None,
        }
    }

    #[test]
    fn norm_summary_examples() {
        let mut norms = vec![1.0, 2.0, 9.0];
        let med = crate::dp::median(&mut norms);
        let s = norm_summary(&[report(1, &[&[med]])], &["w".into()]);
        assert_eq!(s.rows[0].mean_of_medians, 2.0);
        let s = norm_summary(&[report(1, &[&[2.0], &[4.0]])], &["w".into()]);
        assert_eq!(s.overall, vec![(1, 3.0)]);
    }

    #[test]
    fn metrics_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![MetricRow::new("e", "psnr", "best", 12.5)];
        write_metrics(&p, &rows).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }
}
