//! FedAvg simulation: local SGD, weighted aggregation, plateau scheduling,
//! early stopping and optional DP-SGD per client.

use std::collections::BTreeMap;
use std::path::Path;

use fedleak_tensor::{batch_grad, per_sample_grad, RngStream, Tape, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{self, calibrate_sigma, default_alpha_grid, delta_for_client, median, privatize_batch, ClipBound, PrivacyLedger};
use crate::error::{CoreError, Result};
use crate::eval::auc;
use crate::models::{bce_loss, forward_tape, predict, BatchLoss, BnMode, FreezeMode, ParamSet};

/// DP-SGD settings shared by all clients. Each client gets its own noise
/// multiplier, calibrated to `target_epsilon` at its own delta, unless
/// `sigma` pins one for everybody.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub target_epsilon: f64,
    pub clip: ClipBound,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_alpha_grid")]
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subsample {
    pub fraction: f64,
    #[serde(default)]
    pub per_client_round_cap: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Defaults to 20, or 10 with DP.
    pub max_rounds: Option<usize>,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_plateau_factor: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub freeze_mode: FreezeMode,
    pub dp: Option<DpConfig>,
    pub subsample: Option<Subsample>,
    /// Clients whose per-round updates are kept for attacks.
    pub attackable: Vec<usize>,
    /// Rounds (1-based) to snapshot; all rounds when empty.
    pub snapshot_rounds: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_rounds: None,
            local_epochs: 1,
            batch_size: 10,
            lr: 1e-2,
            lr_plateau_factor: 0.1,
            lr_patience: 3,
            early_stop_patience: 5,
            freeze_mode: FreezeMode::BatchNorm,
            dp: None,
            subsample: None,
            attackable: Vec::new(),
            snapshot_rounds: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn rounds(&self) -> usize {
        self.max_rounds.unwrap_or(if self.dp.is_some() { 10 } else { 20 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds() == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("rounds, local_epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_plateau_factor > 0.0 && self.lr_plateau_factor <= 1.0) {
            return Err(CoreError::Config("lr must be positive and the plateau factor in (0,1]".into()));
        }
        if self.dp.is_some() && self.freeze_mode == FreezeMode::None {
            return Err(CoreError::Config(
                "DP-SGD needs per-sample gradients; batch statistics (freeze_mode = none) mix samples".into(),
            ));
        }
        if let Some(s) = &self.subsample {
            if !(s.fraction > 0.0 && s.fraction <= 1.0) {
                return Err(CoreError::Config(format!("subsample fraction {} outside (0,1]", s.fraction)));
            }
        }
        Ok(())
    }
}

/// One client's tensors, already normalized for the model.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub id: usize,
    pub train_x: Tensor,
    pub train_y: Vec<f32>,
    pub val: Option<(Tensor, Vec<f32>)>,
}

impl ClientData {
    pub fn n_train(&self) -> usize {
        self.train_y.len()
    }
}

/// Noise and clipping applied to one client's steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDp {
    pub sigma: f64,
    pub clip: ClipBound,
}

#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub params: ParamSet,
    pub steps: usize,
    pub batch_size: usize,
    pub sample_rate: f64,
    pub mean_loss: f64,
    /// Median over steps of each trainable tensor's gradient norm.
    pub median_grad_norms: Vec<f64>,
}

/// Shuffled mini-batches for one epoch; indices inside a batch are sorted.
pub fn epoch_batches(rng: &RngStream, epoch: usize, n: usize, b: usize) -> Vec<Vec<usize>> {
    let order = rng.child(format!("epoch{epoch}")).permutation(n);
    order
        .chunks(b)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

/// Stream a client uses in a round.
pub fn client_round_rng(root: &RngStream, round: usize, client: usize) -> RngStream {
    root.child(format!("round{round}/client{client}"))
}

/// Per-BN-layer `(mean, var)` of one step and the count they were taken over.
type BatchMoments = (Vec<(Tensor, Tensor)>, usize);

/// Gradient of the mean loss over `samples`, plus BN batch moments when
/// training with batch statistics.
fn step_grad(params: &ParamSet, x: &Tensor, y: &[f32], samples: &[usize], mode: BnMode) -> Result<(f64, Vec<Tensor>, Option<BatchMoments>)> {
    let loss = BatchLoss { params, x, labels: y, mode };
    if mode == BnMode::FixedStats {
        let (l, g) = batch_grad(&loss, &params.trainable_tensors(), samples)?;
        return Ok((l as f64, g, None));
    }
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.trainable_tensors().into_iter().map(|t| tape.leaf(t)).collect();
    let vars = loss.bind_with(&mut tape, &leaves);
    let (bx, by) = loss.rows(samples)?;
    let xv = tape.constant(bx);
    let f = forward_tape(&mut tape, params, &vars, xv, mode)?;
    let l = bce_loss(&mut tape, f.logits, &by)?;
    let grads = tape.grad(l, &leaves)?;
    let grads = grads
        .into_iter()
        .map(|g| tape.value(g).cloned())
        .collect::<fedleak_tensor::Result<Vec<_>>>()?;
    let moments = f
        .batch_moments
        .iter()
        .map(|&(m, v)| Ok((tape.value(m)?.clone(), tape.value(v)?.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.value(l)?.item()? as f64, grads, Some((moments, f.moment_count))))
}

/// Train a copy of `global` on one client's data.
pub fn local_train(
    client: &ClientData,
    global: &ParamSet,
    cfg: &TrainConfig,
    lr: f64,
    dp: Option<(&ClientDp, &mut PrivacyLedger)>,
    rng: &RngStream,
) -> Result<LocalOutcome> {
    let n = client.n_train();
    if n == 0 {
        return Err(CoreError::Data(format!("client {} has no training data", client.id)));
    }
    if dp.is_some() && global.freeze_mode() == FreezeMode::None {
        return Err(CoreError::Config("DP-SGD with batch statistics is not per-sample decomposable".into()));
    }
    let mode = global.train_bn_mode();
    let b = cfg.batch_size.min(n);
    let q = b as f64 / n as f64;
    let mut params = global.clone();
    let mut norms: Vec<Vec<f64>> = vec![Vec::new(); params.trainable_indices().len()];
    let mut losses = Vec::new();
    let mut steps = 0;
    let mut noise_rng = rng.child("noise");
    for e in 0..cfg.local_epochs {
        for batch in epoch_batches(rng, e, n, b) {
            let (loss, grads, moments) = step_grad(&params, &client.train_x, &client.train_y, &batch, mode)?;
            for (trace, g) in norms.iter_mut().zip(&grads) {
                trace.push(g.l2_norm());
            }
            losses.push(loss);
            let update = match &dp {
                None => grads,
                Some((cdp, _)) => {
                    let (bx, by) = BatchLoss {
                        params: &params,
                        x: &client.train_x,
                        labels: &client.train_y,
                        mode,
                    }
                    .rows(&batch)?;
                    let loss = BatchLoss {
                        params: &params,
                        x: &bx,
                        labels: &by,
                        mode,
                    };
                    let per = per_sample_grad(&loss, &params.trainable_tensors())?;
                    privatize_batch(per, cdp.sigma, &cdp.clip, &mut noise_rng)?
                }
            };
            let updated = dp::sgd(&params.trainable_tensors(), &update, lr);
            params.set_trainable_tensors(updated)?;
            if let Some((m, count)) = moments {
                params.update_running_stats(&m, count)?;
            }
            steps += 1;
        }
    }
    if let Some((cdp, ledger)) = dp {
        ledger.record(q, cdp.sigma, steps as u64)?;
    }
    Ok(LocalOutcome {
        params,
        steps,
        batch_size: b,
        sample_rate: q,
        mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        median_grad_norms: norms.iter_mut().map(|v| median(v)).collect(),
    })
}

/// Weighted average `sum_k n_k / sum(n) * theta_k`, accumulated in f64 in
/// the given order. Running statistics are averaged the same way.
pub fn aggregate(updates: &[(&ParamSet, usize)]) -> Result<ParamSet> {
    let (first, _) = *updates.first().ok_or_else(|| CoreError::Invalid("nothing to aggregate".into()))?;
    if let Some((p, _)) = updates.iter().find(|(p, _)| !first.same_layout(p)) {
        return Err(CoreError::Shape(format!("parameter layout {:?} vs {:?}", p.names(), first.names())));
    }
    if updates.iter().any(|&(_, n)| n == 0) {
        return Err(CoreError::Invalid("client weight n_k must be positive".into()));
    }
    let total: f64 = updates.iter().map(|&(_, n)| n as f64).sum();
    let weights: Vec<f64> = updates.iter().map(|&(_, n)| n as f64 / total).collect();
    let avg = |pick: &dyn Fn(&ParamSet) -> &Tensor| -> Tensor {
        let mut acc = vec![0f64; pick(first).numel()];
        for ((p, _), w) in updates.iter().zip(&weights) {
            for (a, &v) in acc.iter_mut().zip(pick(p).data()) {
                *a += w * v as f64;
            }
        }
        Tensor::new(pick(first).shape().to_vec(), acc.into_iter().map(|v| v as f32).collect()).expect("same shape")
    };
    let tensors = (0..first.len()).map(|i| avg(&|p: &ParamSet| &p.tensors()[i])).collect();
    let bn = first
        .bn_stats()
        .iter()
        .enumerate()
        .map(|(i, s)| crate::models::BnStats {
            layer: s.layer.clone(),
            mean: avg(&|p: &ParamSet| &p.bn_stats()[i].mean),
            var: avg(&|p: &ParamSet| &p.bn_stats()[i].var),
        })
        .collect();
    let mut out = first.clone();
    out.set_all(tensors, bn);
    Ok(out)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

/// Pick `round(fraction * n_clients)` clients among those that have taken
/// part in fewer than `cap` rounds. Returned ids are ascending.
pub fn client_subsample(n_clients: usize, fraction: f64, cap: Option<usize>, participation: &[usize], rng: &mut RngStream) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::Invalid(format!("fraction {fraction} outside (0,1]")));
    }
    let mut eligible: Vec<usize> = (0..n_clients)
        .filter(|&c| cap.is_none_or(|k| participation.get(c).copied().unwrap_or(0) < k))
        .collect();
    if eligible.is_empty() {
        return Err(CoreError::Invalid("every client has reached its round cap".into()));
    }
    let k = round_half_up(fraction * n_clients as f64).clamp(1, eligible.len());
    rng.shuffle(&mut eligible);
    let mut chosen = eligible[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientRound {
    pub client_id: usize,
    pub n_train: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub median_grad_norms: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based.
    pub round: usize,
    pub lr: f64,
    pub selected: Vec<usize>,
    pub clients: Vec<ClientRound>,
    /// Validation AUC of the aggregated model per client; None without a usable val set.
    pub val_auc: Vec<(usize, Option<f64>)>,
    pub mean_val_auc: Option<f64>,
}

/// Parameters around one client's local update.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub round: usize,
    pub client_id: usize,
    pub before: ParamSet,
    pub after: ParamSet,
    pub lr: f64,
    pub n_train: usize,
    pub batch_size: usize,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct ClientLedger {
    pub n_train: usize,
    pub dp: ClientDp,
    pub sample_rate: f64,
    pub delta: f64,
    pub target_epsilon: f64,
    pub ledger: PrivacyLedger,
}

impl ClientLedger {
    pub fn report(&self, client_id: usize) -> Result<dp::LedgerReport> {
        let (alpha_star, epsilon) = self.ledger.epsilon(self.delta)?;
        Ok(dp::LedgerReport {
            client_id,
            n_train: self.n_train,
            target_epsilon: Some(self.target_epsilon),
            sigma: self.dp.sigma,
            sample_rate: self.sample_rate,
            clip: self.dp.clip.clone(),
            steps: self.ledger.steps(),
            delta: self.delta,
            alpha_star,
            epsilon,
            sampling: dp::SAMPLING_NOTE.into(),
            alphas: self.ledger.grid().to_vec(),
            rdp: self.ledger.rdp()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FederationHistory {
    pub reports: Vec<RoundReport>,
    pub best: ParamSet,
    pub best_round: usize,
    pub final_model: ParamSet,
    pub layer_names: Vec<String>,
    pub ledgers: BTreeMap<usize, ClientLedger>,
    pub snapshots: Vec<Snapshot>,
}

impl FederationHistory {
    pub fn best_mean_auc(&self) -> Option<f64> {
        self.reports.get(self.best_round.checked_sub(1)?)?.mean_val_auc
    }
}

/// `(client id, AUC)`; None where the AUC is undefined.
pub type ClientAucs = Vec<(usize, Option<f64>)>;

/// Validation AUC per client and its mean over clients where it is defined.
pub fn evaluate_clients(model: &ParamSet, clients: &[ClientData]) -> Result<(ClientAucs, Option<f64>)> {
    let per = clients
        .par_iter()
        .map(|c| {
            let Some((x, y)) = &c.val else { return Ok((c.id, None)) };
            let scores = predict(model, x)?;
            let labels: Vec<u8> = y.iter().map(|&v| v as u8).collect();
            Ok((c.id, auc(&scores, &labels).ok()))
        })
        .collect::<Result<Vec<_>>>()?;
    let vals: Vec<f64> = per.iter().filter_map(|(_, a)| *a).collect();
    let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    Ok((per, mean))
}

/// Per-client DP parameters: calibrated sigma at that client's delta for
/// the number of steps it can take over the whole run.
pub fn plan_client_dp(dp_cfg: &DpConfig, cfg: &TrainConfig, n_train: usize) -> Result<ClientLedger> {
    let b = cfg.batch_size.min(n_train);
    let q = b as f64 / n_train as f64;
    let rounds = cfg
        .subsample
        .as_ref()
        .and_then(|s| s.per_client_round_cap)
        .map_or(cfg.rounds(), |cap| cap.min(cfg.rounds()));
    let steps = (rounds * cfg.local_epochs * n_train.div_ceil(b)) as u64;
    let delta = delta_for_client(n_train);
    let sigma = match dp_cfg.sigma {
        Some(s) => s,
        None => calibrate_sigma(dp_cfg.target_epsilon, delta, q, steps, &dp_cfg.alphas)?,
    };
    Ok(ClientLedger {
        n_train,
        dp: ClientDp {
            sigma,
            clip: dp_cfg.clip.clone(),
        },
        sample_rate: q,
        delta,
        target_epsilon: dp_cfg.target_epsilon,
        ledger: PrivacyLedger::new(dp_cfg.alphas.clone())?,
    })
}

pub fn run_federation(clients: &[ClientData], init: &ParamSet, cfg: &TrainConfig, rng: &RngStream) -> Result<FederationHistory> {
    cfg.validate()?;
    if !clients.iter().any(|c| c.n_train() > 0) {
        return Err(CoreError::Data("no client has training data".into()));
    }
    let global0 = init.clone().apply_freeze(cfg.freeze_mode);
    let layer_names: Vec<String> = global0.trainable_names().into_iter().map(String::from).collect();
    let mut ledgers = BTreeMap::new();
    if let Some(d) = &cfg.dp {
        for c in clients {
            ledgers.insert(c.id, plan_client_dp(d, cfg, c.n_train())?);
        }
    }
    let mut global = global0;
    let mut lr = cfg.lr;
    let mut participation = vec![0usize; clients.len()];
    let mut sub_rng = rng.child("subsample");
    let mut reports = Vec::new();
    let mut snapshots = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let (mut since_best, mut since_drop) = (0usize, 0usize);
    let mut last = global.clone();

    for round in 1..=cfg.rounds() {
        let positions: Vec<usize> = match &cfg.subsample {
            Some(s) => client_subsample(clients.len(), s.fraction, s.per_client_round_cap, &participation, &mut sub_rng)?,
            None => (0..clients.len()).collect(),
        };
        let positions: Vec<usize> = positions.into_iter().filter(|&p| clients[p].n_train() > 0).collect();
        for &p in &positions {
            participation[p] += 1;
        }
        let work: Vec<(usize, Option<ClientLedger>)> = positions.iter().map(|&p| (p, ledgers.remove(&clients[p].id))).collect();
        let results = work
            .into_par_iter()
            .map(|(p, mut led)| {
                let c = &clients[p];
                let crng = client_round_rng(rng, round, c.id);
                let out = match &mut led {
                    Some(l) => local_train(c, &global, cfg, lr, Some((&l.dp, &mut l.ledger)), &crng),
                    None => local_train(c, &global, cfg, lr, None, &crng),
                }?;
                Ok((p, out, led))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut client_rounds = Vec::new();
        for (p, out, led) in &results {
            let c = &clients[*p];
            if let Some(l) = led {
                ledgers.insert(c.id, l.clone());
            }
            if cfg.attackable.contains(&c.id) && (cfg.snapshot_rounds.is_empty() || cfg.snapshot_rounds.contains(&round)) {
                snapshots.push(Snapshot {
                    round,
                    client_id: c.id,
                    before: global.clone(),
                    after: out.params.clone(),
                    lr,
                    n_train: c.n_train(),
                    batch_size: out.batch_size,
                    steps: out.steps,
                });
            }
            client_rounds.push(ClientRound {
                client_id: c.id,
                n_train: c.n_train(),
                steps: out.steps,
                mean_loss: out.mean_loss,
                median_grad_norms: out.median_grad_norms.clone(),
            });
        }
        let updates: Vec<(&ParamSet, usize)> = results.iter().map(|(p, o, _)| (&o.params, clients[*p].n_train())).collect();
        global = aggregate(&updates)?;
        drop(results);

        let (val_auc, mean) = evaluate_clients(&global, clients)?;
        reports.push(RoundReport {
            round,
            lr,
            selected: positions.iter().map(|&p| clients[p].id).collect(),
            clients: client_rounds,
            val_auc,
            mean_val_auc: mean,
        });
        last = global.clone();

        let improved = match (mean, &best) {
            (Some(m), Some((b, _, _))) => m > *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = Some((mean.expect("improved implies a value"), round, global.clone()));
            since_best = 0;
            since_drop = 0;
        } else {
            since_best += 1;
            since_drop += 1;
            if since_drop >= cfg.lr_patience {
                lr *= cfg.lr_plateau_factor;
                since_drop = 0;
            }
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let (best_model, best_round) = match best {
        Some((_, r, m)) => (m, r),
        None => (last.clone(), reports.len()),
    };
    Ok(FederationHistory {
        reports,
        best: best_model,
        best_round,
        final_model: last,
        layer_names,
        ledgers,
        snapshots,
    })
}

#[derive(Serialize)]
struct RoundRow<'a> {
    round: usize,
    client_id: String,
    n_train: usize,
    val_auc: Option<f64>,
    lr: f64,
    median_grad_norm_per_layer: &'a str,
}

/// One row per participating client per round, plus a `mean` row.
pub fn write_round_csv(path: &Path, history: &FederationHistory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &history.reports {
        let auc_of = |id: usize| r.val_auc.iter().find(|(c, _)| *c == id).and_then(|(_, a)| *a);
        for c in &r.clients {
            let norms: BTreeMap<&str, f64> = history
                .layer_names
                .iter()
                .map(String::as_str)
                .zip(c.median_grad_norms.iter().copied())
                .collect();
            let json = serde_json::to_string(&norms)?;
            w.serialize(RoundRow {
                round: r.round,
                client_id: c.client_id.to_string(),
                n_train: c.n_train,
                val_auc: auc_of(c.client_id),
                lr: r.lr,
                median_grad_norm_per_layer: &json,
            })?;
        }
        w.serialize(RoundRow {
            round: r.round,
            client_id: "mean".into(),
            n_train: r.clients.iter().map(|c| c.n_train).sum(),
            val_auc: r.mean_val_auc,
            lr: r.lr,
            median_grad_norm_per_layer: "{}",
        })?;
    }
    w.flush()?;
    Ok(())
}
