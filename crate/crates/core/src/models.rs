//! Surrogate classifiers and the parameter container exchanged by FedAvg.
//!
//! Two architectures are available: a plain MLP and `small_cnn`, a stack of
//! conv-BN-ReLU-avgpool blocks followed by one linear unit. Inputs are
//! `[N, 1, S, S]` tensors that have already been normalized with
//! [`ModelSpec::normalize`].

use std::fs;
use std::path::{Path, PathBuf};

use fedleak_tensor::{read_ftn1, write_ftn1, RngStream, SampleLoss, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    SmallCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub side: usize,
    /// MLP: layer widths ending with the output width 1. CNN: channels per block.
    pub widths: Vec<usize>,
    #[serde(default = "default_norm_mean")]
    pub norm_mean: f32,
    #[serde(default = "default_norm_std")]
    pub norm_std: f32,
}

fn default_norm_mean() -> f32 {
    0.449
}

fn default_norm_std() -> f32 {
    0.226
}

impl ModelSpec {
    pub fn small_cnn(side: usize) -> Self {
        Self {
            architecture: Architecture::SmallCnn,
            side,
            widths: vec![8, 16],
            norm_mean: default_norm_mean(),
            norm_std: default_norm_std(),
        }
    }

    pub fn mlp(side: usize, widths: Vec<usize>) -> Self {
        Self {
            architecture: Architecture::Mlp,
            side,
            widths,
            norm_mean: default_norm_mean(),
            norm_std: default_norm_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.widths.contains(&0) {
            return Err(CoreError::Spec("zero-sized layer".into()));
        }
        if !(self.norm_std > 0.0) || !self.norm_mean.is_finite() {
            return Err(CoreError::Spec("normalization std must be positive".into()));
        }
        match self.architecture {
            Architecture::Mlp => {
                if self.widths.last() != Some(&1) {
                    return Err(CoreError::Spec("mlp widths must end with a single output unit".into()));
                }
            }
            Architecture::SmallCnn => {
                if self.widths.len() < 2 {
                    return Err(CoreError::Spec("small_cnn needs at least two conv blocks".into()));
                }
                let down = 1usize << self.widths.len();
                if !self.side.is_multiple_of(down) {
                    return Err(CoreError::Spec(format!(
                        "side {} not divisible by {down} for {} pooling stages",
                        self.side,
                        self.widths.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Map pixels in `[0,1]` to model input space.
    pub fn normalize(&self, x: &Tensor) -> Tensor {
        let (m, s) = (self.norm_mean, self.norm_std);
        x.map(|v| (v - m) / s)
    }

    /// Inverse of [`normalize`](Self::normalize), without clamping.
    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        let (m, s) = (self.norm_mean, self.norm_std);
        x.map(|v| v * s + m)
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, 1, self.side, self.side]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    None,
    BatchNorm,
    AllButLast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    BatchStats,
    FixedStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnWeight,
    BnBias,
    LinearWeight,
    LinearBias,
}

impl ParamKind {
    pub fn is_batch_norm(self) -> bool {
        matches!(self, ParamKind::BnWeight | ParamKind::BnBias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub layer: String,
    pub mean: Tensor,
    pub var: Tensor,
}

/// Named model parameters, freeze mask and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    spec: ModelSpec,
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    bn: Vec<BnStats>,
    freeze: FreezeMode,
}

pub fn build_model(spec: &ModelSpec, rng: &RngStream) -> Result<ParamSet> {
    spec.validate()?;
    let mut b = Builder::default();
    match spec.architecture {
        Architecture::Mlp => {
            let mut fan_in = spec.side * spec.side;
            for (i, &w) in spec.widths.iter().enumerate() {
                let name = format!("fc{}", i + 1);
                b.linear(rng, &name, w, fan_in)?;
                fan_in = w;
            }
        }
        Architecture::SmallCnn => {
            let mut c_in = 1;
            for (i, &c) in spec.widths.iter().enumerate() {
                let conv = format!("conv{}", i + 1);
                let fan_in = c_in * 9;
                b.push(
                    rng,
                    &format!("{conv}.weight"),
                    ParamKind::ConvWeight,
                    vec![c, c_in, 3, 3],
                    Init::HeUniform(fan_in),
                )?;
                b.push(rng, &format!("{conv}.bias"), ParamKind::ConvBias, vec![c], Init::Bias(fan_in))?;
                let bn = format!("bn{}", i + 1);
                b.push(rng, &format!("{bn}.weight"), ParamKind::BnWeight, vec![c], Init::Const(1.0))?;
                b.push(rng, &format!("{bn}.bias"), ParamKind::BnBias, vec![c], Init::Const(0.0))?;
                b.bn.push(BnStats {
                    layer: bn,
                    mean: Tensor::zeros(&[c])?,
                    var: Tensor::ones(&[c])?,
                });
                c_in = c;
            }
            let s = spec.side >> spec.widths.len();
            b.linear(rng, "fc", 1, c_in * s * s)?;
        }
    }
    let n = b.tensors.len();
    Ok(ParamSet {
        spec: spec.clone(),
        names: b.names,
        kinds: b.kinds,
        tensors: b.tensors,
        trainable: vec![true; n],
        bn: b.bn,
        freeze: FreezeMode::None,
    })
}

enum Init {
    HeUniform(usize),
    Bias(usize),
    Const(f32),
}

#[derive(Default)]
struct Builder {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor>,
    bn: Vec<BnStats>,
}

impl Builder {
    fn push(&mut self, rng: &RngStream, name: &str, kind: ParamKind, shape: Vec<usize>, init: Init) -> Result<()> {
        let n: usize = shape.iter().product();
        let mut r = rng.child(name);
        let data = match init {
            Init::HeUniform(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| r.uniform_range(-bound, bound) as f32).collect()
            }
            Init::Bias(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| r.uniform_range(-bound, bound) as f32).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        self.names.push(name.to_string());
        self.kinds.push(kind);
        self.tensors.push(Tensor::new(shape, data)?);
        Ok(())
    }

    fn linear(&mut self, rng: &RngStream, layer: &str, out: usize, fan_in: usize) -> Result<()> {
        self.push(
            rng,
            &format!("{layer}.weight"),
            ParamKind::LinearWeight,
            vec![out, fan_in],
            Init::HeUniform(fan_in),
        )?;
        self.push(rng, &format!("{layer}.bias"), ParamKind::LinearBias, vec![out], Init::Bias(fan_in))
    }
}

impl ParamSet {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kinds(&self) -> &[ParamKind] {
        &self.kinds
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn freeze_mode(&self) -> FreezeMode {
        self.freeze
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.trainable[i]).collect()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.trainable_indices().into_iter().map(|i| self.names[i].as_str()).collect()
    }

    pub fn trainable_tensors(&self) -> Vec<Tensor> {
        self.trainable_indices().into_iter().map(|i| self.tensors[i].clone()).collect()
    }

    /// Replace the trainable tensors, in mask order.
    pub fn set_trainable_tensors(&mut self, values: Vec<Tensor>) -> Result<()> {
        let idx = self.trainable_indices();
        if idx.len() != values.len() {
            return Err(CoreError::Shape(format!("{} trainable tensors, got {}", idx.len(), values.len())));
        }
        for (i, v) in idx.into_iter().zip(values) {
            if v.shape() != self.tensors[i].shape() {
                return Err(CoreError::Shape(format!(
                    "{}: expected {:?}, got {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    v.shape()
                )));
            }
            self.tensors[i] = v;
        }
        Ok(())
    }

    /// Overwrite every tensor and running statistic; used by aggregation.
    pub(crate) fn set_all(&mut self, tensors: Vec<Tensor>, bn: Vec<BnStats>) {
        self.tensors = tensors;
        self.bn = bn;
    }

    /// Index of the final classification layer's weight and bias.
    pub fn last_layer(&self) -> [usize; 2] {
        let n = self.len();
        [n - 2, n - 1]
    }

    pub fn apply_freeze(mut self, mode: FreezeMode) -> Self {
        let last = self.last_layer();
        for (i, t) in self.trainable.iter_mut().enumerate() {
            *t = match mode {
                FreezeMode::None => true,
                FreezeMode::BatchNorm => !self.kinds[i].is_batch_norm(),
                FreezeMode::AllButLast => last.contains(&i),
            };
        }
        self.freeze = mode;
        self
    }

    /// Normalization mode used while training under the current freeze mode.
    pub fn train_bn_mode(&self) -> BnMode {
        if self.freeze == FreezeMode::None && !self.bn.is_empty() {
            BnMode::BatchStats
        } else {
            BnMode::FixedStats
        }
    }

    /// True when `other` has the same names and shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape()) && self.bn.len() == other.bn.len()
    }

    /// Exponential running-statistics update from batch moments. `count` is
    /// the number of values each channel moment was computed over.
    pub fn update_running_stats(&mut self, batch: &[(Tensor, Tensor)], count: usize) -> Result<()> {
        if self.freeze != FreezeMode::None {
            return Ok(());
        }
        if batch.len() != self.bn.len() {
            return Err(CoreError::Shape(format!("{} BN layers, got {} moments", self.bn.len(), batch.len())));
        }
        let unbias = if count > 1 { count as f32 / (count - 1) as f32 } else { 1.0 };
        for (stats, (mean, var)) in self.bn.iter_mut().zip(batch) {
            for (r, &m) in stats.mean.data_mut().iter_mut().zip(mean.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, &v) in stats.var.data_mut().iter_mut().zip(var.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }

    /// Put every tensor on `tape`: trainable ones as leaves, the rest as constants.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| if tr { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Write the manifest and one FTN1 file per tensor into `dir`.
    /// Returns the files written, manifest last.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(CoreError::at(dir))?;
        let mut written = Vec::new();
        let mut params = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            let file = format!("{name}.ftn");
            written.push(save_tensor(&dir.join(&file), &self.tensors[i])?);
            params.push(ManifestParam {
                name: name.clone(),
                kind: self.kinds[i],
                shape: self.tensors[i].shape().to_vec(),
                trainable: self.trainable[i],
                file,
            });
        }
        let mut batch_norm = Vec::new();
        for s in &self.bn {
            let mean_file = format!("{}.running_mean.ftn", s.layer);
            let var_file = format!("{}.running_var.ftn", s.layer);
            written.push(save_tensor(&dir.join(&mean_file), &s.mean)?);
            written.push(save_tensor(&dir.join(&var_file), &s.var)?);
            batch_norm.push(ManifestBn {
                layer: s.layer.clone(),
                mean_file,
                var_file,
            });
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            freeze_mode: self.freeze,
            params,
            batch_norm,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(CoreError::at(&path))?;
        written.push(path);
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_slice(&fs::read(&path).map_err(CoreError::at(&path))?)?;
        manifest.spec.validate()?;
        let mut out = ParamSet {
            spec: manifest.spec,
            names: Vec::new(),
            kinds: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            bn: Vec::new(),
            freeze: manifest.freeze_mode,
        };
        for p in manifest.params {
            let t = load_tensor(&dir.join(&p.file))?;
            if t.shape() != p.shape.as_slice() {
                return Err(CoreError::Shape(format!("{}: manifest {:?}, file {:?}", p.name, p.shape, t.shape())));
            }
            out.names.push(p.name);
            out.kinds.push(p.kind);
            out.tensors.push(t);
            out.trainable.push(p.trainable);
        }
        for b in manifest.batch_norm {
            out.bn.push(BnStats {
                mean: load_tensor(&dir.join(&b.mean_file))?,
                var: load_tensor(&dir.join(&b.var_file))?,
                layer: b.layer,
            });
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: ModelSpec,
    freeze_mode: FreezeMode,
    params: Vec<ManifestParam>,
    batch_norm: Vec<ManifestBn>,
}

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    trainable: bool,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestBn {
    layer: String,
    mean_file: String,
    var_file: String,
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<PathBuf> {
    let mut buf = Vec::new();
    write_ftn1(&mut buf, t)?;
    fs::write(path, buf).map_err(CoreError::at(path))?;
    Ok(path.to_path_buf())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(CoreError::at(path))?;
    Ok(read_ftn1(&bytes[..])?)
}

/// Logits plus the per-channel batch moments of every BN layer
/// (empty with fixed statistics).
pub struct Forward {
    pub logits: Var,
    pub batch_moments: Vec<(Var, Var)>,
    /// Number of values each batch moment was computed over.
    pub moment_count: usize,
}

/// Record the forward pass on `tape`. `vars` align with `params.tensors()`;
/// `x` is a normalized `[N, 1, S, S]` batch.
pub fn forward_tape(tape: &mut Tape, params: &ParamSet, vars: &[Var], x: Var, mode: BnMode) -> Result<Forward> {
    let spec = &params.spec;
    let xs = tape.shape(x)?.to_vec();
    if xs.len() != 4 || xs[1] != 1 || xs[2] != spec.side || xs[3] != spec.side {
        return Err(CoreError::Shape(format!(
            "input {xs:?}, model expects [N, 1, {}, {}]",
            spec.side, spec.side
        )));
    }
    if vars.len() != params.len() {
        return Err(CoreError::Shape(format!("{} vars for {} tensors", vars.len(), params.len())));
    }
    let n = xs[0];
    let mut moments = Vec::new();
    let mut moment_count = 0;
    let logits = match spec.architecture {
        Architecture::Mlp => {
            let mut h = tape.reshape(x, &[n, spec.side * spec.side])?;
            let layers = spec.widths.len();
            for l in 0..layers {
                h = linear(tape, h, vars[2 * l], vars[2 * l + 1])?;
                if l + 1 < layers {
                    h = tape.relu(h)?;
                }
            }
            h
        }
        Architecture::SmallCnn => {
            let mut h = x;
            let mut side = spec.side;
            for (l, &c) in spec.widths.iter().enumerate() {
                let v = &vars[4 * l..4 * l + 4];
                h = tape.conv2d(h, v[0], 1)?;
                let b = tape.reshape(v[1], &[1, c, 1, 1])?;
                h = tape.add(h, b)?;
                let count = n * side * side;
                h = match mode {
                    BnMode::FixedStats => {
                        let s = &params.bn[l];
                        bn_fixed(tape, h, &s.mean, &s.var, v[2], v[3], c)?
                    }
                    BnMode::BatchStats => {
                        if count < 2 {
                            return Err(CoreError::Invalid("batch statistics need more than one value per channel".into()));
                        }
                        let (y, m, var) = bn_batch(tape, h, v[2], v[3], c, count)?;
                        moments.push((m, var));
                        moment_count = count;
                        y
                    }
                };
                h = tape.relu(h)?;
                h = tape.avg_pool2d(h, 2)?;
                side /= 2;
            }
            let feat = spec.widths[spec.widths.len() - 1] * side * side;
            let h = tape.reshape(h, &[n, feat])?;
            let k = vars.len();
            linear(tape, h, vars[k - 2], vars[k - 1])?
        }
    };
    Ok(Forward {
        logits,
        batch_moments: moments,
        moment_count,
    })
}

fn linear(tape: &mut Tape, h: Var, w: Var, b: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let y = tape.matmul(h, wt)?;
    Ok(tape.add(y, b)?)
}

fn bn_fixed(tape: &mut Tape, h: Var, mean: &Tensor, var: &Tensor, g: Var, b: Var, c: usize) -> Result<Var> {
    let shift = Tensor::new(vec![1, c, 1, 1], mean.data().to_vec())?;
    let inv = Tensor::new(vec![1, c, 1, 1], var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect())?;
    let shift = tape.constant(shift);
    let inv = tape.constant(inv);
    let y = tape.sub(h, shift)?;
    let y = tape.mul(y, inv)?;
    affine(tape, y, g, b, c)
}

fn bn_batch(tape: &mut Tape, h: Var, g: Var, b: Var, c: usize, count: usize) -> Result<(Var, Var, Var)> {
    let stat = [1, c, 1, 1];
    let s = tape.sum_to(h, &stat)?;
    let mean = tape.scale(s, 1.0 / count as f32)?;
    let centered = tape.sub(h, mean)?;
    let sq = tape.mul(centered, centered)?;
    let v = tape.sum_to(sq, &stat)?;
    let var = tape.scale(v, 1.0 / count as f32)?;
    let ve = tape.add_scalar(var, BN_EPS)?;
    let sd = tape.sqrt(ve)?;
    let y = tape.div(centered, sd)?;
    Ok((affine(tape, y, g, b, c)?, mean, var))
}

fn affine(tape: &mut Tape, y: Var, g: Var, b: Var, c: usize) -> Result<Var> {
    let g = tape.reshape(g, &[1, c, 1, 1])?;
    let b = tape.reshape(b, &[1, c, 1, 1])?;
    let y = tape.mul(y, g)?;
    Ok(tape.add(y, b)?)
}

/// Logits `[N, 1]` for a normalized batch, without recording gradients.
pub fn forward(params: &ParamSet, x: &Tensor, mode: BnMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let xv = tape.constant(x.clone());
    let f = forward_tape(&mut tape, params, &vars, xv, mode)?;
    Ok(tape.value(f.logits)?.clone())
}

/// Sigmoid probabilities for a normalized batch using fixed statistics.
pub fn predict(params: &ParamSet, x: &Tensor) -> Result<Vec<f64>> {
    let logits = forward(params, x, BnMode::FixedStats)?;
    Ok(logits.data().iter().map(|&z| 1.0 / (1.0 + (-(z as f64)).exp())).collect())
}

/// Mean binary cross-entropy of sigmoid(logits) against `labels` in {0,1}.
pub fn bce_loss(tape: &mut Tape, logits: Var, labels: &[f32]) -> Result<Var> {
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(CoreError::Invalid(format!("label {bad} outside {{0,1}}")));
    }
    let n = tape.value(logits)?.numel();
    if n != labels.len() {
        return Err(CoreError::Shape(format!("{n} logits for {} labels", labels.len())));
    }
    let l = tape.bce_with_logits(logits, labels)?;
    Ok(tape.mean(l)?)
}

/// Mean BCE over a subset of a normalized batch, differentiated with
/// respect to the trainable tensors only.
pub struct BatchLoss<'a> {
    pub params: &'a ParamSet,
    pub x: &'a Tensor,
    pub labels: &'a [f32],
    pub mode: BnMode,
}

impl BatchLoss<'_> {
    /// Bind parameters on `tape`, using `trainable` as the leaves for trainable slots.
    pub fn bind_with(&self, tape: &mut Tape, trainable: &[Var]) -> Vec<Var> {
        let mut it = trainable.iter();
        self.params
            .tensors
            .iter()
            .zip(&self.params.trainable)
            .map(|(t, &tr)| {
                if tr {
                    *it.next().expect("trainable var count")
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn rows(&self, samples: &[usize]) -> fedleak_tensor::Result<(Tensor, Vec<f32>)> {
        if samples.len() == self.labels.len() && samples.iter().enumerate().all(|(i, &s)| i == s) {
            return Ok((self.x.clone(), self.labels.to_vec()));
        }
        let rows = samples.iter().map(|&s| self.x.select(s)).collect::<fedleak_tensor::Result<Vec<_>>>()?;
        Ok((Tensor::stack(&rows)?, samples.iter().map(|&s| self.labels[s]).collect()))
    }
}

impl SampleLoss for BatchLoss<'_> {
    fn num_samples(&self) -> usize {
        self.labels.len()
    }

    fn is_decomposable(&self) -> bool {
        self.mode == BnMode::FixedStats
    }

    fn loss(&self, tape: &mut Tape, params: &[Var], samples: &[usize]) -> fedleak_tensor::Result<Var> {
        let vars = self.bind_with(tape, params);
        let (x, labels) = self.rows(samples)?;
        let xv = tape.constant(x);
        let f = forward_tape(tape, self.params, &vars, xv, self.mode).map_err(to_tensor_err)?;
        bce_loss(tape, f.logits, &labels).map_err(to_tensor_err)
    }
}

fn to_tensor_err(e: CoreError) -> fedleak_tensor::TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => fedleak_tensor::TensorError::InvalidArgument {
            op: "model loss",
            reason: other.to_string(),
        },
    }
}
