//! Autodiff versus central differences of an independent f64 evaluator.

use fedleak_tensor::{finite_difference, per_sample_grad, Result, RngStream, SampleLoss, Tape, Tensor, Var};

const SHAPES: [&[usize]; 8] = [
    &[3, 1, 3, 3], // conv1 weight
    &[3],          // conv1 bias
    &[3],          // bn gamma
    &[3],          // bn beta
    &[2, 3, 3, 3], // conv2 weight
    &[2],          // conv2 bias
    &[1, 8],       // fc weight
    &[1],          // fc bias
];
const SIDE: usize = 8;
const EPS: f64 = 1e-5;

fn random_tensor(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi) as f32).collect()).unwrap()
}

fn random_params(seed: u64) -> Vec<Tensor> {
    let mut rng = RngStream::new(seed, "params");
    SHAPES
        .iter()
        .map(|s| {
            let mut t = random_tensor(&mut rng, s, 0.1, 1.0);
            // random signs, magnitudes kept in [0.1, 1]
            for v in t.data_mut() {
                if rng.bernoulli(0.5) {
                    *v = -*v;
                }
            }
            t
        })
        .collect()
}

/// conv-BN(batch stats)-relu-avgpool-conv-sigmoid-maxpool-fc-BCE on the tape.
fn tape_loss(t: &mut Tape, p: &[Var], x: Var, labels: &[f32]) -> Result<Var> {
    let n = t.shape(x)?[0];
    let h = t.conv2d(x, p[0], 1)?;
    let b1 = t.reshape(p[1], &[1, 3, 1, 1])?;
    let h = t.add(h, b1)?;
    let m = (n * SIDE * SIDE) as f32;
    let s = t.sum_to(h, &[1, 3, 1, 1])?;
    let mean = t.scale(s, 1.0 / m)?;
    let c = t.sub(h, mean)?;
    let sq = t.mul(c, c)?;
    let v = t.sum_to(sq, &[1, 3, 1, 1])?;
    let v = t.scale(v, 1.0 / m)?;
    let v = t.add_scalar(v, EPS as f32)?;
    let sd = t.sqrt(v)?;
    let xh = t.div(c, sd)?;
    let g = t.reshape(p[2], &[1, 3, 1, 1])?;
    let be = t.reshape(p[3], &[1, 3, 1, 1])?;
    let h = t.mul(xh, g)?;
    let h = t.add(h, be)?;
    let h = t.relu(h)?;
    let h = t.avg_pool2d(h, 2)?;
    let h = t.conv2d(h, p[4], 1)?;
    let b2 = t.reshape(p[5], &[1, 2, 1, 1])?;
    let h = t.add(h, b2)?;
    let h = t.sigmoid(h)?;
    let h = t.max_pool2d(h, 2)?;
    let h = t.reshape(h, &[n, 8])?;
    let wt = t.transpose(p[6])?;
    let z = t.matmul(h, wt)?;
    let z = t.add(z, p[7])?;
    let l = t.bce_with_logits(z, labels)?;
    t.mean(l)
}

struct Ref<'a> {
    flat: &'a [f64],
    at: usize,
}

impl<'a> Ref<'a> {
    fn take(&mut self, n: usize) -> &'a [f64] {
        let s = &self.flat[self.at..self.at + n];
        self.at += n;
        s
    }
}

fn conv_ref(x: &[f64], n: usize, c: usize, side: usize, w: &[f64], o: usize, bias: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n * o * side * side];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..side {
                for j in 0..side {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for a in 0..3 {
                            for bb in 0..3 {
                                let (ii, jj) = (i as isize + a as isize - 1, j as isize + bb as isize - 1);
                                if ii < 0 || jj < 0 || ii >= side as isize || jj >= side as isize {
                                    continue;
                                }
                                acc += w[((oc * c + ic) * 3 + a) * 3 + bb] * x[((b * c + ic) * side + ii as usize) * side + jj as usize];
                            }
                        }
                    }
                    y[((b * o + oc) * side + i) * side + j] = acc;
                }
            }
        }
    }
    y
}

fn pool_ref(x: &[f64], nc: usize, side: usize, max: bool) -> Vec<f64> {
    let half = side / 2;
    let mut y = vec![0.0; nc * half * half];
    for p in 0..nc {
        for i in 0..half {
            for j in 0..half {
                let vals = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(a, b)| x[(p * side + 2 * i + a) * side + 2 * j + b]);
                y[(p * half + i) * half + j] = if max {
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / 4.0
                };
            }
        }
    }
    y
}

fn ref_loss(flat: &[f64], x: &[f64], n: usize, labels: &[f32]) -> f64 {
    let mut r = Ref { flat, at: 0 };
    let (w1, b1, g, be) = (r.take(27), r.take(3), r.take(3), r.take(3));
    let (w2, b2, fw, fb) = (r.take(54), r.take(2), r.take(8), r.take(1));
    let mut h = conv_ref(x, n, 1, SIDE, w1, 3, b1);
    let hw = SIDE * SIDE;
    for c in 0..3 {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..hw).map(move |k| (b, k)))
            .map(|(b, k)| h[(b * 3 + c) * hw + k])
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for k in 0..hw {
                let e = &mut h[(b * 3 + c) * hw + k];
                *e = ((*e - m) / (v + EPS).sqrt() * g[c] + be[c]).max(0.0);
            }
        }
    }
    let h = pool_ref(&h, n * 3, SIDE, false);
    let mut h = conv_ref(&h, n, 3, SIDE / 2, w2, 2, b2);
    for v in &mut h {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    let h = pool_ref(&h, n * 2, SIDE / 2, true);
    let mut loss = 0.0;
    for b in 0..n {
        let z = fb[0] + (0..8).map(|k| fw[k] * h[b * 8 + k]).sum::<f64>();
        let y = labels[b] as f64;
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    loss / n as f64
}

fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| (*x as f64).powi(2))
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn flatten(ts: &[Tensor]) -> Tensor {
    let data: Vec<f32> = ts.iter().flat_map(|t| t.data().to_vec()).collect();
    Tensor::from_slice(&data).unwrap()
}

#[test]
fn cnn_gradients_match_finite_differences_over_ten_seeds() {
    for seed in 0..10u64 {
        let params = random_params(seed);
        let mut rng = RngStream::new(seed, "inputs");
        let n = 3;
        let x = random_tensor(&mut rng, &[n, 1, SIDE, SIDE], 0.0, 1.0);
        let labels: Vec<f32> = (0..n).map(|i| (i % 2) as f32).collect();

        let mut t = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
        let xv = t.constant(x.clone());
        let l = tape_loss(&mut t, &vars, xv, &labels).unwrap();
        let grads: Vec<Tensor> = t.grad(l, &vars).unwrap().iter().map(|&g| t.value(g).unwrap().clone()).collect();
        let auto = flatten(&grads);

        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        // small step so the max-pool argmax never flips inside the stencil
        let fd = finite_difference(|p| Ok(ref_loss(p, &x64, n, &labels)), &flatten(&params), 1e-6).unwrap();
        let err = rel_err(auto.data(), fd.data());
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
        // the f32 forward agrees with the f64 evaluator
        let f64_loss = ref_loss(&flatten(&params).data().iter().map(|&v| v as f64).collect::<Vec<_>>(), &x64, n, &labels);
        assert!((t.value(l).unwrap().item().unwrap() as f64 - f64_loss).abs() < 1e-5);
    }
}

/// Toy model: logit = w . x' + b with w in R^3, one sigmoid-BCE sample.
/// Its parameter gradient is (sigmoid(z) - y) [x', 1].
fn toy_param_grad_ref(w: &[f64], b: f64, x: &[f64], y: f64) -> Vec<f64> {
    let z = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    let r = 1.0 / (1.0 + (-z).exp()) - y;
    let mut g: Vec<f64> = x.iter().map(|v| r * v).collect();
    g.push(r);
    g
}

fn cosine_match_ref(dummy: &[f64], target: &[f64]) -> f64 {
    let dot: f64 = dummy.iter().zip(target).map(|(a, b)| a * b).sum();
    let na = dummy.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = target.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

#[test]
fn gradient_matching_loss_second_order_matches_finite_differences() {
    let w = [0.8f32, -0.5, 0.3];
    let b = 0.1f32;
    let label = 1.0f32;
    let target = toy_param_grad_ref(&[0.8, -0.5, 0.3], 0.1, &[0.2, 0.7, -0.4], 1.0);
    let target32: Vec<f32> = target.iter().map(|&v| v as f32).collect();
    let x0 = Tensor::from_slice(&[-0.3, 0.45, 0.9]).unwrap();

    let mut t = Tape::higher_order();
    let wv = t.leaf(Tensor::new(vec![3, 1], w.to_vec()).unwrap());
    let bv = t.leaf(Tensor::scalar(b));
    let xv = t.leaf(x0.clone().reshape(&[1, 3]).unwrap());
    let z = t.matmul(xv, wv).unwrap();
    let z = t.reshape(z, &[1]).unwrap();
    let z = t.add(z, bv).unwrap();
    let l = t.bce_with_logits(z, &[label]).unwrap();
    let l = t.mean(l).unwrap();
    let g = t.grad(l, &[wv, bv]).unwrap();
    let gw = t.reshape(g[0], &[3]).unwrap();
    let tw = t.constant(Tensor::from_slice(&target32[..3]).unwrap());
    let tb = t.constant(Tensor::from_slice(&target32[3..]).unwrap());
    let dot_w = t.mul(gw, tw).unwrap();
    let dot_b = t.mul(g[1], tb).unwrap();
    let dot = t.sum(dot_w).unwrap();
    let dot_b = t.sum(dot_b).unwrap();
    let dot = t.add(dot, dot_b).unwrap();
    let sq_w = t.mul(gw, gw).unwrap();
    let sq_b = t.mul(g[1], g[1]).unwrap();
    let sq_w = t.sum(sq_w).unwrap();
    let sq_b = t.sum(sq_b).unwrap();
    let sq = t.add(sq_w, sq_b).unwrap();
    let norm = t.sqrt(sq).unwrap();
    let tnorm = target.iter().map(|v| v * v).sum::<f64>().sqrt() as f32;
    let denom = t.scale(norm, tnorm).unwrap();
    let cos = t.div(dot, denom).unwrap();
    let neg = t.neg(cos).unwrap();
    let loss = t.add_scalar(neg, 1.0).unwrap();
    let dx = t.grad(loss, &[xv]).unwrap()[0];
    let auto = t.value(dx).unwrap().clone().reshape(&[3]).unwrap();

    let fd = finite_difference(
        |x| Ok(cosine_match_ref(&toy_param_grad_ref(&[0.8, -0.5, 0.3], 0.1, x, 1.0), &target)),
        &x0,
        1e-3,
    )
    .unwrap();
    let err = rel_err(auto.data(), fd.data());
    assert!(err < 1e-3, "relative error {err}");
}

struct Linear {
    xs: Vec<f32>,
}

impl SampleLoss for Linear {
    fn num_samples(&self) -> usize {
        self.xs.len()
    }

    fn loss(&self, t: &mut Tape, p: &[Var], samples: &[usize]) -> Result<Var> {
        let x = t.constant(Tensor::new(vec![samples.len(), 1], samples.iter().map(|&i| self.xs[i]).collect())?);
        let pred = t.matmul(x, p[0])?;
        t.mean(pred)
    }
}

#[test]
fn per_sample_grads_of_linear_model() {
    let loss = Linear { xs: vec![1.0, 3.0] };
    let w = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
    let g = per_sample_grad(&loss, std::slice::from_ref(&w)).unwrap();
    assert_eq!(g[0][0].data(), &[1.0]);
    assert_eq!(g[1][0].data(), &[3.0]);
    let (_, batch) = fedleak_tensor::batch_grad(&loss, &[w], &[0, 1]).unwrap();
    assert_eq!(batch[0].data(), &[2.0]);
}

struct TwoLayer {
    x: Tensor,
    labels: Vec<f32>,
}

impl SampleLoss for TwoLayer {
    fn num_samples(&self) -> usize {
        self.labels.len()
    }

    fn loss(&self, t: &mut Tape, p: &[Var], samples: &[usize]) -> Result<Var> {
        let rows: Vec<Tensor> = samples.iter().map(|&i| self.x.select(i)).collect::<Result<_>>()?;
        let x = t.constant(Tensor::stack(&rows)?);
        let h = t.matmul(x, p[0])?;
        let h = t.add(h, p[1])?;
        let h = t.relu(h)?;
        let z = t.matmul(h, p[2])?;
        let z = t.reshape(z, &[samples.len()])?;
        let labels: Vec<f32> = samples.iter().map(|&i| self.labels[i]).collect();
        let l = t.bce_with_logits(z, &labels)?;
        t.mean(l)
    }
}

#[test]
fn mean_of_per_sample_grads_equals_batch_grad() {
    let mut rng = RngStream::new(3, "two-layer");
    let params = vec![
        random_tensor(&mut rng, &[5, 4], -1.0, 1.0),
        random_tensor(&mut rng, &[4], -0.5, 0.5),
        random_tensor(&mut rng, &[4, 1], -1.0, 1.0),
    ];
    let loss = TwoLayer {
        x: random_tensor(&mut rng, &[4, 5], -1.0, 1.0),
        labels: vec![0.0, 1.0, 1.0, 0.0],
    };
    let per = per_sample_grad(&loss, &params).unwrap();
    let (_, batch) = fedleak_tensor::batch_grad(&loss, &params, &[0, 1, 2, 3]).unwrap();
    for (k, b) in batch.iter().enumerate() {
        let mean: Vec<f32> = (0..b.numel()).map(|j| per.iter().map(|g| g[k].data()[j]).sum::<f32>() / 4.0).collect();
        assert!(rel_err(&mean, b.data()) < 1e-5);
    }
    // degenerate batch of one
    let single = TwoLayer {
        x: loss.x.select(2).unwrap().reshape(&[1, 5]).unwrap(),
        labels: vec![1.0],
    };
    let per = per_sample_grad(&single, &params).unwrap();
    let (_, direct) = fedleak_tensor::batch_grad(&single, &params, &[0]).unwrap();
    assert_eq!(per[0], direct);
}

#[test]
fn identical_inputs_give_bitwise_identical_gradients() {
    let run = || {
        let params = random_params(11);
        let mut rng = RngStream::new(11, "inputs");
        let x = random_tensor(&mut rng, &[2, 1, SIDE, SIDE], 0.0, 1.0);
        let mut t = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
        let xv = t.constant(x);
        let l = tape_loss(&mut t, &vars, xv, &[0.0, 1.0]).unwrap();
        let g = t.grad(l, &vars).unwrap();
        g.iter()
            .flat_map(|&v| t.value(v).unwrap().data().iter().map(|f| f.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u32>>()
    };
    assert_eq!(run(), run());
}
