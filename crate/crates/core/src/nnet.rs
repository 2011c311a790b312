//! One-hidden-layer network with hand-written backpropagation, and the
//! per-sample difficulty scores built on it.
//!
//! Parameters are one flat vector packed as `W1` (`d_hidden × d_in`, row
//! major), `b1`, `W2` (`d_out × d_hidden`, row major), `b2`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    /// No nonlinearity; the network is an affine map.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative given the preactivation `z` and the activation `a`.
    #[inline]
    fn deriv(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel")]
pub struct MlpModel {
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    activation: Activation,
    params: Vec<f64>,
}

#[derive(Deserialize)]
struct RawModel {
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    activation: Activation,
    params: Vec<f64>,
}

impl TryFrom<RawModel> for MlpModel {
    type Error = Error;

    fn try_from(r: RawModel) -> Result<Self> {
        MlpModel::new(r.d_in, r.d_hidden, r.d_out, r.activation, r.params)
    }
}

/// What the loss compares the logits against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Class index for a softmax head (`d_out ≥ 2`).
    Class(usize),
    /// ±1 label for a logistic head (`d_out = 1`).
    Sign(i8),
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub loss: f64,
    pub grad_params: Vec<f64>,
    pub grad_input: Vec<f64>,
}

/// Dual norm used in the input-space margin approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum QNorm {
    #[serde(rename = "1")]
    L1,
    #[default]
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Inf,
}

impl QNorm {
    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            QNorm::L1 => v.iter().map(|x| x.abs()).sum(),
            QNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            QNorm::Inf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

pub fn param_count(d_in: usize, d_hidden: usize, d_out: usize) -> usize {
    d_hidden * (d_in + 1) + d_out * (d_hidden + 1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl MlpModel {
    pub fn new(d_in: usize, d_hidden: usize, d_out: usize, activation: Activation, params: Vec<f64>) -> Result<Self> {
        if d_in == 0 || d_hidden == 0 || d_out == 0 {
            return Err(Error::InvalidArgument("layer sizes must be >= 1".into()));
        }
        let expected = param_count(d_in, d_hidden, d_out);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            d_in,
            d_hidden,
            d_out,
            activation,
            params,
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Init);
        let n = param_count(d_in, d_hidden, d_out);
        let split = d_hidden * (d_in + 1);
        let s1 = 1.0 / (d_in as f64).sqrt();
        let s2 = 1.0 / (d_hidden as f64).sqrt();
        let params = (0..n)
            .map(|i| {
                let s = if i < split { s1 } else { s2 };
                rng.random_range(-s..s)
            })
            .collect();
        Self::new(d_in, d_hidden, d_out, activation, params)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_hidden(&self) -> usize {
        self.d_hidden
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(self.d_in, self.d_hidden, self.d_out, self.activation, params)
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.d_hidden * self.d_in;
        let w2 = b1 + self.d_hidden;
        let b2 = w2 + self.d_out * self.d_hidden;
        (b1, w2, b2)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in {
            return Err(Error::DimensionMismatch {
                expected: self.d_in,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward_cache(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut pre = Vec::with_capacity(self.d_hidden);
        let mut hidden = Vec::with_capacity(self.d_hidden);
        for k in 0..self.d_hidden {
            let row = &p[k * self.d_in..(k + 1) * self.d_in];
            let z = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p[b1 + k];
            pre.push(z);
            hidden.push(self.activation.apply(z));
        }
        let logits = (0..self.d_out)
            .map(|j| {
                let row = &p[w2 + j * self.d_hidden..w2 + (j + 1) * self.d_hidden];
                row.iter().zip(&hidden).map(|(w, a)| w * a).sum::<f64>() + p[b2 + j]
            })
            .collect();
        Ok(ForwardCache { pre, hidden, logits })
    }

    /// `W2·act(W1·x + b1) + b2`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cache(x)?.logits)
    }

    /// Pulls `upstream = ∂L/∂logits` back to parameter and input gradients.
    pub fn backward(&self, x: &[f64], cache: &ForwardCache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        if upstream.len() != self.d_out {
            return Err(Error::DimensionMismatch {
                expected: self.d_out,
                got: upstream.len(),
            });
        }
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut g = vec![0.0; self.params.len()];
        let mut g_hidden = vec![0.0; self.d_hidden];
        for (j, &go) in upstream.iter().enumerate() {
            g[b2 + j] = go;
            let base = w2 + j * self.d_hidden;
            for k in 0..self.d_hidden {
                g[base + k] = go * cache.hidden[k];
                g_hidden[k] += p[base + k] * go;
            }
        }
        let mut g_x = vec![0.0; self.d_in];
        for k in 0..self.d_hidden {
            let gz = g_hidden[k] * self.activation.deriv(cache.pre[k], cache.hidden[k]);
            g[b1 + k] = gz;
            let base = k * self.d_in;
            for i in 0..self.d_in {
                g[base + i] = gz * x[i];
                g_x[i] += p[base + i] * gz;
            }
        }
        Ok((g, g_x))
    }

    /// Maps a ±1 dataset label to the target of this head.
    pub fn target_for_label(&self, label: i8) -> Result<Target> {
        match self.d_out {
            1 => Ok(Target::Sign(if label > 0 { 1 } else { -1 })),
            2 => Ok(Target::Class(usize::from(label > 0))),
            n => Err(Error::InvalidArgument(format!(
                "a ±1 label needs a head with 1 or 2 outputs, model has {n}"
            ))),
        }
    }

    fn check_target(&self, target: Target) -> Result<()> {
        match target {
            Target::Class(c) if self.d_out >= 2 && c < self.d_out => Ok(()),
            Target::Sign(s) if self.d_out == 1 && (s == 1 || s == -1) => Ok(()),
            t => Err(Error::InvalidArgument(format!(
                "target {t:?} does not fit a head with {} outputs",
                self.d_out
            ))),
        }
    }

    /// Loss and `∂L/∂logits`: softmax cross-entropy or logistic loss.
    fn loss_and_upstream(&self, logits: &[f64], target: Target) -> Result<(f64, Vec<f64>)> {
        self.check_target(target)?;
        let (loss, up) = match target {
            Target::Class(c) => {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                let mut up = softmax(logits);
                up[c] -= 1.0;
                (lse - logits[c], up)
            }
            Target::Sign(s) => {
                let f = logits[0];
                let y0 = if s > 0 { 1.0 } else { 0.0 };
                (softplus(-f64::from(s) * f), vec![sigmoid(f) - y0])
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss}")));
        }
        Ok((loss, up))
    }

    pub fn loss(&self, x: &[f64], target: Target) -> Result<f64> {
        let logits = self.forward(x)?;
        Ok(self.loss_and_upstream(&logits, target)?.0)
    }

    pub fn loss_and_grads(&self, x: &[f64], target: Target) -> Result<LossGrads> {
        let cache = self.forward_cache(x)?;
        let (loss, up) = self.loss_and_upstream(&cache.logits, target)?;
        let (grad_params, grad_input) = self.backward(x, &cache, &up)?;
        Ok(LossGrads {
            loss,
            grad_params,
            grad_input,
        })
    }

    /// Class probabilities; a logistic head is read as two classes `(−1, +1)`.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logits = self.forward(x)?;
        Ok(if self.d_out == 1 {
            let p = sigmoid(logits[0]);
            vec![1.0 - p, p]
        } else {
            softmax(&logits)
        })
    }

    /// `‖softmax(f(x)) − onehot(y)‖₂`.
    pub fn el2n_score(&self, x: &[f64], target: Target) -> Result<f64> {
        self.check_target(target)?;
        let mut probs = self.probabilities(x)?;
        let c = match target {
            Target::Class(c) => c,
            Target::Sign(s) => usize::from(s > 0),
        };
        probs[c] -= 1.0;
        Ok(l2(&probs))
    }

    /// Euclidean norm of the loss gradient with respect to the parameters.
    pub fn gradnorm_score(&self, x: &[f64], target: Target) -> Result<f64> {
        Ok(l2(&self.loss_and_grads(x, target)?.grad_params))
    }

    /// Rows `∇_θ f_j(x)` for every output `j`.
    pub fn param_jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let cache = self.forward_cache(x)?;
        let mut e = vec![0.0; self.d_out];
        (0..self.d_out)
            .map(|j| {
                e.fill(0.0);
                e[j] = 1.0;
                Ok(self.backward(x, &cache, &e)?.0)
            })
            .collect()
    }

    /// `Σ_j ‖∇_θ f_j(x)‖²`, the diagonal entry of the empirical NTK. With
    /// `sigmoid` the outputs are squashed by a sigmoid first, which scales
    /// each term by `σ'(f_j)²`.
    pub fn ntk_diag_score(&self, x: &[f64], sigmoid_squash: bool) -> Result<f64> {
        let logits = self.forward(x)?;
        let jac = self.param_jacobian(x)?;
        Ok(jac
            .iter()
            .zip(&logits)
            .map(|(row, &f)| {
                let scale = if sigmoid_squash {
                    let s = sigmoid(f);
                    (s * (1.0 - s)).powi(2)
                } else {
                    1.0
                };
                scale * row.iter().map(|g| g * g).sum::<f64>()
            })
            .sum())
    }

    /// Scalar decision function: the logit for a logistic head, the logit
    /// difference `f_1 − f_0` for two classes.
    fn decision_upstream(&self) -> Result<Vec<f64>> {
        match self.d_out {
            1 => Ok(vec![1.0]),
            2 => Ok(vec![-1.0, 1.0]),
            n => Err(Error::InvalidArgument(format!(
                "margin needs a binary head, model has {n} outputs"
            ))),
        }
    }

    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        let up = self.decision_upstream()?;
        let logits = self.forward(x)?;
        Ok(up.iter().zip(&logits).map(|(u, f)| u * f).sum())
    }

    /// Decision value and its input gradient.
    pub fn decision_and_input_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let up = self.decision_upstream()?;
        let cache = self.forward_cache(x)?;
        let f = up.iter().zip(&cache.logits).map(|(u, f)| u * f).sum();
        let (_, gx) = self.backward(x, &cache, &up)?;
        Ok((f, gx))
    }

    /// First-order distance to the decision boundary, `|f(x)| / ‖∇_x f(x)‖_q`.
    pub fn margin_approx(&self, x: &[f64], q: QNorm) -> Result<f64> {
        let (f, gx) = self.decision_and_input_grad(x)?;
        if f == 0.0 {
            return Ok(0.0);
        }
        let n = q.norm(&gx);
        if n == 0.0 {
            return Err(Error::FlatPoint);
        }
        Ok(f.abs() / n)
    }

    /// Predicted ±1 label.
    pub fn predict_label(&self, x: &[f64]) -> Result<i8> {
        let logits = self.forward(x)?;
        Ok(match self.d_out {
            1 => crate::dataset::sign(logits[0]),
            _ => {
                let best = logits
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0;
                if best > 0 {
                    1
                } else {
                    -1
                }
            }
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Empirical NTK `K[a][b] = Σ_j ⟨∇_θ f_j(x_a), ∇_θ f_j(x_b)⟩`, row major.
pub fn empirical_ntk(model: &MlpModel, rows: &[&[f64]]) -> Result<Vec<f64>> {
    let jacs: Vec<Vec<Vec<f64>>> = rows
        .par_iter()
        .map(|x| model.param_jacobian(x))
        .collect::<Result<_>>()?;
    let n = rows.len();
    let mut k = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let v: f64 = jacs[a]
                .iter()
                .zip(&jacs[b])
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(u, w)| u * w).sum::<f64>())
                .sum();
            k[a * n + b] = v;
            k[b * n + a] = v;
        }
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NtkSummary {
    pub n: usize,
    pub median_diag: f64,
    pub median_abs_offdiag: f64,
    pub ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median diagonal against median absolute off-diagonal entry.
pub fn ntk_summary(k: &[f64], n: usize) -> Result<NtkSummary> {
    if k.len() != n * n || n < 2 {
        return Err(Error::InvalidArgument(
            "NTK summary needs a square matrix with n >= 2".into(),
        ));
    }
    let diag = (0..n).map(|i| k[i * n + i]).collect();
    let off = (0..n)
        .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
        .map(|(a, b)| k[a * n + b].abs())
        .collect();
    let median_diag = median(diag);
    let median_abs_offdiag = median(off);
    Ok(NtkSummary {
        n,
        median_diag,
        median_abs_offdiag,
        ratio: median_diag / median_abs_offdiag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.1,
            batch_size: 32,
        }
    }
}

/// One shuffled pass of mini-batch gradient descent on the mean loss.
pub fn train_one_epoch(
    model: &MlpModel,
    ds: &LabeledDataset,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<MlpModel> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if ds.d() != model.d_in {
        return Err(Error::DimensionMismatch {
            expected: model.d_in,
            got: ds.d(),
        });
    }
    let targets: Vec<Target> = ds
        .labels()
        .iter()
        .map(|&y| model.target_for_label(y))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle));

    let mut current = model.clone();
    let mut grad = vec![0.0; current.params.len()];
    for (batch, chunk) in order.chunks(batch_size).enumerate() {
        grad.fill(0.0);
        for &i in chunk {
            let lg = current
                .loss_and_grads(ds.row(i), targets[i])
                .map_err(|_| Error::Diverged { batch })?;
            for (g, v) in grad.iter_mut().zip(&lg.grad_params) {
                *g += v;
            }
        }
        let scale = lr / chunk.len() as f64;
        for (p, g) in current.params.iter_mut().zip(&grad) {
            *p -= scale * g;
        }
        if current.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { batch });
        }
    }
    Ok(current)
}

/// `cfg.epochs` passes of [`train_one_epoch`], each with its own shuffle.
pub fn train(model: &MlpModel, ds: &LabeledDataset, cfg: &TrainConfig, seed: u64) -> Result<MlpModel> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }
    let mut m = model.clone();
    for epoch in 0..cfg.epochs {
        m = train_one_epoch(&m, ds, cfg.lr, cfg.batch_size, derive_seed(seed, &[epoch as u64]))?;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean loss over a dataset.
pub fn evaluate(model: &MlpModel, ds: &LabeledDataset) -> Result<EvalMetrics> {
    let per: Vec<(bool, f64)> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.row(i);
            let t = model.target_for_label(ds.label(i))?;
            let loss = model.loss(x, t).map_err(|_| Error::NonFiniteLoss { sample: i })?;
            Ok((model.predict_label(x)? == ds.label(i), loss))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok(EvalMetrics {
        accuracy: per.iter().filter(|p| p.0).count() as f64 / n,
        loss: per.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScore {
    pub index: usize,
    pub label: i8,
    /// Cross-entropy (or logistic) loss.
    pub loss_score: f64,
    pub el2n: f64,
    /// Norm of the loss gradient with respect to the parameters.
    pub gradnorm: f64,
    /// Squared norm of the output gradient, summed over outputs.
    pub ntk_diag: f64,
    pub margin_approx: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ScoreOptions {
    pub q: QNorm,
    pub ntk_sigmoid: bool,
}

pub fn score_sample(model: &MlpModel, ds: &LabeledDataset, i: usize, opts: &ScoreOptions) -> Result<DifficultyScore> {
    let x = ds.row(i);
    let t = model.target_for_label(ds.label(i))?;
    let lg = model.loss_and_grads(x, t).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { sample: i },
        e => e,
    })?;
    Ok(DifficultyScore {
        index: i,
        label: ds.label(i),
        loss_score: lg.loss,
        el2n: model.el2n_score(x, t)?,
        gradnorm: l2(&lg.grad_params),
        ntk_diag: model.ntk_diag_score(x, opts.ntk_sigmoid)?,
        margin_approx: model.margin_approx(x, opts.q)?,
    })
}

/// Every difficulty score for every row, in row order.
pub fn score_dataset(model: &MlpModel, ds: &LabeledDataset, opts: &ScoreOptions) -> Result<Vec<DifficultyScore>> {
    if ds.d() != model.d_in {
        return Err(Error::DimensionMismatch {
            expected: model.d_in,
            got: ds.d(),
        });
    }
    (0..ds.len())
        .into_par_iter()
        .map(|i| score_sample(model, ds, i, opts))
        .collect()
}

pub fn write_scores_csv<W: std::io::Write>(scores: &[DifficultyScore], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "index",
        "label",
        "loss_score",
        "el2n",
        "gradnorm",
        "ntk_diag",
        "margin_approx",
    ])?;
    for s in scores {
        w.write_record([
            s.index.to_string(),
            s.label.to_string(),
            s.loss_score.to_string(),
            s.el2n.to_string(),
            s.gradnorm.to_string(),
            s.ntk_diag.to_string(),
            s.margin_approx.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledDataset;
    use rand_distr::StandardNormal;

    fn gauss_vec(rng: &mut impl rand::Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// Forward-mode derivative of the logits along one parameter direction,
    /// via dual numbers. Independent of `backward`.
    fn dual_logits(m: &MlpModel, x: &[f64], dir: usize) -> Vec<f64> {
        #[derive(Clone, Copy)]
        struct D(f64, f64);
        let p: Vec<D> = m
            .params()
            .iter()
            .enumerate()
            .map(|(i, &v)| D(v, if i == dir { 1.0 } else { 0.0 }))
            .collect();
        let (din, dh, dout) = (m.d_in(), m.d_hidden(), m.d_out());
        let mut hidden = Vec::new();
        for k in 0..dh {
            let mut z = p[dh * din + k];
            for i in 0..din {
                let w = p[k * din + i];
                z = D(z.0 + w.0 * x[i], z.1 + w.1 * x[i]);
            }
            let a = match m.activation() {
                Activation::Tanh => {
                    let t = z.0.tanh();
                    D(t, (1.0 - t * t) * z.1)
                }
                Activation::Relu => {
                    if z.0 > 0.0 {
                        z
                    } else {
                        D(0.0, 0.0)
                    }
                }
                Activation::Identity => z,
            };
            hidden.push(a);
        }
        let w2 = dh * (din + 1);
        (0..dout)
            .map(|j| {
                let mut f = p[w2 + dout * dh + j];
                for k in 0..dh {
                    let w = p[w2 + j * dh + k];
                    let a = hidden[k];
                    f = D(f.0 + w.0 * a.0, f.1 + w.1 * a.0 + w.0 * a.1);
                }
                f.1
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        diff / l2(a).max(l2(b)).max(1e-12)
    }

    #[test]
    fn forward_landmarks() {
        let m = MlpModel::new(3, 4, 2, Activation::Tanh, vec![0.0; param_count(3, 4, 2)]).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
        let m = MlpModel::new(1, 1, 1, Activation::Tanh, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m.forward(&[0.0]).unwrap(), vec![0.0]);
        assert!(m.forward(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn relu_positive_region_is_composed_linear_map() {
        // W1 = [[1,2],[3,1]], b1 = [1,1], W2 = [[1,-1]], b2 = [0.5]
        let m = MlpModel::new(
            2,
            2,
            1,
            Activation::Relu,
            vec![1.0, 2.0, 3.0, 1.0, 1.0, 1.0, 1.0, -1.0, 0.5],
        )
        .unwrap();
        let x = [0.3, 0.7];
        let h = [1.0 * 0.3 + 2.0 * 0.7 + 1.0, 3.0 * 0.3 + 1.0 * 0.7 + 1.0];
        let oracle = h[0] - h[1] + 0.5;
        assert!((m.forward(&x).unwrap()[0] - oracle).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let m = MlpModel::new(2, 3, 5, Activation::Tanh, vec![0.0; param_count(2, 3, 5)]).unwrap();
        let l = m.loss(&[1.0, 2.0], Target::Class(3)).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_prediction_has_small_loss() {
        let mut params = vec![0.0; param_count(1, 1, 2)];
        // b2 = [-20, 20]
        let n = params.len();
        params[n - 2] = -20.0;
        params[n - 1] = 20.0;
        let m = MlpModel::new(1, 1, 2, Activation::Tanh, params).unwrap();
        let lg = m.loss_and_grads(&[0.5], Target::Class(1)).unwrap();
        assert!(lg.loss < 1e-15);
        assert!(l2(&lg.grad_params) < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream_rng(11, Stream::Probe);
        let h = 1e-5;
        let mut checked = 0;
        for case in 0..120 {
            let act = [Activation::Tanh, Activation::Relu, Activation::Identity][case % 3];
            let d_out = [1, 2, 3][(case / 3) % 3];
            let m = MlpModel::init(4, 6, d_out, act, case as u64).unwrap();
            let x = gauss_vec(&mut rng, 4, 1.0);
            if act == Activation::Relu && m.forward_cache(&x).unwrap().pre.iter().any(|z| z.abs() < 1e-3) {
                continue;
            }
            let t = if d_out == 1 {
                Target::Sign(if case % 4 < 2 { 1 } else { -1 })
            } else {
                Target::Class(case % d_out)
            };
            let lg = m.loss_and_grads(&x, t).unwrap();
            let fd_p: Vec<f64> = (0..m.n_params())
                .map(|k| {
                    let mut a = m.params().to_vec();
                    let mut b = a.clone();
                    a[k] += h;
                    b[k] -= h;
                    (m.with_params(a).unwrap().loss(&x, t).unwrap() - m.with_params(b).unwrap().loss(&x, t).unwrap())
                        / (2.0 * h)
                })
                .collect();
            let fd_x: Vec<f64> = (0..4)
                .map(|i| {
                    let mut a = x.clone();
                    let mut b = x.clone();
                    a[i] += h;
                    b[i] -= h;
                    (m.loss(&a, t).unwrap() - m.loss(&b, t).unwrap()) / (2.0 * h)
                })
                .collect();
            assert!(rel_err(&lg.grad_params, &fd_p) < 1e-5, "case {case}");
            assert!(rel_err(&lg.grad_input, &fd_x) < 1e-5, "case {case}");
            checked += 1;
        }
        assert!(checked >= 100);
    }

    #[test]
    fn el2n_landmarks_and_ranking() {
        let m = MlpModel::new(1, 1, 2, Activation::Tanh, vec![0.0; param_count(1, 1, 2)]).unwrap();
        let v = m.el2n_score(&[0.3], Target::Class(0)).unwrap();
        assert!((v - 0.5f64.sqrt()).abs() < 1e-15);

        let mut params = vec![0.0; param_count(1, 1, 2)];
        let n = params.len();
        params[n - 1] = 800.0;
        let m = MlpModel::new(1, 1, 2, Activation::Tanh, params).unwrap();
        assert_eq!(m.el2n_score(&[0.0], Target::Class(1)).unwrap(), 0.0);

        // binary head: el2n = √2 (1 − p) and loss = −ln p are both decreasing in p
        let grid: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
        let el2n: Vec<f64> = grid.iter().map(|p| (2.0f64).sqrt() * (1.0 - p)).collect();
        let ce: Vec<f64> = grid.iter().map(|p| -p.ln()).collect();
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            idx
        };
        assert_eq!(rank(&el2n), rank(&ce));
        // and the model's el2n matches that closed form
        let m = MlpModel::init(2, 5, 2, Activation::Tanh, 3).unwrap();
        let x = [0.4, -1.2];
        let p = m.probabilities(&x).unwrap()[1];
        assert!((m.el2n_score(&x, Target::Class(1)).unwrap() - 2f64.sqrt() * (1.0 - p)).abs() < 1e-14);
    }

    #[test]
    fn ntk_diag_hand_computed_at_origin() {
        // 1-1-1 tanh net, x = 0, zero biases: z = 0, a = 0, f = 0.
        // ∂f/∂W1 = W2·(1 − a²)·x = 0, ∂f/∂b1 = W2, ∂f/∂W2 = a = 0, ∂f/∂b2 = 1.
        let w2 = 0.7;
        let m = MlpModel::new(1, 1, 1, Activation::Tanh, vec![1.3, 0.0, w2, 0.0]).unwrap();
        let v = m.ntk_diag_score(&[0.0], false).unwrap();
        assert!((v - (w2 * w2 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn ntk_diag_scales_quadratically_for_linear_nets() {
        let mut m = MlpModel::init(3, 4, 2, Activation::Identity, 5).unwrap();
        let mut p = m.params().to_vec();
        for k in 0..4 {
            p[12 + k] = 0.0;
        }
        let n = p.len();
        p[n - 2] = 0.0;
        p[n - 1] = 0.0;
        m = m.with_params(p).unwrap();
        let x = [0.5, -1.0, 2.0];
        let xs: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        // the b1 and b2 gradients do not depend on x; the rest is linear in x
        let base = m.ntk_diag_score(&[0.0; 3], false).unwrap();
        let a = m.ntk_diag_score(&x, false).unwrap() - base;
        let b = m.ntk_diag_score(&xs, false).unwrap() - base;
        assert!(((b / a) - 9.0).abs() < 1e-9, "{}", b / a);
    }

    #[test]
    fn ntk_diag_equals_brute_force_kernel_diagonal() {
        let m = MlpModel::init(3, 6, 2, Activation::Tanh, 9).unwrap();
        let mut rng = stream_rng(4, Stream::Probe);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| gauss_vec(&mut rng, 3, 1.0)).collect();
        // brute force: Jacobian columns by forward mode, then all pairwise products
        let jac: Vec<Vec<Vec<f64>>> = rows
            .iter()
            .map(|x| (0..m.n_params()).map(|k| dual_logits(&m, x, k)).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let k = empirical_ntk(&m, &refs).unwrap();
        for a in 0..50 {
            for b in 0..50 {
                let oracle: f64 = (0..m.n_params())
                    .map(|p| (0..2).map(|j| jac[a][p][j] * jac[b][p][j]).sum::<f64>())
                    .sum();
                assert!((k[a * 50 + b] - oracle).abs() < 1e-10 * oracle.abs().max(1.0));
            }
            let diag = m.ntk_diag_score(&rows[a], false).unwrap();
            assert!((diag - k[a * 50 + a]).abs() < 1e-10 * diag.max(1.0));
        }
    }

    #[test]
    fn gradnorm_identity_for_logistic_head() {
        let mut rng = stream_rng(6, Stream::Probe);
        for s in 0..20 {
            let m = MlpModel::init(4, 7, 1, Activation::Tanh, s).unwrap();
            let x = gauss_vec(&mut rng, 4, 1.5);
            let y = if s % 2 == 0 { 1 } else { -1 };
            let f = m.forward(&x).unwrap()[0];
            let y0 = if y > 0 { 1.0 } else { 0.0 };
            let expected = (sigmoid(f) - y0).abs() * m.ntk_diag_score(&x, false).unwrap().sqrt();
            let g = m.gradnorm_score(&x, Target::Sign(y)).unwrap();
            assert!((g - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn sigmoid_ntk_variant_scales_by_sigmoid_slope() {
        let m = MlpModel::init(2, 3, 1, Activation::Tanh, 2).unwrap();
        let x = [0.3, 0.9];
        let f = m.forward(&x).unwrap()[0];
        let s = sigmoid(f);
        let raw = m.ntk_diag_score(&x, false).unwrap();
        let sq = m.ntk_diag_score(&x, true).unwrap();
        assert!((sq - raw * (s * (1.0 - s)).powi(2)).abs() < 1e-14);
    }

    fn linear_model(w: &[f64], b: f64) -> MlpModel {
        // identity hidden layer of width d with W1 = I, b1 = 0, W2 = w, b2 = b
        let d = w.len();
        let mut p = vec![0.0; param_count(d, d, 1)];
        for i in 0..d {
            p[i * d + i] = 1.0;
        }
        let w2 = d * (d + 1);
        p[w2..w2 + d].copy_from_slice(w);
        p[w2 + d] = b;
        MlpModel::new(d, d, 1, Activation::Identity, p).unwrap()
    }

    #[test]
    fn margin_exact_for_linear_models() {
        let mut rng = stream_rng(7, Stream::Probe);
        for _ in 0..100 {
            let w = gauss_vec(&mut rng, 5, 1.0);
            let b: f64 = rng.sample(StandardNormal);
            let x = gauss_vec(&mut rng, 5, 2.0);
            let m = linear_model(&w, b);
            let dist = (crate::dataset::dot(&w, &x) + b).abs() / l2(&w);
            let got = m.margin_approx(&x, QNorm::L2).unwrap();
            assert!((got - dist).abs() <= 1e-12 * dist.max(1.0));
            // dual norms
            let f = (crate::dataset::dot(&w, &x) + b).abs();
            assert!((m.margin_approx(&x, QNorm::L1).unwrap() - f / QNorm::L1.norm(&w)).abs() < 1e-12 * f.max(1.0));
            assert!((m.margin_approx(&x, QNorm::Inf).unwrap() - f / QNorm::Inf.norm(&w)).abs() < 1e-12 * f.max(1.0));
        }
    }

    #[test]
    fn margin_rotation_invariant_for_linear_models() {
        let w = [0.6, -1.2, 0.4];
        let x = [1.0, 0.5, -2.0];
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = |v: &[f64]| vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
        let a = linear_model(&w, 0.2).margin_approx(&x, QNorm::L2).unwrap();
        let b = linear_model(&rot(&w), 0.2).margin_approx(&rot(&x), QNorm::L2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn margin_zero_and_flat_cases() {
        let m = linear_model(&[1.0, 0.0], 0.0);
        assert_eq!(m.margin_approx(&[0.0, 5.0], QNorm::L2).unwrap(), 0.0);
        let flat = linear_model(&[0.0, 0.0], 1.0);
        assert!(matches!(
            flat.margin_approx(&[1.0, 1.0], QNorm::L2),
            Err(Error::FlatPoint)
        ));
        let multi = MlpModel::init(2, 3, 3, Activation::Tanh, 0).unwrap();
        assert!(multi.margin_approx(&[1.0, 1.0], QNorm::L2).is_err());
    }

    #[test]
    fn two_class_margin_uses_logit_difference() {
        let m = MlpModel::init(3, 5, 2, Activation::Tanh, 12).unwrap();
        let x = [0.2, -0.4, 0.9];
        let l = m.forward(&x).unwrap();
        assert!((m.decision(&x).unwrap() - (l[1] - l[0])).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = MlpModel::init(2, 3, 2, Activation::Relu, 1).unwrap();
        let back = MlpModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let bad = r#"{"d_in":2,"d_hidden":3,"d_out":2,"activation":"tanh","params":[0.0]}"#;
        assert!(MlpModel::from_json(bad).is_err());
    }

    fn blobs(n: usize, sep: f64, seed: u64) -> LabeledDataset {
        let mut rng = stream_rng(seed, Stream::Features);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y: i8 = if i % 2 == 0 { 1 } else { -1 };
            features.push(f64::from(y) * sep + rng.sample::<f64, _>(StandardNormal));
            features.push(rng.sample::<f64, _>(StandardNormal));
            labels.push(y);
        }
        LabeledDataset::new(2, features, labels).unwrap()
    }

    #[test]
    fn lr_zero_leaves_params() {
        let ds = blobs(50, 1.0, 1);
        let m = MlpModel::init(2, 8, 2, Activation::Tanh, 3).unwrap();
        let t = train_one_epoch(&m, &ds, 0.0, 8, 4).unwrap();
        assert_eq!(m.params(), t.params());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let ds = blobs(400, 1.5, 2);
        let mut accs = Vec::new();
        for seed in 0..20 {
            let m = MlpModel::init(2, 16, 2, Activation::Tanh, seed).unwrap();
            let a = train_one_epoch(&m, &ds, 0.05, 16, seed).unwrap();
            let b = train_one_epoch(&m, &ds, 0.05, 16, seed).unwrap();
            assert_eq!(a.params(), b.params());
            accs.push(evaluate(&a, &ds).unwrap().accuracy);
        }
        accs.sort_by(f64::total_cmp);
        let med = 0.5 * (accs[9] + accs[10]);
        assert!(med > 0.8 && med < 1.0, "median one-epoch accuracy {med}");
    }

    #[test]
    fn divergence_names_batch() {
        let ds = blobs(64, 1.0, 3);
        let m = MlpModel::init(2, 4, 1, Activation::Identity, 1).unwrap();
        let r = train_one_epoch(&m, &ds, 1e300, 8, 0);
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn scores_are_non_negative_and_csv_has_header() {
        let ds = blobs(30, 1.0, 5);
        let m = MlpModel::init(2, 8, 2, Activation::Tanh, 6).unwrap();
        let scores = score_dataset(&m, &ds, &ScoreOptions::default()).unwrap();
        assert_eq!(scores.len(), 30);
        for s in &scores {
            assert!(s.ntk_diag >= 0.0 && s.gradnorm >= 0.0 && s.margin_approx >= 0.0);
        }
        let mut buf = Vec::new();
        write_scores_csv(&scores, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("index,label,loss_score,el2n,gradnorm,ntk_diag,margin_approx\n"));
        assert_eq!(text.lines().count(), 31);
    }

    #[test]
    fn ntk_summary_on_diagonal_matrix() {
        let k = vec![4.0, 1.0, -1.0, 1.0, 6.0, 0.5, -1.0, 0.5, 8.0];
        let s = ntk_summary(&k, 3).unwrap();
        assert_eq!(s.median_diag, 6.0);
        assert_eq!(s.median_abs_offdiag, 1.0);
    }
}
