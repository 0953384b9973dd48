//! Label-correlation-driven cross-attention and the training objective.
//!
//! A learnable embedding holds one row per emotion class. Its self cosine
//! similarity is the learned correlation `M^L`, pulled toward the correlation
//! of the ground-truth labels by a squared Frobenius penalty and added as a
//! bias to the label-to-feature attention logits.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{acc_tn, mm, mm_nt, mm_tn, softmax_in_place};
use crate::numerics::{
    cosine_rows, cosine_rows_backward, gelu, gelu_grad, softmax_rows, softmax_rows_backward, Gradients, Matrix, ParamId,
    ParamStore,
};

/// Additive smoothing applied before any logarithm of a distribution.
pub const SMOOTHING: f64 = 1e-8;

/// Tolerance on the total mass of a validated distribution.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Nonnegative intensities over the emotion classes, summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionDistribution(Vec<f64>);

impl EmotionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Validation("distribution has no entries".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::Validation(format!("distribution entry {bad} is not a nonnegative number")));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Validation(format!("distribution sums to {s}, expected 1")));
        }
        Ok(EmotionDistribution(probs))
    }

    /// Normalizes nonnegative weights to unit mass.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) {
            return Err(Error::Validation("weights must have positive mass".into()));
        }
        Self::new(weights.iter().map(|w| w / s).collect())
    }

    pub fn uniform(l: usize) -> Self {
        EmotionDistribution(vec![1.0 / l as f64; l])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `(p + 1e-8) / (1 + l·1e-8)`.
    pub fn smoothed(&self) -> Vec<f64> {
        let z = 1.0 + self.0.len() as f64 * SMOOTHING;
        self.0.iter().map(|p| (p + SMOOTHING) / z).collect()
    }
}

/// Square label-correlation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub matrix: Matrix,
    /// Some input row had zero norm.
    pub degenerate: bool,
}

/// `M[i][j] = cos(rows_i, rows_j)`.
pub fn correlation_matrix(rows: &Matrix) -> Result<CorrelationMatrix> {
    if rows.rows() == 0 {
        return Err(Error::Validation("correlation of zero rows".into()));
    }
    let c = cosine_rows(rows, rows)?;
    Ok(CorrelationMatrix {
        matrix: c.matrix,
        degenerate: c.degenerate,
    })
}

/// `l x B` matrix whose row `i` is label `i`'s probability across the batch.
pub fn label_matrix(labels: &[&EmotionDistribution]) -> Result<Matrix> {
    let l = labels.first().map(|d| d.len()).ok_or(Error::EmptySet)?;
    let mut m = Matrix::zeros(l, labels.len());
    for (b, d) in labels.iter().enumerate() {
        if d.len() != l {
            return Err(Error::dim("label_matrix", (l, labels.len()), (d.len(), 1)));
        }
        for (i, p) in d.probs().iter().enumerate() {
            m.set(i, b, *p);
        }
    }
    Ok(m)
}

/// Ground-truth correlation `M^gt` of a batch of labels.
///
/// A single-sample batch only has scalar per-label values, so every entry is 1.
pub fn ground_truth_correlation(labels: &[&EmotionDistribution]) -> Result<CorrelationMatrix> {
    if labels.len() == 1 {
        warn!("ground-truth label correlation from a single sample is all ones");
    }
    correlation_matrix(&label_matrix(labels)?)
}

/// `‖M^L − M^gt‖²` summed over all entries.
pub fn cc_loss(m_learn: &CorrelationMatrix, m_gt: &CorrelationMatrix) -> Result<f64> {
    Ok(m_learn.matrix.sub(&m_gt.matrix)?.frobenius_sq())
}

/// Gradient of [`cc_loss`] with respect to `M^L`.
pub fn cc_loss_grad(m_learn: &Matrix, m_gt: &Matrix) -> Matrix {
    m_learn.sub(m_gt).expect("matching shapes").scale(2.0)
}

/// `KL(truth ‖ pred)` on smoothed distributions.
///
/// ```
/// use helo::labels::{kld_loss, EmotionDistribution};
/// let truth = EmotionDistribution::new(vec![0.75, 0.25]).unwrap();
/// let pred = EmotionDistribution::new(vec![0.5, 0.5]).unwrap();
/// assert!((kld_loss(&pred, &truth).unwrap() - 0.130812).abs() < 1e-6);
/// ```
pub fn kld_loss(pred: &EmotionDistribution, truth: &EmotionDistribution) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("kld_loss", (pred.len(), 1), (truth.len(), 1)));
    }
    let p = pred.smoothed();
    let t = truth.smoothed();
    Ok(t.iter().zip(&p).map(|(t, p)| t * (t / p).ln()).sum())
}

/// Gradient of [`kld_loss`] with respect to the unsmoothed prediction.
pub fn kld_loss_grad(pred: &EmotionDistribution, truth: &EmotionDistribution) -> Vec<f64> {
    let z = 1.0 + pred.len() as f64 * SMOOTHING;
    let p = pred.smoothed();
    let t = truth.smoothed();
    t.iter().zip(&p).map(|(t, p)| -t / p / z).collect()
}

/// `kld + lambda_cc · cc`.
pub fn overall_loss(kld: f64, cc: f64, lambda_cc: f64) -> Result<f64> {
    if !(lambda_cc >= 0.0) {
        return Err(Error::Config(format!("lambda_cc must be nonnegative, got {lambda_cc}")));
    }
    Ok(kld + lambda_cc * cc)
}

/// `l x l` matrix as CSV with label names on both axes.
pub fn correlation_csv(labels: &[String], m: &Matrix) -> String {
    let mut out = String::from("label");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (i, l) in labels.iter().enumerate() {
        out.push_str(l);
        for v in m.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct LcdcaCache {
    x_l: Matrix,
    pooled: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Label-to-token attention weights.
    pub probs: Matrix,
}

/// `softmax((Q^L (K^m)ᵀ + M^L) / sqrt(d)) V^m` with `Q^L = x_L W_q`, `K^m = x_m W_k`, `V^m = x_m W_v`.
///
/// `x_m` must already be pooled to exactly `l` tokens.
pub fn lcdca(
    x_l: &Matrix,
    x_m: &Matrix,
    m_learn: &Matrix,
    w_q: &Matrix,
    w_k: &Matrix,
    w_v: &Matrix,
) -> Result<(Matrix, LcdcaCache)> {
    let l = x_l.rows();
    if x_m.rows() != l {
        return Err(Error::Config(format!(
            "label attention needs {l} pooled tokens, got {}",
            x_m.rows()
        )));
    }
    if m_learn.shape() != (l, l) {
        return Err(Error::dim("lcdca bias", m_learn.shape(), (l, l)));
    }
    if x_l.cols() != w_q.rows() || x_m.cols() != w_k.rows() || x_m.cols() != w_v.rows() {
        return Err(Error::dim("lcdca projections", x_m.shape(), w_k.shape()));
    }
    let q = mm(x_l, w_q);
    let k = mm(x_m, w_k);
    let v = mm(x_m, w_v);
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut logits = mm_nt(&q, &k);
    logits.add_assign(m_learn);
    logits.scale_in_place(scale);
    let probs = softmax_rows(&logits);
    let out = mm(&probs, &v);
    Ok((
        out,
        LcdcaCache {
            x_l: x_l.clone(),
            pooled: x_m.clone(),
            q,
            k,
            v,
            probs,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct LcdcaGrads {
    pub d_x_l: Matrix,
    pub d_x_m: Matrix,
    pub d_m_learn: Matrix,
    pub d_w_q: Matrix,
    pub d_w_k: Matrix,
    pub d_w_v: Matrix,
}

pub fn lcdca_backward(cache: &LcdcaCache, w_q: &Matrix, w_k: &Matrix, w_v: &Matrix, d_out: &Matrix) -> LcdcaGrads {
    let scale = 1.0 / (cache.q.cols() as f64).sqrt();
    let dv = mm_tn(&cache.probs, d_out);
    let dp = mm_nt(d_out, &cache.v);
    let mut ds = softmax_rows_backward(&cache.probs, &dp);
    ds.scale_in_place(scale);
    let dq = mm(&ds, &cache.k);
    let dk = mm_tn(&ds, &cache.q);
    let mut d_x_m = mm_nt(&dk, w_k);
    d_x_m.add_assign(&mm_nt(&dv, w_v));
    LcdcaGrads {
        d_x_l: mm_nt(&dq, w_q),
        d_x_m,
        d_m_learn: ds,
        d_w_q: mm_tn(&cache.x_l, &dq),
        d_w_k: mm_tn(&cache.pooled, &dk),
        d_w_v: mm_tn(&cache.pooled, &dv),
    }
}

/// Parameters of the label branch: embedding, token pooling and attention projections.
#[derive(Clone, Debug)]
pub struct LabelAttention {
    /// `l x d` label embedding `x^L`.
    pub x_l: ParamId,
    /// `l x n_tokens` pooling from fused tokens to one token per label.
    pub pool: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug)]
pub struct LabelAttentionCache {
    x_m: Matrix,
    pub m_learn: Matrix,
    pub attention: LcdcaCache,
}

impl LabelAttention {
    pub fn new(store: &mut ParamStore, labels: usize, tokens: usize, d: usize, rng: &mut impl Rng) -> Self {
        LabelAttention {
            x_l: store.add_xavier("label.embedding", labels, d, rng),
            pool: store.add_xavier("label.pool", labels, tokens, rng),
            w_q: store.add_xavier("label.w_q", d, d, rng),
            w_k: store.add_xavier("label.w_k", d, d, rng),
            w_v: store.add_xavier("label.w_v", d, d, rng),
        }
    }

    /// Learned correlation `M^L` from the current embedding.
    pub fn learned_correlation(&self, store: &ParamStore) -> CorrelationMatrix {
        correlation_matrix(store.value(self.x_l)).expect("embedding has rows")
    }

    /// Pools `x_m` to `l` tokens and applies label-correlation attention; returns `l x d`.
    pub fn forward(&self, store: &ParamStore, x_m: &Matrix) -> Result<(Matrix, LabelAttentionCache)> {
        let pool = store.value(self.pool);
        if pool.cols() != x_m.rows() {
            return Err(Error::Config(format!(
                "label pooling expects {} fused tokens, got {}",
                pool.cols(),
                x_m.rows()
            )));
        }
        let pooled = mm(pool, x_m);
        let m_learn = self.learned_correlation(store).matrix;
        let (out, attention) = lcdca(
            store.value(self.x_l),
            &pooled,
            &m_learn,
            store.value(self.w_q),
            store.value(self.w_k),
            store.value(self.w_v),
        )?;
        Ok((
            out,
            LabelAttentionCache {
                x_m: x_m.clone(),
                m_learn,
                attention,
            },
        ))
    }

    /// Accumulates parameter gradients (including the path through `M^L`) and returns `d x_m`.
    pub fn backward(&self, store: &ParamStore, cache: &LabelAttentionCache, d_out: &Matrix, grads: &mut Gradients) -> Matrix {
        let g = lcdca_backward(
            &cache.attention,
            store.value(self.w_q),
            store.value(self.w_k),
            store.value(self.w_v),
            d_out,
        );
        grads.accumulate(self.w_q, &g.d_w_q);
        grads.accumulate(self.w_k, &g.d_w_k);
        grads.accumulate(self.w_v, &g.d_w_v);
        grads.accumulate(self.x_l, &g.d_x_l);
        self.correlation_backward(store, &g.d_m_learn, grads);
        acc_tn_into_pool(grads.get_mut(self.pool), &g.d_x_m, &cache.x_m);
        mm_tn(store.value(self.pool), &g.d_x_m)
    }

    /// Backpropagates a gradient on `M^L` into the embedding.
    pub fn correlation_backward(&self, store: &ParamStore, d_m: &Matrix, grads: &mut Gradients) {
        let x_l = store.value(self.x_l);
        let (da, db) = cosine_rows_backward(x_l, x_l, d_m);
        let g = grads.get_mut(self.x_l);
        g.add_assign(&da);
        g.add_assign(&db);
    }
}

/// `acc += d_pooled · x_mᵀ`.
fn acc_tn_into_pool(acc: &mut Matrix, d_pooled: &Matrix, x_m: &Matrix) {
    acc.add_assign(&mm_nt(d_pooled, x_m));
}

/// Three affine layers with GELU between them, followed by softmax.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    input: Matrix,
    h1: Matrix,
    a1: Matrix,
    h2: Matrix,
    a2: Matrix,
    pub probs: Matrix,
}

impl PredictionHead {
    pub fn new(store: &mut ParamStore, input: usize, hidden: [usize; 2], labels: usize, rng: &mut impl Rng) -> Self {
        PredictionHead {
            w1: store.add_xavier("head.w1", input, hidden[0], rng),
            b1: store.add("head.b1", Matrix::zeros(1, hidden[0])),
            w2: store.add_xavier("head.w2", hidden[0], hidden[1], rng),
            b2: store.add("head.b2", Matrix::zeros(1, hidden[1])),
            w3: store.add_xavier("head.w3", hidden[1], labels, rng),
            b3: store.add("head.b3", Matrix::zeros(1, labels)),
        }
    }

    /// Maps a `1 x d` pooled representation to a distribution.
    pub fn forward(&self, store: &ParamStore, input: &Matrix) -> Result<(EmotionDistribution, HeadCache)> {
        if input.rows() != 1 || input.cols() != store.value(self.w1).rows() {
            return Err(Error::dim("prediction head", input.shape(), store.value(self.w1).shape()));
        }
        let mut h1 = mm(input, store.value(self.w1));
        h1.add_row_broadcast(store.value(self.b1));
        let a1 = h1.map(gelu);
        let mut h2 = mm(&a1, store.value(self.w2));
        h2.add_row_broadcast(store.value(self.b2));
        let a2 = h2.map(gelu);
        let mut logits = mm(&a2, store.value(self.w3));
        logits.add_row_broadcast(store.value(self.b3));
        let mut probs = logits;
        softmax_in_place(probs.row_mut(0));
        let dist = EmotionDistribution(probs.row(0).to_vec());
        Ok((
            dist,
            HeadCache {
                input: input.clone(),
                h1,
                a1,
                h2,
                a2,
                probs,
            },
        ))
    }

    /// Takes the gradient on the output probabilities; returns the gradient on the input.
    pub fn backward(&self, store: &ParamStore, cache: &HeadCache, d_probs: &[f64], grads: &mut Gradients) -> Matrix {
        let d_logits = softmax_rows_backward(&cache.probs, &Matrix::row_vector(d_probs));
        grads.accumulate(self.b3, &d_logits);
        acc_tn(grads.get_mut(self.w3), &cache.a2, &d_logits);
        let mut d_h2 = mm_nt(&d_logits, store.value(self.w3));
        for (g, &h) in d_h2.as_mut_slice().iter_mut().zip(cache.h2.as_slice()) {
            *g *= gelu_grad(h);
        }
        grads.accumulate(self.b2, &d_h2);
        acc_tn(grads.get_mut(self.w2), &cache.a1, &d_h2);
        let mut d_h1 = mm_nt(&d_h2, store.value(self.w2));
        for (g, &h) in d_h1.as_mut_slice().iter_mut().zip(cache.h1.as_slice()) {
            *g *= gelu_grad(h);
        }
        grads.accumulate(self.b1, &d_h1);
        acc_tn(grads.get_mut(self.w1), &cache.input, &d_h1);
        mm_nt(&d_h1, store.value(self.w1))
    }
}
