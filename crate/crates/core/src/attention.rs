//! Cross-attention physiological fusion and the transformer encoder.
//!
//! Every physiological modality is projected to `C` tokens of width `d`. The
//! query modality (EEG on DMER) attends over each remaining physiological
//! modality with multi-head attention; each cross-modal output gets the layer
//! normalized key/value tokens added back as a residual, and the per-modality
//! results are stacked along the token axis.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::{acc_tn, mm, mm_nt, mm_tn};
use crate::numerics::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_cached, softmax_rows, softmax_rows_backward, Gradients,
    LayerNormCache, Matrix, ParamId, ParamStore,
};

pub const LN_EPS: f64 = 1e-5;

/// Tokens of one modality after input projection.
#[derive(Clone, Debug)]
pub struct ModalityTokens {
    pub modality: String,
    pub tokens: Matrix,
}

/// `tokens = mix · raw · proj + bias`.
///
/// `raw` is one sample's feature vector reshaped to `C_raw x d_raw`; `mix` is
/// `C x C_raw`, `proj` is `d_raw x d` and `bias` is `1 x d`.
pub fn project_modality(raw: &Matrix, mix: &Matrix, proj: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if raw.cols() != proj.rows() {
        return Err(Error::dim("project_modality proj", raw.shape(), proj.shape()));
    }
    if mix.cols() != raw.rows() {
        return Err(Error::dim("project_modality mix", mix.shape(), raw.shape()));
    }
    if bias.shape() != (1, proj.cols()) {
        return Err(Error::dim("project_modality bias", proj.shape(), bias.shape()));
    }
    let mut out = mm(mix, &mm(raw, proj));
    out.add_row_broadcast(bias);
    Ok(out)
}

/// Learned input projection for one modality.
#[derive(Clone, Debug)]
pub struct ModalityProjection {
    pub modality: String,
    pub mix: ParamId,
    pub proj: ParamId,
    pub bias: ParamId,
    pub raw_rows: usize,
    pub raw_cols: usize,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct ProjectionCache {
    raw: Matrix,
    inner: Matrix,
}

impl ModalityProjection {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        modality: &str,
        raw_rows: usize,
        raw_cols: usize,
        tokens: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mix = store.add_xavier(format!("proj.{modality}.mix"), tokens, raw_rows, rng);
        let proj = store.add_xavier(format!("proj.{modality}.weight"), raw_cols, d, rng);
        let bias = store.add(format!("proj.{modality}.bias"), Matrix::zeros(1, d));
        ModalityProjection {
            modality: modality.to_string(),
            mix,
            proj,
            bias,
            raw_rows,
            raw_cols,
            tokens,
        }
    }

    /// Projects a flat feature vector.
    pub fn forward(&self, store: &ParamStore, features: &[f64]) -> Result<(ModalityTokens, ProjectionCache)> {
        if features.len() != self.raw_rows * self.raw_cols {
            return Err(Error::dim(
                "project_modality input",
                (self.raw_rows, self.raw_cols),
                (features.len(), 1),
            ));
        }
        let raw = Matrix::from_vec(self.raw_rows, self.raw_cols, features.to_vec())?;
        let inner = mm(&raw, store.value(self.proj));
        let mut tokens = mm(store.value(self.mix), &inner);
        tokens.add_row_broadcast(store.value(self.bias));
        Ok((
            ModalityTokens {
                modality: self.modality.clone(),
                tokens,
            },
            ProjectionCache { raw, inner },
        ))
    }

    pub fn backward(&self, store: &ParamStore, cache: &ProjectionCache, d_tokens: &Matrix, grads: &mut Gradients) {
        grads.get_mut(self.bias).add_assign(&d_tokens.sum_rows());
        grads.get_mut(self.mix).add_assign(&mm_nt(d_tokens, &cache.inner));
        let d_inner = mm_tn(store.value(self.mix), d_tokens);
        acc_tn(grads.get_mut(self.proj), &cache.raw, &d_inner);
    }
}

/// Projection matrices of one multi-head attention block (all `d x d`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'a> {
    pub w_q: &'a Matrix,
    pub w_k: &'a Matrix,
    pub w_v: &'a Matrix,
    pub w_o: &'a Matrix,
    pub heads: usize,
}

/// Forward state of [`multi_head_attention`]; `probs` holds one attention map per head.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    q_src: Matrix,
    kv_src: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    pub probs: Vec<Matrix>,
    concat: Matrix,
}

#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub d_q_src: Matrix,
    pub d_kv_src: Matrix,
    pub d_w_q: Matrix,
    pub d_w_k: Matrix,
    pub d_w_v: Matrix,
    pub d_w_o: Matrix,
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide embedding width {d}")));
    }
    Ok(())
}

/// `concat_h softmax(Q_h K_hᵀ / sqrt(d/h)) V_h · W_o`.
pub fn multi_head_attention(q_src: &Matrix, kv_src: &Matrix, w: AttentionWeights<'_>) -> Result<(Matrix, AttentionCache)> {
    let d = w.w_q.cols();
    check_heads(d, w.heads)?;
    if q_src.cols() != w.w_q.rows() {
        return Err(Error::dim("attention query", q_src.shape(), w.w_q.shape()));
    }
    if kv_src.cols() != w.w_k.rows() || kv_src.cols() != w.w_v.rows() {
        return Err(Error::dim("attention key/value", kv_src.shape(), w.w_k.shape()));
    }
    let q = mm(q_src, w.w_q);
    let k = mm(kv_src, w.w_k);
    let v = mm(kv_src, w.w_v);
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Matrix::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = q.col_block(h * dh, dh);
        let kh = k.col_block(h * dh, dh);
        let vh = v.col_block(h * dh, dh);
        let p = softmax_rows(&mm_nt(&qh, &kh).scale(scale));
        concat.set_col_block(h * dh, &mm(&p, &vh));
        probs.push(p);
    }
    let out = mm(&concat, w.w_o);
    Ok((
        out,
        AttentionCache {
            q_src: q_src.clone(),
            kv_src: kv_src.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    ))
}

pub fn multi_head_attention_backward(cache: &AttentionCache, w: AttentionWeights<'_>, d_out: &Matrix) -> AttentionGrads {
    let mut weight_grads: [Option<Matrix>; 4] = Default::default();
    let (d_q_src, d_kv_src) = mha_backward_with(cache, w, d_out, |slot, a, b| {
        weight_grads[slot as usize] = Some(mm_tn(a, b));
    });
    let [d_w_q, d_w_k, d_w_v, d_w_o] = weight_grads.map(|g| g.expect("every weight gradient is emitted"));
    AttentionGrads {
        d_q_src,
        d_kv_src,
        d_w_q,
        d_w_k,
        d_w_v,
        d_w_o,
    }
}

#[derive(Clone, Copy, Debug)]
enum WeightSlot {
    Q,
    K,
    V,
    O,
}

/// Input gradients of attention; each weight gradient `aᵀ b` is handed to `weight_grad`
/// so callers can accumulate it without a temporary.
fn mha_backward_with(
    cache: &AttentionCache,
    w: AttentionWeights<'_>,
    d_out: &Matrix,
    mut weight_grad: impl FnMut(WeightSlot, &Matrix, &Matrix),
) -> (Matrix, Matrix) {
    let d = w.w_q.cols();
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    weight_grad(WeightSlot::O, &cache.concat, d_out);
    let d_concat = mm_nt(d_out, w.w_o);
    let mut dq = Matrix::zeros(cache.q.rows(), d);
    let mut dk = Matrix::zeros(cache.k.rows(), d);
    let mut dv = Matrix::zeros(cache.v.rows(), d);
    for h in 0..w.heads {
        let p = &cache.probs[h];
        let qh = cache.q.col_block(h * dh, dh);
        let kh = cache.k.col_block(h * dh, dh);
        let vh = cache.v.col_block(h * dh, dh);
        let d_oh = d_concat.col_block(h * dh, dh);
        let dp = mm_nt(&d_oh, &vh);
        dv.set_col_block(h * dh, &mm_tn(p, &d_oh));
        let mut ds = softmax_rows_backward(p, &dp);
        ds.scale_in_place(scale);
        dq.set_col_block(h * dh, &mm(&ds, &kh));
        dk.set_col_block(h * dh, &mm_tn(&ds, &qh));
    }
    weight_grad(WeightSlot::Q, &cache.q_src, &dq);
    weight_grad(WeightSlot::K, &cache.kv_src, &dk);
    weight_grad(WeightSlot::V, &cache.kv_src, &dv);
    let d_q_src = mm_nt(&dq, w.w_q);
    let mut d_kv_src = mm_nt(&dk, w.w_k);
    d_kv_src.add_assign(&mm_nt(&dv, w.w_v));
    (d_q_src, d_kv_src)
}

/// Key/value projections for one key modality.
#[derive(Clone, Copy, Debug)]
pub struct KeyValueParams {
    pub w_k: ParamId,
    pub w_v: ParamId,
}

/// Cross-attention from one query modality onto several key/value modalities.
///
/// The query projection, output transform and layer norm are shared; each key
/// modality has its own key and value projections.
#[derive(Clone, Debug)]
pub struct CrossAttentionParams {
    pub w_q: ParamId,
    pub keys: Vec<KeyValueParams>,
    pub w_mha: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub heads: usize,
}

impl CrossAttentionParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        key_names: &[String],
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        let w_q = store.add_xavier(format!("{prefix}.w_q"), d, d, rng);
        let keys = key_names
            .iter()
            .map(|k| KeyValueParams {
                w_k: store.add_xavier(format!("{prefix}.{k}.w_k"), d, d, rng),
                w_v: store.add_xavier(format!("{prefix}.{k}.w_v"), d, d, rng),
            })
            .collect();
        let w_mha = store.add_xavier(format!("{prefix}.w_mha"), d, d, rng);
        let ln_gamma = store.add(format!("{prefix}.ln.gamma"), Matrix::filled(1, d, 1.0));
        let ln_beta = store.add(format!("{prefix}.ln.beta"), Matrix::zeros(1, d));
        Ok(CrossAttentionParams {
            w_q,
            keys,
            w_mha,
            ln_gamma,
            ln_beta,
            heads,
        })
    }

    fn weights<'a>(&self, store: &'a ParamStore, key: usize) -> AttentionWeights<'a> {
        AttentionWeights {
            w_q: store.value(self.w_q),
            w_k: store.value(self.keys[key].w_k),
            w_v: store.value(self.keys[key].w_v),
            w_o: store.value(self.w_mha),
            heads: self.heads,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttendCache {
    pub attention: AttentionCache,
    ln: LayerNormCache,
}

/// Multi-head attention of `query` over key modality `key`, plus `LN(kv)` as residual.
pub fn cross_attend(
    store: &ParamStore,
    params: &CrossAttentionParams,
    key: usize,
    query: &Matrix,
    kv: &Matrix,
) -> Result<(Matrix, CrossAttendCache)> {
    if query.rows() != kv.rows() {
        return Err(Error::dim("cross_attend residual", query.shape(), kv.shape()));
    }
    let (mut out, attention) = multi_head_attention(query, kv, params.weights(store, key))?;
    let (residual, ln) = layer_norm_cached(kv, store.value(params.ln_gamma), store.value(params.ln_beta), LN_EPS)?;
    out.add_assign(&residual);
    Ok((out, CrossAttendCache { attention, ln }))
}

/// Returns `(d_query, d_kv)` and accumulates parameter gradients.
pub fn cross_attend_backward(
    store: &ParamStore,
    params: &CrossAttentionParams,
    key: usize,
    cache: &CrossAttendCache,
    d_out: &Matrix,
    grads: &mut Gradients,
) -> (Matrix, Matrix) {
    let ids = [params.w_q, params.keys[key].w_k, params.keys[key].w_v, params.w_mha];
    let (d_q_src, mut d_kv) = mha_backward_with(&cache.attention, params.weights(store, key), d_out, |slot, a, b| {
        acc_tn(grads.get_mut(ids[slot as usize]), a, b)
    });
    let (d_ln_in, d_gamma, d_beta) = layer_norm_backward(&cache.ln, store.value(params.ln_gamma), d_out);
    grads.accumulate(params.ln_gamma, &d_gamma);
    grads.accumulate(params.ln_beta, &d_beta);
    d_kv.add_assign(&d_ln_in);
    (d_q_src, d_kv)
}

/// Stacks cross-modal representations along the token axis.
pub fn fuse_physio(parts: &[&Matrix]) -> Result<Matrix> {
    Matrix::vstack(parts)
}

/// One pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

/// A stack of `depth` pre-norm transformer blocks.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayer>,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerCache {
    ln1: LayerNormCache,
    attention: AttentionCache,
    ln2: LayerNormCache,
    n2: Matrix,
    hidden: Matrix,
    activated: Matrix,
}

pub type EncoderCache = Vec<EncoderLayerCache>;

impl EncoderParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ffn: usize,
        depth: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        if depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if ffn == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        let layers = (0..depth)
            .map(|i| {
                let p = format!("{prefix}.{i}");
                EncoderLayer {
                    ln1_gamma: store.add(format!("{p}.ln1.gamma"), Matrix::filled(1, d, 1.0)),
                    ln1_beta: store.add(format!("{p}.ln1.beta"), Matrix::zeros(1, d)),
                    w_q: store.add_xavier(format!("{p}.w_q"), d, d, rng),
                    w_k: store.add_xavier(format!("{p}.w_k"), d, d, rng),
                    w_v: store.add_xavier(format!("{p}.w_v"), d, d, rng),
                    w_o: store.add_xavier(format!("{p}.w_o"), d, d, rng),
                    ln2_gamma: store.add(format!("{p}.ln2.gamma"), Matrix::filled(1, d, 1.0)),
                    ln2_beta: store.add(format!("{p}.ln2.beta"), Matrix::zeros(1, d)),
                    ffn_w1: store.add_xavier(format!("{p}.ffn.w1"), d, ffn, rng),
                    ffn_b1: store.add(format!("{p}.ffn.b1"), Matrix::zeros(1, ffn)),
                    ffn_w2: store.add_xavier(format!("{p}.ffn.w2"), ffn, d, rng),
                    ffn_b2: store.add(format!("{p}.ffn.b2"), Matrix::zeros(1, d)),
                }
            })
            .collect();
        Ok(EncoderParams { layers, heads })
    }

    fn weights<'a>(&self, store: &'a ParamStore, layer: &EncoderLayer) -> AttentionWeights<'a> {
        AttentionWeights {
            w_q: store.value(layer.w_q),
            w_k: store.value(layer.w_k),
            w_v: store.value(layer.w_v),
            w_o: store.value(layer.w_o),
            heads: self.heads,
        }
    }
}

/// `x + MHA(LN1(x))`, then `y + FFN(LN2(y))`, repeated per layer. Shape is preserved.
pub fn transformer_encode(store: &ParamStore, params: &EncoderParams, x: &Matrix) -> Result<(Matrix, EncoderCache)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (n1, ln1) = layer_norm_cached(&cur, store.value(layer.ln1_gamma), store.value(layer.ln1_beta), LN_EPS)?;
        let (attn, attention) = multi_head_attention(&n1, &n1, params.weights(store, layer))?;
        let mut y = cur;
        y.add_assign(&attn);
        let (n2, ln2) = layer_norm_cached(&y, store.value(layer.ln2_gamma), store.value(layer.ln2_beta), LN_EPS)?;
        let mut hidden = mm(&n2, store.value(layer.ffn_w1));
        hidden.add_row_broadcast(store.value(layer.ffn_b1));
        let activated = hidden.map(gelu);
        let mut f = mm(&activated, store.value(layer.ffn_w2));
        f.add_row_broadcast(store.value(layer.ffn_b2));
        y.add_assign(&f);
        cur = y;
        caches.push(EncoderLayerCache {
            ln1,
            attention,
            ln2,
            n2,
            hidden,
            activated,
        });
    }
    Ok((cur, caches))
}

/// Returns the gradient with respect to the encoder input.
pub fn transformer_encode_backward(
    store: &ParamStore,
    params: &EncoderParams,
    cache: &EncoderCache,
    d_out: &Matrix,
    grads: &mut Gradients,
) -> Matrix {
    let mut d = d_out.clone();
    for (layer, c) in params.layers.iter().zip(cache).rev() {
        // feed-forward branch
        grads.accumulate(layer.ffn_b2, &d.sum_rows());
        acc_tn(grads.get_mut(layer.ffn_w2), &c.activated, &d);
        let d_act = mm_nt(&d, store.value(layer.ffn_w2));
        let mut d_hidden = d_act;
        for (g, &h) in d_hidden.as_mut_slice().iter_mut().zip(c.hidden.as_slice()) {
            *g *= gelu_grad(h);
        }
        grads.accumulate(layer.ffn_b1, &d_hidden.sum_rows());
        acc_tn(grads.get_mut(layer.ffn_w1), &c.n2, &d_hidden);
        let d_n2 = mm_nt(&d_hidden, store.value(layer.ffn_w1));
        let (d_y, dg2, db2) = layer_norm_backward(&c.ln2, store.value(layer.ln2_gamma), &d_n2);
        grads.accumulate(layer.ln2_gamma, &dg2);
        grads.accumulate(layer.ln2_beta, &db2);
        d.add_assign(&d_y);

        // attention branch
        let ids = [layer.w_q, layer.w_k, layer.w_v, layer.w_o];
        let (mut d_n1, d_kv) = mha_backward_with(&c.attention, params.weights(store, layer), &d, |slot, a, b| {
            acc_tn(grads.get_mut(ids[slot as usize]), a, b)
        });
        d_n1.add_assign(&d_kv);
        let (d_x, dg1, db1) = layer_norm_backward(&c.ln1, store.value(layer.ln1_gamma), &d_n1);
        grads.accumulate(layer.ln1_gamma, &dg1);
        grads.accumulate(layer.ln1_beta, &db1);
        d.add_assign(&d_x);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, seeded_rng};
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_projection_is_noop() {
        let raw = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let out = project_modality(&raw, &Matrix::identity(2), &Matrix::identity(3), &Matrix::zeros(1, 3)).unwrap();
        assert_eq!(out, raw);
    }

    #[test]
    fn eeg_vector_projects_to_token_grid() {
        let mut rng = seeded_rng(1);
        let mut store = ParamStore::new();
        let p = ModalityProjection::new(&mut store, "eeg", 6, 15, 6, 128, &mut rng);
        let features: Vec<f64> = (0..90).map(|i| i as f64 / 90.0).collect();
        let (t, _) = p.forward(&store, &features).unwrap();
        assert_eq!(t.tokens.shape(), (6, 128));
        assert!(t.tokens.is_finite());
        assert!(p.forward(&store, &features[..89]).is_err());
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = seeded_rng(2);
        let mix = random(4, 2, &mut rng);
        let proj = random(3, 8, &mut rng);
        let out = project_modality(&Matrix::zeros(2, 3), &mix, &proj, &Matrix::zeros(1, 8)).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    fn single_head_identity(store: &mut ParamStore, d: usize) -> CrossAttentionParams {
        let w_q = store.add("w_q", Matrix::identity(d));
        let w_k = store.add("w_k", Matrix::identity(d));
        let w_v = store.add("w_v", Matrix::identity(d));
        let w_mha = store.add("w_mha", Matrix::identity(d));
        let ln_gamma = store.add("g", Matrix::filled(1, d, 1.0));
        let ln_beta = store.add("b", Matrix::zeros(1, d));
        CrossAttentionParams {
            w_q,
            keys: vec![KeyValueParams { w_k, w_v }],
            w_mha,
            ln_gamma,
            ln_beta,
            heads: 1,
        }
    }

    #[test]
    fn saturated_attention_selects_one_key() {
        // Query 0 is parallel to key 1 only; logits scaled by 50 saturate the softmax.
        let d = 3;
        let mut store = ParamStore::new();
        let params = single_head_identity(&mut store, d);
        let query = Matrix::from_rows(&[[0.0, 50.0, 0.0], [0.0, 0.0, 50.0], [50.0, 0.0, 0.0]]);
        let kv = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let (out, cache) = cross_attend(&store, &params, 0, &query, &kv).unwrap();
        let ln = crate::numerics::layer_norm(&kv, &Matrix::filled(1, d, 1.0), &Matrix::zeros(1, d), LN_EPS).unwrap();
        // softmax([0, 50/√3, 0]) leaves ~e^-28.9 on the others
        for (row, key) in [(0, 1), (1, 2), (2, 0)] {
            for c in 0..d {
                let expected = kv.get(key, c) + ln.get(row, c);
                assert!((out.get(row, c) - expected).abs() < 1e-6, "row {row} col {c}");
            }
        }
        for p in &cache.attention.probs {
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_values_are_reproduced() {
        let d = 4;
        let mut store = ParamStore::new();
        let params = single_head_identity(&mut store, d);
        *store.value_mut(params.ln_gamma) = Matrix::zeros(1, d);
        let mut rng = seeded_rng(3);
        let query = random(3, d, &mut rng);
        let v = [0.5, -1.0, 2.0, 0.25];
        let kv = Matrix::from_rows(&[v, v, v]);
        let (out, _) = cross_attend(&store, &params, 0, &query, &kv).unwrap();
        for r in 0..3 {
            for c in 0..d {
                assert!((out.get(r, c) - v[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn key_permutation_only_moves_the_residual() {
        let d = 8;
        let mut rng = seeded_rng(4);
        let mut store = ParamStore::new();
        let params = CrossAttentionParams::new(&mut store, "capf", &["gsr".into()], d, 2, &mut rng).unwrap();
        let query = random(4, d, &mut rng);
        let kv = random(4, d, &mut rng);
        let perm = [2, 0, 3, 1];
        let kv_perm = Matrix::from_rows(&perm.iter().map(|&i| kv.row(i).to_vec()).collect::<Vec<_>>());
        let w = params.weights(&store, 0);
        let (a, _) = multi_head_attention(&query, &kv, w).unwrap();
        let (b, _) = multi_head_attention(&query, &kv_perm, w).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
        let (full, _) = cross_attend(&store, &params, 0, &query, &kv).unwrap();
        let (full_perm, _) = cross_attend(&store, &params, 0, &query, &kv_perm).unwrap();
        let gamma = store.value(params.ln_gamma);
        let beta = store.value(params.ln_beta);
        let ln = crate::numerics::layer_norm(&kv, gamma, beta, LN_EPS).unwrap();
        let ln_p = crate::numerics::layer_norm(&kv_perm, gamma, beta, LN_EPS).unwrap();
        let r1 = full.sub(&ln).unwrap();
        let r2 = full_perm.sub(&ln_p).unwrap();
        for (x, y) in r1.as_slice().iter().zip(r2.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = seeded_rng(5);
        let mut store = ParamStore::new();
        assert!(CrossAttentionParams::new(&mut store, "x", &[], 10, 4, &mut rng).is_err());
        let w = Matrix::identity(6);
        let x = Matrix::zeros(2, 6);
        let weights = AttentionWeights { w_q: &w, w_k: &w, w_v: &w, w_o: &w, heads: 4 };
        assert!(matches!(multi_head_attention(&x, &x, weights), Err(Error::Config(_))));
    }

    #[test]
    fn fuse_stacks_tokens() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[[7.0, 8.0, 9.0], [10.0, 11.0, 12.0]]);
        let f = fuse_physio(&[&a, &b]).unwrap();
        assert_eq!(f.row(0), a.row(0));
        assert_eq!(f.row(1), a.row(1));
        assert_eq!(f.row(2), b.row(0));
        assert_eq!(f.row(3), b.row(1));
        let same = fuse_physio(&[&a, &a]).unwrap();
        assert_eq!(same.row_block(0, 2), same.row_block(2, 2));
        for c in 1..=8 {
            let x = Matrix::zeros(c, 5);
            assert_eq!(fuse_physio(&[&x, &x]).unwrap().rows(), 2 * c);
        }
        assert!(fuse_physio(&[&a, &Matrix::zeros(2, 4)]).is_err());
    }

    #[test]
    fn zero_weight_encoder_is_identity() {
        let mut rng = seeded_rng(6);
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, "enc", 8, 4, 1, 2, &mut rng).unwrap();
        for p in store.iter_mut() {
            if !p.name.contains("gamma") {
                p.value.as_mut_slice().fill(0.0);
            }
        }
        let x = random(5, 8, &mut rng);
        let (y, _) = transformer_encode(&store, &enc, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn encoder_preserves_shape_and_is_deterministic() {
        for depth in 1..=3 {
            let mut rng = seeded_rng(7);
            let mut store = ParamStore::new();
            let enc = EncoderParams::new(&mut store, "enc", 8, 16, depth, 4, &mut rng).unwrap();
            let x = random(6, 8, &mut rng);
            let (a, _) = transformer_encode(&store, &enc, &x).unwrap();
            let (b, _) = transformer_encode(&store, &enc, &x).unwrap();
            assert_eq!(a.shape(), x.shape());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn per_head_scaling_keeps_logits_unit_scale() {
        // Q, K with unit-variance entries; logits divided by sqrt(d/h).
        let (d, heads) = (128, 4);
        let dh = d / heads;
        let mut stds = Vec::new();
        for seed in 0..100 {
            let mut rng = seeded_rng(seed);
            let q = random(8, dh, &mut rng);
            let k = random(8, dh, &mut rng);
            let logits = mm_nt(&q, &k).scale(1.0 / (dh as f64).sqrt());
            let n = logits.as_slice().len() as f64;
            let mean = logits.sum() / n;
            let var = logits.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            stds.push(var.sqrt());
        }
        assert!(stds.iter().all(|s| (0.5..=2.0).contains(s)), "{stds:?}");
    }

    fn weighted_sum(m: &Matrix, w: &Matrix) -> f64 {
        m.hadamard(w).unwrap().sum()
    }

    #[test]
    fn cross_attention_and_encoder_gradients() {
        let d = 8;
        let mut rng = seeded_rng(8);
        let mut store = ParamStore::new();
        let capf = CrossAttentionParams::new(&mut store, "capf", &["gsr".into(), "ppg".into()], d, 2, &mut rng).unwrap();
        let enc = EncoderParams::new(&mut store, "enc", d, 6, 2, 2, &mut rng).unwrap();
        let proj = ModalityProjection::new(&mut store, "eeg", 3, 5, 3, d, &mut rng);
        for p in store.iter_mut() {
            if p.name.contains("gamma") || p.name.contains("beta") || p.name.contains("bias") || p.name.contains(".b") {
                for v in p.value.as_mut_slice() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
        }
        let raw: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g_tokens = random(3, d, &mut rng);
        let p_tokens = random(3, d, &mut rng);
        let w = random(6, d, &mut rng);

        let loss = |s: &ParamStore| {
            let (q, _) = proj.forward(s, &raw).unwrap();
            let (a, _) = cross_attend(s, &capf, 0, &q.tokens, &g_tokens).unwrap();
            let (b, _) = cross_attend(s, &capf, 1, &q.tokens, &p_tokens).unwrap();
            let phy = fuse_physio(&[&a, &b]).unwrap();
            let (y, _) = transformer_encode(s, &enc, &phy).unwrap();
            weighted_sum(&y, &w)
        };

        let mut grads = Gradients::zeros_like(&store);
        let (q, pc) = proj.forward(&store, &raw).unwrap();
        let (a, ca) = cross_attend(&store, &capf, 0, &q.tokens, &g_tokens).unwrap();
        let (b, cb) = cross_attend(&store, &capf, 1, &q.tokens, &p_tokens).unwrap();
        let phy = fuse_physio(&[&a, &b]).unwrap();
        let (_, ce) = transformer_encode(&store, &enc, &phy).unwrap();
        let d_phy = transformer_encode_backward(&store, &enc, &ce, &w, &mut grads);
        let (dq1, _) = cross_attend_backward(&store, &capf, 0, &ca, &d_phy.row_block(0, 3), &mut grads);
        let (dq2, _) = cross_attend_backward(&store, &capf, 1, &cb, &d_phy.row_block(3, 3), &mut grads);
        let mut dq = dq1;
        dq.add_assign(&dq2);
        proj.backward(&store, &pc, &dq, &mut grads);
        store.set_grads(&grads);
        let report = grad_check(loss, &mut store, 1e-6).unwrap();
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }
}
