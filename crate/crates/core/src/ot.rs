//! Optimal-transport heterogeneity mining.
//!
//! Physiological and behavioral token sets are compared with a cosine-distance
//! cost, coupled by an entropic Kantorovich plan solved with log-domain
//! Sinkhorn iterations, and the plan is used to transport the physiological
//! tokens before both streams are encoded and concatenated.

use serde::{Deserialize, Serialize};

use crate::attention::{transformer_encode, transformer_encode_backward, EncoderCache, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::ops::{mm, mm_tn};
use crate::numerics::{cosine_rows, Gradients, Matrix, ParamStore};

/// Solver settings for [`sinkhorn`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.1,
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

/// Result of a Sinkhorn solve.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    /// The coupling `T`.
    pub plan: Matrix,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub cost: Matrix,
    /// `<T, Cost>_F`.
    pub wd: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final `max(|T·1 − u|∞, |Tᵀ·1 − v|∞)`.
    pub marginal_violation: f64,
    /// Marginal violation after each iteration.
    pub trace: Vec<f64>,
}

impl TransportPlan {
    /// `(iteration, violation)` rows for the diagnostics dump.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,violation\n");
        for (i, v) in self.trace.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, v));
        }
        s
    }
}

/// `Cost[i][j] = 1 − cos(x_phy_i, x_v_j)`, in `[0, 2]`.
pub fn cost_matrix(x_phy: &Matrix, x_v: &Matrix) -> Result<Matrix> {
    let sim = cosine_rows(x_phy, x_v)?;
    Ok(sim.matrix.map(|s| (1.0 - s).clamp(0.0, 2.0)))
}

/// Uniform marginal of length `n`.
pub fn uniform_marginal(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_marginal(name: &str, m: &[f64], len: usize) -> Result<()> {
    if m.len() != len {
        return Err(Error::Config(format!("marginal {name} has length {}, expected {len}", m.len())));
    }
    if m.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Config(format!("marginal {name} must be strictly positive")));
    }
    let s: f64 = m.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("marginal {name} sums to {s}, expected 1")));
    }
    Ok(())
}

/// Entropic optimal transport between marginals `u` (rows) and `v` (columns).
///
/// Dual potentials `f`, `g` are updated alternately in the log domain; the plan
/// is `T_ij = exp((f_i + g_j − C_ij) / ε)`. Iteration stops once the marginal
/// violation is at most `tol` or after `max_iter` rounds.
///
/// ```
/// use helo::numerics::Matrix;
/// use helo::ot::{sinkhorn, SinkhornConfig};
/// let cost = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
/// let cfg = SinkhornConfig { epsilon: 0.01, max_iter: 500, tol: 1e-9 };
/// let plan = sinkhorn(&cost, &[0.5, 0.5], &[0.5, 0.5], cfg).unwrap();
/// assert!((plan.plan.get(0, 0) - 0.5).abs() < 1e-6);
/// assert!(plan.wd <= 0.01);
/// ```
pub fn sinkhorn(cost: &Matrix, u: &[f64], v: &[f64], cfg: SinkhornConfig) -> Result<TransportPlan> {
    let SinkhornConfig { epsilon, max_iter, tol } = cfg;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!("sinkhorn epsilon must be positive, got {epsilon}")));
    }
    let (n, m) = cost.shape();
    check_marginal("u", u, n)?;
    check_marginal("v", v, m)?;
    if cost.as_slice().iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::Config("cost matrix must be finite and nonnegative".into()));
    }

    let log_u: Vec<f64> = u.iter().map(|x| x.ln()).collect();
    let log_v: Vec<f64> = v.iter().map(|x| x.ln()).collect();
    // Potentials are kept divided by epsilon.
    let scaled_cost = cost.scale(1.0 / epsilon);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut trace = Vec::new();
    let mut plan = Matrix::zeros(n, m);
    let mut iterations = 0;

    let mut lse = vec![0.0; n];
    loop {
        for (i, l) in lse.iter_mut().enumerate() {
            *l = log_sum_exp(g.iter().zip(scaled_cost.row(i)).map(|(gj, c)| gj - c));
        }
        if iterations > 0 {
            // Columns are exact after the g step, so only row sums can be off.
            let violation = (0..n).map(|i| ((f[i] + lse[i]).exp() - u[i]).abs()).fold(0.0, f64::max);
            if !violation.is_finite() {
                return Err(Error::Numerical(format!(
                    "sinkhorn produced a non-finite plan at epsilon = {epsilon}"
                )));
            }
            trace.push(violation);
            if violation <= tol {
                break;
            }
        }
        if iterations == max_iter {
            break;
        }
        for i in 0..n {
            f[i] = log_u[i] - lse[i];
        }
        for j in 0..m {
            g[j] = log_v[j] - log_sum_exp((0..n).map(|i| f[i] - scaled_cost.get(i, j)));
        }
        iterations += 1;
    }
    fill_plan(&mut plan, &f, &g, &scaled_cost);
    let violation = marginal_violation(&plan, u, v);
    if !plan.is_finite() {
        return Err(Error::Numerical(format!("sinkhorn produced a non-finite plan at epsilon = {epsilon}")));
    }
    let wd = plan
        .as_slice()
        .iter()
        .zip(cost.as_slice())
        .map(|(t, c)| t * c)
        .sum::<f64>()
        .max(0.0);
    Ok(TransportPlan {
        plan,
        u: u.to_vec(),
        v: v.to_vec(),
        cost: cost.clone(),
        wd,
        epsilon,
        iterations,
        converged: violation <= tol,
        marginal_violation: violation,
        trace,
    })
}

fn fill_plan(plan: &mut Matrix, f: &[f64], g: &[f64], scaled_cost: &Matrix) {
    let m = g.len();
    for (i, fi) in f.iter().enumerate() {
        let row = scaled_cost.row(i);
        let out = plan.row_mut(i);
        for j in 0..m {
            out[j] = (fi + g[j] - row[j]).exp();
        }
    }
}

/// `max(|T·1 − u|∞, |Tᵀ·1 − v|∞)`.
pub fn marginal_violation(plan: &Matrix, u: &[f64], v: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, ui) in u.iter().enumerate() {
        worst = worst.max((plan.row(i).iter().sum::<f64>() - ui).abs());
    }
    for (j, vj) in v.iter().enumerate() {
        let s: f64 = (0..plan.rows()).map(|i| plan.get(i, j)).sum();
        worst = worst.max((s - vj).abs());
    }
    worst
}

/// `scale · T · x_phy`: each output row mixes physiological tokens by one row of the plan.
pub fn transport_tokens(plan: &Matrix, x_phy: &Matrix, scale: f64) -> Result<Matrix> {
    if plan.cols() != x_phy.rows() {
        return Err(Error::dim("transport_tokens", plan.shape(), x_phy.shape()));
    }
    let mut out = mm(plan, x_phy);
    out.scale_in_place(scale);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct OthmCache {
    plan: Matrix,
    scale: f64,
    phy_rows: usize,
    enc_phy: EncoderCache,
    enc_v: EncoderCache,
}

/// `x_m = [Encode_phy(s·T·x_phy) ; Encode_v(x_v)]` stacked along tokens.
///
/// `s` is the token count when `rescale` is set (restoring unit row mass under
/// uniform marginals) and 1 otherwise. The plan is a constant for backprop.
pub fn othm_fuse(
    store: &ParamStore,
    x_phy: &Matrix,
    x_v: &Matrix,
    plan: &Matrix,
    enc_phy: &EncoderParams,
    enc_v: &EncoderParams,
    rescale: bool,
) -> Result<(Matrix, OthmCache)> {
    if x_phy.cols() != x_v.cols() {
        return Err(Error::dim("othm_fuse", x_phy.shape(), x_v.shape()));
    }
    if plan.shape() != (x_phy.rows(), x_v.rows()) || plan.rows() != plan.cols() {
        return Err(Error::dim("othm_fuse plan", plan.shape(), (x_phy.rows(), x_v.rows())));
    }
    let scale = if rescale { x_phy.rows() as f64 } else { 1.0 };
    let transported = transport_tokens(plan, x_phy, scale)?;
    let (top, c_phy) = transformer_encode(store, enc_phy, &transported)?;
    let (bottom, c_v) = transformer_encode(store, enc_v, x_v)?;
    let out = Matrix::vstack(&[&top, &bottom])?;
    Ok((
        out,
        OthmCache {
            plan: plan.clone(),
            scale,
            phy_rows: top.rows(),
            enc_phy: c_phy,
            enc_v: c_v,
        },
    ))
}

/// Returns `(d_x_phy, d_x_v)`.
pub fn othm_fuse_backward(
    store: &ParamStore,
    enc_phy: &EncoderParams,
    enc_v: &EncoderParams,
    cache: &OthmCache,
    d_out: &Matrix,
    grads: &mut Gradients,
) -> (Matrix, Matrix) {
    let d_top = d_out.row_block(0, cache.phy_rows);
    let d_bottom = d_out.row_block(cache.phy_rows, d_out.rows() - cache.phy_rows);
    let d_transported = transformer_encode_backward(store, enc_phy, &cache.enc_phy, &d_top, grads);
    let mut d_phy = mm_tn(&cache.plan, &d_transported);
    d_phy.scale_in_place(cache.scale);
    let d_v = transformer_encode_backward(store, enc_v, &cache.enc_v, &d_bottom, grads);
    (d_phy, d_v)
}
