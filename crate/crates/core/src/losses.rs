//! The four training objectives and their sum.
//!
//! * reconstruction: mean squared L2 error of the decoder output;
//! * quantization: codeword + commitment terms (see [`crate::rq::rq_losses`]);
//! * contrastive: InfoNCE between trigger and target towers with
//!   same-trigger false negatives masked out;
//! * repulsion: hinge on the cosine distance of colliding, valid pairs, with
//!   a larger margin for full collisions than for partial ones.
//!
//! Contrastive and repulsion gradients act on the normalized encoder output
//! only. Code assignments are constants within a step.

use crate::collision::{build_view, BatchLayout, CollisionView};
use crate::data::TrainBatch;
use crate::error::{Error, Result};
use crate::model::{ModelGrads, ModelState};
use crate::numerics::{mlp_apply, mlp_grad, row_normalize, row_normalize_backward, Matrix};
use crate::rq::{rq_encode, rq_losses, ste_route, QuantizeResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cl: f64,
    pub lambda_full: f64,
    pub lambda_partial: f64,
    pub m_full: f64,
    pub m_partial: f64,
    /// Commitment strength.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Added to the conflict-set sizes before dividing.
    pub eps: f64,
    /// Largest Hamming distance counted as a partial collision.
    pub radius: u32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cl: 0.1,
            lambda_full: 0.2,
            lambda_partial: 0.1,
            m_full: 0.8,
            m_partial: 0.5,
            beta: 0.25,
            tau: 0.1,
            eps: 1e-8,
            radius: 1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, depth: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lambda_cl", self.lambda_cl),
            ("lambda_full", self.lambda_full),
            ("lambda_partial", self.lambda_partial),
            ("beta", self.beta),
            ("m_partial", self.m_partial),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.m_full >= self.m_partial) || !self.m_full.is_finite() {
            return bad(format!(
                "need m_full >= m_partial, got {} < {}",
                self.m_full, self.m_partial
            ));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if self.radius < 1 || self.radius as usize > depth {
            return bad(format!("radius must lie in [1, {depth}], got {}", self.radius));
        }
        Ok(())
    }
}

/// `(1/B) Σ ‖x̂ − x‖²` and its gradient `2(x̂ − x)/B`.
pub fn reconstruction_loss(x_hat: &Matrix, x: &Matrix) -> Result<(f64, Matrix)> {
    let mut g = x_hat.sub(x)?;
    let b = x.rows();
    if b == 0 {
        return Ok((0.0, g));
    }
    let loss = g.frobenius_sq() / b as f64;
    g.scale(2.0 / b as f64);
    Ok((loss, g))
}

#[derive(Debug, Clone)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_triggers: Matrix,
    pub grad_targets: Matrix,
}

/// Masked InfoNCE over `S = E_t E_pᵀ / τ`. For row `m`, column `n ≠ m` is
/// dropped from the denominator when trigger `n` is the same item as trigger
/// `m` (and, if `target_ids` is given, when the targets coincide).
pub fn infonce_loss(
    e_t: &Matrix,
    e_p: &Matrix,
    trigger_ids: &[usize],
    target_ids: Option<&[usize]>,
    tau: f64,
    lambda_cl: f64,
) -> Result<InfoNceOutput> {
    if e_t.shape() != e_p.shape() || trigger_ids.len() != e_t.rows() {
        return Err(Error::Shape(format!(
            "towers {}x{} / {}x{} with {} trigger ids",
            e_t.rows(),
            e_t.cols(),
            e_p.rows(),
            e_p.cols(),
            trigger_ids.len()
        )));
    }
    if target_ids.is_some_and(|t| t.len() != e_t.rows()) {
        return Err(Error::Shape("target id count differs from batch size".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let b = e_t.rows();
    if b == 0 || lambda_cl == 0.0 {
        return Ok(InfoNceOutput {
            loss: 0.0,
            grad_triggers: Matrix::zeros(b, e_t.cols()),
            grad_targets: Matrix::zeros(b, e_t.cols()),
        });
    }
    let mut s = e_t.matmul_nt(e_p)?;
    s.scale(1.0 / tau);
    let scale = lambda_cl / b as f64;
    let mut total = 0.0;
    // dS[m][n] = scale · (softmax_mn − δ_mn) over unmasked n
    let mut ds = Matrix::zeros(b, b);
    for m in 0..b {
        let keep = |n: usize| n == m || (trigger_ids[n] != trigger_ids[m] && target_ids.is_none_or(|t| t[n] != t[m]));
        let row = s.row(m);
        let max = (0..b)
            .filter(|&n| keep(n))
            .map(|n| row[n])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..b).filter(|&n| keep(n)).map(|n| (row[n] - max).exp()).sum();
        let lse = max + denom.ln();
        total += lse - row[m];
        for n in (0..b).filter(|&n| keep(n)) {
            ds[(m, n)] = scale * (row[n] - lse).exp();
        }
        ds[(m, m)] -= scale;
    }
    // S = E_t E_pᵀ/τ
    let mut grad_triggers = ds.matmul(e_p)?;
    grad_triggers.scale(1.0 / tau);
    let mut grad_targets = ds.matmul_tn(e_t)?;
    grad_targets.scale(1.0 / tau);
    Ok(InfoNceOutput {
        loss: scale * total,
        grad_triggers,
        grad_targets,
    })
}

#[derive(Debug, Clone)]
pub struct HamrOutput {
    pub loss: f64,
    pub full_term: f64,
    pub partial_term: f64,
    /// Gradient on the unit-normalized embeddings.
    pub grad_normalized: Matrix,
}

/// Margin repulsion over the conflict sets of `view`. `normalized` must be
/// the embeddings `view.distance` was computed from. The hinge is treated
/// as inactive at `D = m`.
pub fn hamr_loss(normalized: &Matrix, view: &CollisionView, weights: &LossWeights) -> Result<HamrOutput> {
    let n = normalized.rows();
    if view.distance.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "distance matrix {}x{} for {n} embeddings",
            view.distance.rows(),
            view.distance.cols()
        )));
    }
    let mut grad = Matrix::zeros(n, normalized.cols());
    let mut term = |pairs: &[(usize, usize)], lambda: f64, margin: f64| -> f64 {
        let coef = lambda / (pairs.len() as f64 + weights.eps);
        let mut sum = 0.0;
        for &(i, j) in pairs {
            let d = view.distance[(i, j)];
            if d < margin {
                sum += margin - d;
                // ∂/∂e_i of −(1 − e_iᵀe_j) is e_j
                for k in 0..normalized.cols() {
                    let (ei, ej) = (normalized[(i, k)], normalized[(j, k)]);
                    grad[(i, k)] += coef * ej;
                    grad[(j, k)] += coef * ei;
                }
            }
        }
        coef * sum
    };
    let full_term = term(&view.omega_full, weights.lambda_full, weights.m_full);
    let partial_term = term(&view.omega_partial, weights.lambda_partial, weights.m_partial);
    Ok(HamrOutput {
        loss: full_term + partial_term,
        full_term,
        partial_term,
        grad_normalized: grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_rq: f64,
    pub l_cl: f64,
    pub l_hamr: f64,
    pub l_total: f64,
    pub hamr_full: f64,
    pub hamr_partial: f64,
}

/// Per-component gradient on the encoder output `z`.
#[derive(Debug, Clone)]
pub struct ComponentGrads {
    pub rec: Matrix,
    pub rq: Matrix,
    pub cl: Matrix,
    pub hamr: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectiveOptions {
    /// `false` replaces the valid-pair mask with all-pairs-but-self.
    pub use_cvpm: bool,
    /// Also mask contrastive negatives whose target item matches.
    pub mask_target_ids: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            use_cvpm: true,
            mask_target_ids: false,
        }
    }
}

/// Everything computed for one batch.
#[derive(Debug, Clone)]
pub struct Objective {
    pub breakdown: LossBreakdown,
    pub grads: ModelGrads,
    pub grad_z: ComponentGrads,
    pub layout: BatchLayout,
    pub z: Matrix,
    pub quantized: QuantizeResult,
    pub view: CollisionView,
}

pub fn total_loss(
    batch: &TrainBatch,
    model: &ModelState,
    weights: &LossWeights,
    opts: &ObjectiveOptions,
) -> Result<Objective> {
    let depth = model.codebooks.depth();
    weights.validate(depth)?;
    let b = batch.len();
    let x = batch.trigger_features.vstack(&batch.target_features)?;
    let layout = BatchLayout::new(&batch.trigger_ids, &batch.target_ids)?;

    let (z, enc_cache) = mlp_apply(&model.encoder, &x)?;
    let quantized = rq_encode(&model.codebooks, &z)?;
    let (x_hat, dec_cache) = mlp_apply(&model.decoder, &quantized.z_hat)?;

    let (l_rec, d_x_hat) = reconstruction_loss(&x_hat, &x)?;
    let (dec_grads, d_z_hat) = mlp_grad(&model.decoder, &dec_cache, &d_x_hat)?;
    let g_rec = ste_route(&d_z_hat);

    let rq = rq_losses(&quantized, weights.beta, model.codebooks.size())?;

    let e = row_normalize(&z);
    let view = build_view(&quantized.sids, &e, &layout, weights.radius, opts.use_cvpm)?;

    let cl = infonce_loss(
        &e.slice_rows(0, b),
        &e.slice_rows(b, 2 * b),
        &batch.trigger_ids,
        opts.mask_target_ids.then_some(batch.target_ids.as_slice()),
        weights.tau,
        weights.lambda_cl,
    )?;
    let hamr = hamr_loss(&e, &view, weights)?;

    let d_e_cl = cl.grad_triggers.vstack(&cl.grad_targets)?;
    let g_cl = row_normalize_backward(&z, &e, &d_e_cl);
    let g_hamr = row_normalize_backward(&z, &e, &hamr.grad_normalized);

    let mut d_z = g_rec.clone();
    d_z.add_assign(&rq.grad_z)?;
    d_z.add_assign(&g_cl)?;
    d_z.add_assign(&g_hamr)?;
    let (enc_grads, _) = mlp_grad(&model.encoder, &enc_cache, &d_z)?;

    let l_total = l_rec + rq.loss + hamr.loss + cl.loss;
    let breakdown = LossBreakdown {
        l_rec,
        l_rq: rq.loss,
        l_cl: cl.loss,
        l_hamr: hamr.loss,
        l_total,
        hamr_full: hamr.full_term,
        hamr_partial: hamr.partial_term,
    };
    if !l_total.is_finite() {
        return Err(Error::NonFinite(format!("loss components {breakdown:?}")));
    }
    Ok(Objective {
        breakdown,
        grads: ModelGrads {
            encoder: enc_grads,
            decoder: dec_grads,
            codebooks: rq.grad_codebooks,
        },
        grad_z: ComponentGrads {
            rec: g_rec,
            rq: rq.grad_z,
            cl: g_cl,
            hamr: g_hamr,
        },
        layout,
        z,
        quantized,
        view,
    })
}

/// Smallest `|D_ij − margin|` over the conflict sets; finite-difference
/// probes must stay clear of hinge kinks.
pub fn hinge_clearance(view: &CollisionView, weights: &LossWeights) -> f64 {
    let full = view
        .omega_full
        .iter()
        .map(|&(i, j)| (view.distance[(i, j)] - weights.m_full).abs());
    let partial = view
        .omega_partial
        .iter()
        .map(|&(i, j)| (view.distance[(i, j)] - weights.m_partial).abs());
    full.chain(partial).fold(f64::INFINITY, f64::min)
}
