//! Finite-difference self-checks of the analytic gradients.
//!
//! The full objective contains stop-gradients, a nearest-code assignment and
//! hinge kinks, none of which central differences can see through. The
//! objective check therefore probes a surrogate that is smooth around the
//! base point and has, by construction, the gradient the training step uses:
//! SIDs, conflict sets and every stop-gradient operand are frozen at the
//! base point, and the base point is resampled until no ReLU unit or hinge
//! lies within `KINK_CLEARANCE` of its kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::collision::{build_view, BatchLayout, IndexPair};
use crate::data::TrainBatch;
use crate::error::{Error, Result};
use crate::losses::{hamr_loss, hinge_clearance, infonce_loss, total_loss, LossWeights, ObjectiveOptions};
use crate::model::{ModelDims, ModelState};
use crate::numerics::matrix::{dot, sq_dist};
use crate::numerics::{
    finite_diff_check, mlp_apply, mlp_grad, row_normalize, row_normalize_backward, GradCheckReport, Matrix, MlpParams,
    ProbeOptions,
};
use crate::rq::{rq_encode, rq_losses, Codebooks, SidMatrix};

/// Required distance from any ReLU or hinge kink at the base point.
pub const KINK_CLEARANCE: f64 = 1e-3;
/// Pass threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;

const MAX_ATTEMPTS: u64 = 200;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    /// Base points drawn before one cleared every kink.
    pub attempts: u64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= TOLERANCE
    }
}

fn normal_matrix(rows: usize, cols: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            sigma * v
        })
        .collect::<Vec<f64>>();
    Matrix::from_vec(rows, cols, data).expect("shape matches length")
}

/// Small problem used by the objective check: B = 4 pairs with a repeated
/// trigger, d_in = 16, d = 8, L = 2, K = 4.
pub struct TinyProblem {
    pub model: ModelState,
    pub batch: TrainBatch,
    pub weights: LossWeights,
}

impl TinyProblem {
    pub fn sample(rng: &mut ChaCha8Rng) -> Result<Self> {
        let dims = ModelDims {
            d_in: 16,
            d: 8,
            depth: 2,
            codebook_size: 4,
        };
        let mut model = ModelState::init(dims, rng)?;
        model.codebooks = Codebooks::new(vec![normal_matrix(4, 8, 0.5, rng), normal_matrix(4, 8, 0.2, rng)])?;
        let batch = TrainBatch {
            trigger_features: normal_matrix(4, 16, 1.0, rng),
            target_features: normal_matrix(4, 16, 1.0, rng),
            trigger_ids: vec![0, 1, 2, 0],
            target_ids: vec![3, 4, 5, 6],
        };
        // Margins above the typical distance keep both hinges active.
        let weights = LossWeights {
            lambda_cl: 0.5,
            lambda_full: 0.5,
            lambda_partial: 0.5,
            m_full: 1.6,
            m_partial: 1.3,
            beta: 0.25,
            tau: 0.2,
            eps: 1e-8,
            radius: 1,
        };
        Ok(Self { model, batch, weights })
    }
}

/// Operands frozen at the base point.
struct Anchor {
    sids: SidMatrix,
    /// `ẑ − z`, so the decoder sees `z(θ) + offset` with identity routing.
    offset: Matrix,
    /// Incoming residual per layer, detached.
    residuals: Vec<Matrix>,
    /// Selected codewords per layer, detached.
    q_layers: Vec<Matrix>,
    omega_full: Vec<IndexPair>,
    omega_partial: Vec<IndexPair>,
    trigger_ids: Vec<usize>,
}

/// Objective with every stop-gradient operand frozen, written directly from
/// the definitions without the training code path.
fn frozen_objective(model: &ModelState, batch: &TrainBatch, a: &Anchor, w: &LossWeights) -> Result<f64> {
    let x = batch.trigger_features.vstack(&batch.target_features)?;
    let n = x.rows();
    let b = batch.len();
    let (z, _) = mlp_apply(&model.encoder, &x)?;

    let mut z_in = z.clone();
    z_in.add_assign(&a.offset)?;
    let (x_hat, _) = mlp_apply(&model.decoder, &z_in)?;
    let l_rec = x_hat.sub(&x)?.frobenius_sq() / n as f64;

    let mut l_rq = 0.0;
    for i in 0..n {
        let mut chain = z.row(i).to_vec();
        for l in 0..model.codebooks.depth() {
            let code = a.sids.row(i)[l] as usize;
            let c = model.codebooks.layer(l).row(code);
            l_rq += sq_dist(a.residuals[l].row(i), c);
            l_rq += w.beta * sq_dist(&chain, a.q_layers[l].row(i));
            for (v, q) in chain.iter_mut().zip(a.q_layers[l].row(i)) {
                *v -= q;
            }
        }
    }
    l_rq /= n as f64;

    let e: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = z.row(i);
            let norm = dot(r, r).sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();

    let mut l_cl = 0.0;
    for m in 0..b {
        let logits: Vec<(usize, f64)> = (0..b)
            .filter(|&k| k == m || a.trigger_ids[k] != a.trigger_ids[m])
            .map(|k| (k, dot(&e[m], &e[b + k]) / w.tau))
            .collect();
        let denom: f64 = logits.iter().map(|(_, s)| s.exp()).sum();
        let pos = logits.iter().find(|(k, _)| *k == m).map(|(_, s)| *s).unwrap();
        l_cl += denom.ln() - pos;
    }
    l_cl *= w.lambda_cl / b as f64;

    let hinge = |pairs: &[IndexPair], lambda: f64, margin: f64| -> f64 {
        let s: f64 = pairs
            .iter()
            .map(|&(i, j)| (margin - (1.0 - dot(&e[i], &e[j]))).max(0.0))
            .sum();
        lambda / (pairs.len() as f64 + w.eps) * s
    };
    let l_hamr = hinge(&a.omega_full, w.lambda_full, w.m_full) + hinge(&a.omega_partial, w.lambda_partial, w.m_partial);

    Ok(l_rec + l_rq + l_hamr + l_cl)
}

/// Checks every parameter gradient of the full objective on a fresh tiny
/// problem drawn from `seed`.
pub fn check_objective(seed: u64, probe: &ProbeOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=MAX_ATTEMPTS {
        let p = TinyProblem::sample(&mut rng)?;
        let obj = total_loss(&p.batch, &p.model, &p.weights, &ObjectiveOptions::default())?;
        let x = p.batch.trigger_features.vstack(&p.batch.target_features)?;
        let (_, enc_cache) = mlp_apply(&p.model.encoder, &x)?;
        let (_, dec_cache) = mlp_apply(&p.model.decoder, &obj.quantized.z_hat)?;
        let relu = enc_cache
            .min_relu_margin(&p.model.encoder)
            .min(dec_cache.min_relu_margin(&p.model.decoder));
        let view = &obj.view;
        let active = |pairs: &[IndexPair], m: f64| pairs.iter().any(|&(i, j)| view.distance[(i, j)] < m);
        if relu < KINK_CLEARANCE
            || hinge_clearance(view, &p.weights) < KINK_CLEARANCE
            || !active(&view.omega_full, p.weights.m_full)
            || !active(&view.omega_partial, p.weights.m_partial)
        {
            continue;
        }
        let mut offset = obj.quantized.z_hat.clone();
        offset.add_assign(&scaled(&obj.z, -1.0))?;
        let anchor = Anchor {
            sids: obj.quantized.sids.clone(),
            offset,
            residuals: obj.quantized.residuals[..p.model.codebooks.depth()].to_vec(),
            q_layers: obj.quantized.q_layers.clone(),
            omega_full: view.omega_full.clone(),
            omega_partial: view.omega_partial.clone(),
            trigger_ids: p.batch.trigger_ids.clone(),
        };
        let base = p.model.to_flat();
        let analytic = obj.grads.to_flat();
        let mut scratch = p.model.clone();
        let report = finite_diff_check(
            |theta| {
                scratch.set_flat(theta)?;
                frozen_objective(&scratch, &p.batch, &anchor, &p.weights)
            },
            &base,
            &analytic,
            probe,
        )?;
        return Ok(CheckResult {
            name: "objective",
            report,
            attempts: attempt,
        });
    }
    Err(Error::InvalidCheck(format!(
        "no kink-free base point with active hinges in {MAX_ATTEMPTS} draws"
    )))
}

fn scaled(m: &Matrix, s: f64) -> Matrix {
    let mut out = m.clone();
    out.scale(s);
    out
}

/// Contrastive term with respect to the raw (pre-normalization) embeddings.
pub fn check_infonce(seed: u64, probe: &ProbeOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d) = (6, 5);
    let raw = normal_matrix(2 * b, d, 1.0, &mut rng);
    let ids = vec![0, 1, 0, 2, 3, 1];
    let (tau, lambda) = (0.3, 0.7);
    let eval = |m: &Matrix| -> Result<(f64, Matrix)> {
        let e = row_normalize(m);
        let out = infonce_loss(&e.slice_rows(0, b), &e.slice_rows(b, 2 * b), &ids, None, tau, lambda)?;
        let g = out.grad_triggers.vstack(&out.grad_targets)?;
        Ok((out.loss, row_normalize_backward(m, &e, &g)))
    };
    let (_, g) = eval(&raw)?;
    let report = finite_diff_check(
        |t| eval(&Matrix::from_vec(2 * b, d, t.to_vec())?).map(|r| r.0),
        raw.data(),
        g.data(),
        probe,
    )?;
    Ok(CheckResult {
        name: "infonce",
        report,
        attempts: 1,
    })
}

/// Margin repulsion with respect to the raw embeddings, conflict sets frozen.
pub fn check_hamr(seed: u64, probe: &ProbeOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = LossWeights {
        m_full: 1.4,
        m_partial: 1.1,
        lambda_full: 0.6,
        lambda_partial: 0.4,
        ..LossWeights::default()
    };
    let sids = SidMatrix::from_rows(&[vec![0, 0], vec![0, 0], vec![0, 1], vec![1, 1], vec![0, 1], vec![1, 0]])?;
    let layout = BatchLayout::new(&[0, 1, 2], &[3, 4, 5])?;
    for attempt in 1..=MAX_ATTEMPTS {
        let raw = normal_matrix(6, 4, 1.0, &mut rng);
        let e = row_normalize(&raw);
        let view = build_view(&sids, &e, &layout, 1, true)?;
        if hinge_clearance(&view, &weights) < KINK_CLEARANCE {
            continue;
        }
        let out = hamr_loss(&e, &view, &weights)?;
        let g = row_normalize_backward(&raw, &e, &out.grad_normalized);
        let report = finite_diff_check(
            |t| {
                let e = row_normalize(&Matrix::from_vec(6, 4, t.to_vec())?);
                let mut v = view.clone();
                v.distance = crate::collision::cosine_distance_matrix(&e)?;
                Ok(hamr_loss(&e, &v, &weights)?.loss)
            },
            raw.data(),
            g.data(),
            probe,
        )?;
        return Ok(CheckResult {
            name: "hamr",
            report,
            attempts: attempt,
        });
    }
    Err(Error::InvalidCheck("no hinge-clear base point".into()))
}

/// Quantization loss with respect to the encoder output and the codebooks,
/// with SIDs and the detached operands frozen.
pub fn check_rq(seed: u64, probe: &ProbeOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k, depth, beta) = (5, 3, 4, 3, 0.4);
    let z = normal_matrix(n, d, 1.0, &mut rng);
    let books = Codebooks::new((0..depth).map(|_| normal_matrix(k, d, 0.6, &mut rng)).collect())?;
    let q = rq_encode(&books, &z)?;
    let out = rq_losses(&q, beta, k)?;
    let mut params = z.data().to_vec();
    let mut analytic = out.grad_z.data().to_vec();
    for l in 0..depth {
        params.extend_from_slice(books.layer(l).data());
        analytic.extend_from_slice(out.grad_codebooks[l].data());
    }
    let report = finite_diff_check(
        |t| {
            let zt = Matrix::from_vec(n, d, t[..n * d].to_vec())?;
            let mut total = 0.0;
            for i in 0..n {
                let mut chain = zt.row(i).to_vec();
                for l in 0..depth {
                    let off = n * d + l * k * d;
                    let s = q.sids.row(i)[l] as usize;
                    let c = &t[off + s * d..off + (s + 1) * d];
                    total += sq_dist(q.residuals[l].row(i), c);
                    total += beta * sq_dist(&chain, q.q_layers[l].row(i));
                    for (v, qv) in chain.iter_mut().zip(q.q_layers[l].row(i)) {
                        *v -= qv;
                    }
                }
            }
            Ok(total / n as f64)
        },
        &params,
        &analytic,
        probe,
    )?;
    Ok(CheckResult {
        name: "rq",
        report,
        attempts: 1,
    })
}

/// Encoder-shaped MLP with a random linear read-out.
pub fn check_mlp(seed: u64, probe: &ProbeOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=MAX_ATTEMPTS {
        let params = MlpParams::init(&[6, 10, 4], &mut rng)?;
        let x = normal_matrix(7, 6, 1.0, &mut rng);
        let w = normal_matrix(7, 4, 1.0, &mut rng);
        let (_, cache) = mlp_apply(&params, &x)?;
        if cache.min_relu_margin(&params) < KINK_CLEARANCE {
            continue;
        }
        let (g, _) = mlp_grad(&params, &cache, &w)?;
        let base: Vec<f64> = params.tensors().concat();
        let analytic: Vec<f64> = g.tensors().concat();
        let mut scratch = params.clone();
        let report = finite_diff_check(
            |t| {
                let mut off = 0;
                for dst in scratch.tensors_mut() {
                    let len = dst.len();
                    dst.copy_from_slice(&t[off..off + len]);
                    off += len;
                }
                let (y, _) = mlp_apply(&scratch, &x)?;
                Ok(dot(y.data(), w.data()))
            },
            &base,
            &analytic,
            probe,
        )?;
        return Ok(CheckResult {
            name: "mlp",
            report,
            attempts: attempt,
        });
    }
    Err(Error::InvalidCheck("no ReLU-clear base point".into()))
}

/// Runs every check; the objective check comes first.
pub fn run_all(seed: u64, probe: &ProbeOptions) -> Result<Vec<CheckResult>> {
    let mut sub = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = || sub.random::<u64>();
    Ok(vec![
        check_objective(seeds(), probe)?,
        check_rq(seeds(), probe)?,
        check_infonce(seeds(), probe)?,
        check_hamr(seeds(), probe)?,
        check_mlp(seeds(), probe)?,
    ])
}
