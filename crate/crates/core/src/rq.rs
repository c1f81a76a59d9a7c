//! L-layer residual vector quantizer.
//!
//! Each layer picks the codeword nearest to the residual left by the layers
//! before it. The quantized vector is the sum of the picked codewords and the
//! semantic ID is the list of picked indices.
//!
//! Gradient conventions used throughout:
//! - the codeword-side loss term moves only the picked codewords;
//! - the commitment term moves only the encoder output, with every codeword
//!   in the residual chain held constant;
//! - the reconstruction gradient reaches the encoder straight through the
//!   quantizer ([`ste_route`]).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::matrix::sq_dist;
use crate::numerics::Matrix;

/// `L` codebooks of `K` codewords each, all of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    layers: Vec<Matrix>,
}

impl Codebooks {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Config("at least one codebook layer is required".into()))?;
        let (k, d) = first.shape();
        if k == 0 || d == 0 {
            return Err(Error::Config(format!("codebook layer is {k}x{d}")));
        }
        for (l, m) in layers.iter().enumerate() {
            if m.shape() != (k, d) {
                return Err(Error::Shape(format!(
                    "codebook layer {l} is {}x{}, layer 0 is {k}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("codebook layer {l}")));
            }
        }
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn size(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Matrix {
        &mut self.layers[l]
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().map(Matrix::data_mut).collect()
    }
}

/// Row-major `n × depth` table of code indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SidMatrix {
    depth: usize,
    codes: Vec<u32>,
}

impl SidMatrix {
    pub fn new(depth: usize, codes: Vec<u32>) -> Result<Self> {
        if depth == 0 || !codes.len().is_multiple_of(depth) {
            return Err(Error::Data(format!(
                "{} codes do not form rows of length {depth}",
                codes.len()
            )));
        }
        Ok(Self { depth, codes })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let depth = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != depth) {
            return Err(Error::Data(format!("SID {i} has length {}, expected {depth}", r.len())));
        }
        Self::new(depth, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.codes[i * self.depth..(i + 1) * self.depth]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.codes.chunks_exact(self.depth)
    }

    pub fn gather(&self, idx: &[usize]) -> SidMatrix {
        let codes = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        SidMatrix {
            depth: self.depth,
            codes,
        }
    }
}

/// Everything produced by one pass of [`rq_encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub sids: SidMatrix,
    /// Picked codeword per layer, each `B × d`.
    pub q_layers: Vec<Matrix>,
    /// `residuals[0] = z`, `residuals[l] = residuals[l-1] − q_layers[l-1]`.
    pub residuals: Vec<Matrix>,
    pub z_hat: Matrix,
}

impl QuantizeResult {
    pub fn input(&self) -> &Matrix {
        &self.residuals[0]
    }

    pub fn final_residual(&self) -> &Matrix {
        self.residuals.last().expect("residuals always hold z")
    }
}

/// Index of the codeword nearest (squared L2) to each residual row; ties go
/// to the smallest index.
pub fn assign_nearest(codebook: &Matrix, residuals: &Matrix) -> Result<Vec<u32>> {
    if codebook.rows() == 0 {
        return Err(Error::Contract("cannot assign against an empty codebook".into()));
    }
    if codebook.cols() != residuals.cols() {
        return Err(Error::Shape(format!(
            "codebook width {} vs residual width {}",
            codebook.cols(),
            residuals.cols()
        )));
    }
    Ok(residuals
        .row_iter()
        .map(|r| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, c) in codebook.row_iter().enumerate() {
                let d = sq_dist(r, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best as u32
        })
        .collect())
}

pub fn rq_encode(codebooks: &Codebooks, z: &Matrix) -> Result<QuantizeResult> {
    quantize(codebooks, z, None)
}

/// Runs the residual pipeline with the code indices given instead of
/// searched. Used to hold assignments fixed while probing gradients.
pub fn rq_encode_with_sids(codebooks: &Codebooks, z: &Matrix, sids: &SidMatrix) -> Result<QuantizeResult> {
    if sids.depth() != codebooks.depth() || sids.len() != z.rows() {
        return Err(Error::Shape(format!(
            "{} SIDs of depth {} for {} rows and {} layers",
            sids.len(),
            sids.depth(),
            z.rows(),
            codebooks.depth()
        )));
    }
    quantize(codebooks, z, Some(sids))
}

fn quantize(codebooks: &Codebooks, z: &Matrix, fixed: Option<&SidMatrix>) -> Result<QuantizeResult> {
    if z.cols() != codebooks.dim() {
        return Err(Error::Shape(format!(
            "embedding width {} vs codebook width {}",
            z.cols(),
            codebooks.dim()
        )));
    }
    let (b, d) = z.shape();
    let depth = codebooks.depth();
    let k = codebooks.size() as u32;
    let mut codes = vec![0u32; b * depth];
    let mut q_layers = Vec::with_capacity(depth);
    let mut residuals = Vec::with_capacity(depth + 1);
    let mut z_hat = Matrix::zeros(b, d);
    residuals.push(z.clone());
    for l in 0..depth {
        let book = codebooks.layer(l);
        let prev = &residuals[l];
        let idx = match fixed {
            Some(s) => (0..b).map(|i| s.row(i)[l]).collect(),
            None => assign_nearest(book, prev)?,
        };
        let mut q = Matrix::zeros(b, d);
        let mut r = Matrix::zeros(b, d);
        for (i, &s) in idx.iter().enumerate() {
            if s >= k {
                return Err(Error::Data(format!("code {s} out of range for K = {k}")));
            }
            codes[i * depth + l] = s;
            let c = book.row(s as usize);
            q.row_mut(i).copy_from_slice(c);
            for (((rv, pv), cv), zh) in r
                .row_mut(i)
                .iter_mut()
                .zip(prev.row(i))
                .zip(c)
                .zip(z_hat.row_mut(i).iter_mut())
            {
                *rv = pv - cv;
                *zh += cv;
            }
        }
        q_layers.push(q);
        residuals.push(r);
    }
    Ok(QuantizeResult {
        sids: SidMatrix::new(depth, codes)?,
        q_layers,
        residuals,
        z_hat,
    })
}

#[derive(Debug, Clone)]
pub struct RqLossOutput {
    pub loss: f64,
    /// Commitment gradient on the encoder output.
    pub grad_z: Matrix,
    /// Codeword-side gradient, one `K × d` matrix per layer.
    pub grad_codebooks: Vec<Matrix>,
}

/// Quantization objective averaged over the batch:
/// `Σ_l ‖sg[r_{l−1}] − q_l‖² + β ‖r_{l−1} − sg[q_l]‖²`.
pub fn rq_losses(result: &QuantizeResult, beta: f64, codebook_size: usize) -> Result<RqLossOutput> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Config(format!("commitment weight must be >= 0, got {beta}")));
    }
    let (b, d) = result.input().shape();
    let depth = result.q_layers.len();
    let inv_b = if b == 0 { 0.0 } else { 1.0 / b as f64 };
    let mut grad_z = Matrix::zeros(b, d);
    let mut grad_codebooks = vec![Matrix::zeros(codebook_size, d); depth];
    let mut codeword_term = 0.0;
    let mut commit_term = 0.0;
    for l in 0..depth {
        let prev = &result.residuals[l];
        let q = &result.q_layers[l];
        let gc = &mut grad_codebooks[l];
        for i in 0..b {
            let s = result.sids.row(i)[l] as usize;
            let sq = sq_dist(prev.row(i), q.row(i));
            codeword_term += sq;
            commit_term += sq;
            let gz = grad_z.row_mut(i);
            for (j, (&rv, &qv)) in prev.row(i).iter().zip(q.row(i)).enumerate() {
                let diff = rv - qv;
                gc[(s, j)] -= 2.0 * diff * inv_b;
                gz[j] += 2.0 * beta * diff * inv_b;
            }
        }
    }
    let loss = (codeword_term + beta * commit_term) * inv_b;
    Ok(RqLossOutput {
        loss,
        grad_z,
        grad_codebooks,
    })
}

/// Straight-through routing: the gradient on the quantized vector is passed
/// to the encoder output unchanged.
pub fn ste_route(d_z_hat: &Matrix) -> Matrix {
    d_z_hat.clone()
}

/// Per-layer k-means (k-means++ seeding, Lloyd refinement) on the residuals
/// of the warmup embeddings.
pub fn init_codebooks(z_warmup: &Matrix, k: usize, depth: usize, iters: usize, seed: u64) -> Result<Codebooks> {
    let n = z_warmup.rows();
    if k == 0 || depth == 0 {
        return Err(Error::Config(format!("need K >= 1 and L >= 1, got K={k} L={depth}")));
    }
    if n < k {
        return Err(Error::Data(format!(
            "insufficient warmup: {n} embeddings for {k} codewords"
        )));
    }
    if !z_warmup.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("warmup embeddings for codebook init".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = z_warmup.clone();
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let centers = kmeans(&residual, k, iters, &mut rng)?;
        let idx = assign_nearest(&centers, &residual)?;
        for (i, &s) in idx.iter().enumerate() {
            let c = centers.row(s as usize).to_vec();
            for (rv, cv) in residual.row_mut(i).iter_mut().zip(&c) {
                *rv -= cv;
            }
        }
        layers.push(centers);
    }
    Codebooks::new(layers)
}

fn kmeans<R: Rng>(points: &Matrix, k: usize, iters: usize, rng: &mut R) -> Result<Matrix> {
    let mut centers = kmeans_plus_plus(points, k, rng);
    let d = points.cols();
    for _ in 0..iters {
        let idx = assign_nearest(&centers, points)?;
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &s) in idx.iter().enumerate() {
            counts[s as usize] += 1;
            for (a, v) in sums.row_mut(s as usize).iter_mut().zip(points.row(i)) {
                *a += v;
            }
        }
        let mut moved = false;
        for c in 0..k {
            // empty clusters keep their previous center
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (cv, sv) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                let nv = sv * inv;
                moved |= nv != *cv;
                *cv = nv;
            }
        }
        if !moved {
            break;
        }
    }
    Ok(centers)
}

fn kmeans_plus_plus<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    let mut centers = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut nearest: Vec<f64> = points.row_iter().map(|p| sq_dist(p, points.row(first))).collect();
    for c in 1..k {
        let pick = if let Some(far) = nearest.iter().position(|d| d.is_infinite()) {
            // squared distance overflowed; take that point as the farthest
            far
        } else {
            match WeightedIndex::new(&nearest) {
                Ok(w) => w.sample(rng),
                // every point already coincides with a center
                Err(_) => rng.random_range(0..n),
            }
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.row_iter().enumerate() {
            let dist = sq_dist(p, centers.row(c));
            if dist < nearest[i] {
                nearest[i] = dist;
            }
        }
    }
    centers
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationStats {
    /// `histograms[l][k]` = number of rows using code `k` at layer `l`.
    pub histograms: Vec<Vec<u64>>,
    pub perplexity: Vec<f64>,
    pub dead_codes: Vec<usize>,
}

/// Code usage per layer.
pub fn utilization(sids: &SidMatrix, codebook_size: usize) -> Result<UtilizationStats> {
    let depth = sids.depth();
    let mut histograms = vec![vec![0u64; codebook_size]; depth];
    for (i, row) in sids.rows().enumerate() {
        for (l, &s) in row.iter().enumerate() {
            let slot = histograms[l].get_mut(s as usize).ok_or_else(|| {
                Error::Data(format!(
                    "row {i} layer {l}: code {s} out of range for K = {codebook_size}"
                ))
            })?;
            *slot += 1;
        }
    }
    let total = sids.len() as f64;
    let perplexity = histograms
        .iter()
        .map(|h| {
            if total == 0.0 {
                return 1.0;
            }
            let ent: f64 = h
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total;
                    -p * p.ln()
                })
                .sum();
            ent.exp()
        })
        .collect();
    let dead_codes = histograms
        .iter()
        .map(|h| h.iter().filter(|&&c| c == 0).count())
        .collect();
    Ok(UtilizationStats {
        histograms,
        perplexity,
        dead_codes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, ProbeOptions};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_books(depth: usize, k: usize, d: usize, rng: &mut ChaCha8Rng) -> Codebooks {
        Codebooks::new((0..depth).map(|_| random(k, d, rng)).collect()).unwrap()
    }

    #[test]
    fn nearest_by_inspection_and_tie() {
        let cb = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let r = Matrix::from_rows(&[vec![0.9, 0.9], vec![0.5, 0.5]]).unwrap();
        assert_eq!(assign_nearest(&cb, &r).unwrap(), vec![1, 0]);
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cb = random(8, 4, &mut rng);
        let r = random(16, 4, &mut rng);
        let got = assign_nearest(&cb, &r).unwrap();
        for i in 0..16 {
            let dists: Vec<f64> = (0..8)
                .map(|k| (0..4).map(|j| (r[(i, j)] - cb[(k, j)]).powi(2)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let want = dists.iter().position(|&x| x == min).unwrap();
            assert_eq!(got[i] as usize, want);
        }
    }

    #[test]
    fn empty_codebook_is_contract_error() {
        let cb = Matrix::zeros(0, 2);
        assert!(matches!(
            assign_nearest(&cb, &Matrix::zeros(1, 2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn forced_single_code_path() {
        let cbs = Codebooks::new(vec![
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
        ])
        .unwrap();
        let z = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let res = rq_encode(&cbs, &z).unwrap();
        assert_eq!(res.sids.row(0), &[0, 0]);
        assert_eq!(res.z_hat.data(), &[1.0, 1.0]);
        assert_eq!(res.final_residual().data(), &[0.0, 0.0]);
    }

    #[test]
    fn encode_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cbs = random_books(3, 8, 4, &mut rng);
        let z = random(10, 4, &mut rng);
        let res = rq_encode(&cbs, &z).unwrap();
        for i in 0..10 {
            let mut r: Vec<f64> = z.row(i).to_vec();
            let mut zh = vec![0.0; 4];
            for l in 0..3 {
                let mut best = (0, f64::INFINITY);
                for k in 0..8 {
                    let d: f64 = (0..4).map(|j| (r[j] - cbs.layer(l)[(k, j)]).powi(2)).sum();
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                assert_eq!(res.sids.row(i)[l] as usize, best.0);
                for j in 0..4 {
                    r[j] -= cbs.layer(l)[(best.0, j)];
                    zh[j] += cbs.layer(l)[(best.0, j)];
                }
            }
            assert_eq!(res.final_residual().row(i), r.as_slice());
            assert_eq!(res.z_hat.row(i), zh.as_slice());
            // r_L = z - z_hat up to rounding; subtraction does not telescope exactly
            for j in 0..4 {
                let want = z.row(i)[j] - zh[j];
                assert!((r[j] - want).abs() <= 1e-12 * (1.0 + z.row(i)[j].abs()));
            }
        }
    }

    #[test]
    fn perfect_quantization_has_zero_loss() {
        // every incoming residual equals its codeword: layer 1 takes z,
        // layer 2 takes the zero residual
        let cbs = Codebooks::new(vec![
            Matrix::from_rows(&[vec![0.5, 0.25], vec![2.0, 2.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.0, 0.0], vec![9.0, 9.0]]).unwrap(),
        ])
        .unwrap();
        let z = Matrix::from_rows(&[vec![0.5, 0.25], vec![2.0, 2.0]]).unwrap();
        let res = rq_encode(&cbs, &z).unwrap();
        let out = rq_losses(&res, 0.25, 2).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_z.data().iter().all(|v| *v == 0.0));
        assert!(out.grad_codebooks.iter().all(|g| g.data().iter().all(|v| *v == 0.0)));

        let off = Matrix::from_rows(&[vec![0.5, 0.3], vec![2.0, 2.0]]).unwrap();
        assert!(rq_losses(&rq_encode(&cbs, &off).unwrap(), 0.25, 2).unwrap().loss > 0.0);
    }

    #[test]
    fn beta_zero_isolates_codeword_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cbs = random_books(2, 4, 3, &mut rng);
        let z = random(6, 3, &mut rng);
        let res = rq_encode(&cbs, &z).unwrap();
        let out = rq_losses(&res, 0.0, 4).unwrap();
        let mut want = 0.0;
        for l in 0..2 {
            for i in 0..6 {
                want += sq_dist(res.residuals[l].row(i), res.q_layers[l].row(i));
            }
        }
        assert!((out.loss - want / 6.0).abs() < 1e-14);
        assert!(out.grad_z.data().iter().all(|v| *v == 0.0));
        assert!(matches!(rq_losses(&res, -0.1, 4), Err(Error::Config(_))));
    }

    #[test]
    fn rq_loss_gradients_match_frozen_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (depth, k, d, b, beta) = (3, 5, 4, 7, 0.25);
        let cbs = random_books(depth, k, d, &mut rng);
        let z = random(b, d, &mut rng);
        let res = rq_encode(&cbs, &z).unwrap();
        let out = rq_losses(&res, beta, k).unwrap();

        // direct formula
        let mut direct = 0.0;
        for l in 0..depth {
            for i in 0..b {
                let s = res.sids.row(i)[l] as usize;
                let c = cbs.layer(l).row(s);
                direct += (1.0 + beta) * sq_dist(res.residuals[l].row(i), c);
            }
        }
        assert!((out.loss - direct / b as f64).abs() < 1e-12);

        // stop-gradient operands frozen at the base point
        let r0 = res.residuals.clone();
        let q0 = res.q_layers.clone();
        let sids = res.sids.clone();
        let n_z = b * d;
        let value = |p: &[f64]| -> Result<f64> {
            let zp = &p[..n_z];
            let mut total = 0.0;
            for l in 0..depth {
                let book = &p[n_z + l * k * d..n_z + (l + 1) * k * d];
                for i in 0..b {
                    let s = sids.row(i)[l] as usize;
                    let c = &book[s * d..(s + 1) * d];
                    total += sq_dist(r0[l].row(i), c);
                    let mut commit = 0.0;
                    for j in 0..d {
                        let frozen: f64 = (0..l).map(|m| q0[m][(i, j)]).sum();
                        let r = zp[i * d + j] - frozen;
                        commit += (r - q0[l][(i, j)]).powi(2);
                    }
                    total += beta * commit;
                }
            }
            Ok(total / b as f64)
        };
        let mut params = z.data().to_vec();
        let mut grads = out.grad_z.data().to_vec();
        for l in 0..depth {
            params.extend_from_slice(cbs.layer(l).data());
            grads.extend_from_slice(out.grad_codebooks[l].data());
        }
        let r = finite_diff_check(value, &params, &grads, &ProbeOptions::default()).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn ste_is_identity() {
        let g = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(ste_route(&g), g);
        let z = Matrix::zeros(2, 2);
        assert_eq!(ste_route(&z), z);
    }

    #[test]
    fn kmeans_recovers_repeated_points() {
        let pts = [[1.0, 2.0], [-3.0, 0.5], [0.0, -1.0], [4.0, 4.0]];
        let mut rows = Vec::new();
        for rep in 0..5 {
            for (i, p) in pts.iter().enumerate() {
                if rep <= i {
                    rows.push(p.to_vec());
                }
            }
        }
        let z = Matrix::from_rows(&rows).unwrap();
        let cbs = init_codebooks(&z, 4, 2, 10, 3).unwrap();
        let mut found: Vec<Vec<f64>> = cbs.layer(0).row_iter().map(<[f64]>::to_vec).collect();
        found.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<Vec<f64>> = pts.iter().map(|p| p.to_vec()).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (f, w) in found.iter().zip(&want) {
            for (a, b) in f.iter().zip(w) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let res = rq_encode(&Codebooks::new(vec![cbs.layer(0).clone()]).unwrap(), &z).unwrap();
        assert!(res.final_residual().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn init_is_deterministic_and_checks_warmup() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random(40, 3, &mut rng);
        let a = init_codebooks(&z, 6, 3, 10, 99).unwrap();
        let b = init_codebooks(&z, 6, 3, 10, 99).unwrap();
        assert_eq!(a, b);
        assert!(matches!(init_codebooks(&z, 41, 1, 10, 0), Err(Error::Data(_))));
    }

    #[test]
    fn utilization_degenerate_and_uniform() {
        let one = SidMatrix::from_rows(&vec![vec![2, 2]; 10]).unwrap();
        let u = utilization(&one, 8).unwrap();
        assert_eq!(u.perplexity, vec![1.0, 1.0]);
        assert_eq!(u.dead_codes, vec![7, 7]);

        let uni = SidMatrix::from_rows(&(0..8).map(|k| vec![k]).collect::<Vec<_>>()).unwrap();
        let u = utilization(&uni, 8).unwrap();
        assert!((u.perplexity[0] - 8.0).abs() < 1e-12);
        assert_eq!(u.dead_codes, vec![0]);
        assert!(matches!(utilization(&uni, 4), Err(Error::Data(_))));
    }

    #[test]
    fn utilization_matches_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<u32>> = (0..200)
            .map(|_| (0..3).map(|_| rng.random_range(0..10)).collect())
            .collect();
        let sids = SidMatrix::from_rows(&rows).unwrap();
        let u = utilization(&sids, 10).unwrap();
        for l in 0..3 {
            for k in 0..10u32 {
                let c = rows.iter().filter(|r| r[l] == k).count() as u64;
                assert_eq!(u.histograms[l][k as usize], c);
            }
            assert_eq!(u.histograms[l].iter().sum::<u64>(), 200);
            assert!(u.perplexity[l] >= 1.0 && u.perplexity[l] <= 10.0);
        }
    }
}
