//! Maps onto the orthogonal group, the soft-orthogonality penalty, and the
//! diagnostics used to measure how far a quantized matrix is from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    gram_residual, matmul, matmul_op, power_iteration_sigma_max, sample_uniform_orthogonal, singular_values,
    svd, Matrix, Op, RngState,
};
use crate::quantize::{quantize, QuantSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BjorckConfig {
    pub iterations: usize,
    /// Order of the series expansion; only the first order is implemented.
    pub order: u32,
    /// Power iterations used to estimate σ_max for the initial scaling.
    pub power_iters: usize,
    pub power_seed: u64,
    /// Residual `‖AAᵀ − I‖_F` accepted by [`bjorck`].
    pub tolerance: f64,
}

impl Default for BjorckConfig {
    fn default() -> Self {
        BjorckConfig {
            iterations: 15,
            order: 1,
            power_iters: 100,
            power_seed: 0,
            tolerance: 1e-6,
        }
    }
}

impl BjorckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("Björck needs at least one iteration"));
        }
        if self.order != 1 {
            return Err(Error::Unsupported(format!("Björck order {} (only order 1)", self.order)));
        }
        Ok(())
    }
}

/// Forward pass of the unrolled Björck iteration, kept for backpropagation.
///
/// `A₀ = W / σ_max(W)` with σ_max from power iteration (treated as a
/// constant), then `A_{j+1} = 3/2·A_j − 1/2·A_j A_jᵀ A_j`.
#[derive(Clone, Debug)]
pub struct BjorckTape {
    scale: f64,
    iterates: Vec<Matrix>,
}

impl BjorckTape {
    pub fn forward(w: &Matrix, cfg: &BjorckConfig) -> Result<Self> {
        cfg.validate()?;
        if !w.is_square() {
            return Err(Error::NotSquare {
                rows: w.rows(),
                cols: w.cols(),
            });
        }
        let mut rng = RngState::new(cfg.power_seed);
        let sigma = power_iteration_sigma_max(w, cfg.power_iters, &mut rng);
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Singular { index: 0, value: sigma });
        }
        let mut iterates = Vec::with_capacity(cfg.iterations + 1);
        iterates.push(w.scale(1.0 / sigma));
        for _ in 0..cfg.iterations {
            let a = iterates.last().expect("non-empty");
            let ata = matmul_op(a, Op::T, a, Op::N)?;
            let mut next = a.scale(1.5);
            next.axpy(-0.5, &matmul(a, &ata)?)?;
            iterates.push(next);
        }
        Ok(BjorckTape {
            scale: sigma,
            iterates,
        })
    }

    pub fn output(&self) -> &Matrix {
        self.iterates.last().expect("non-empty")
    }

    pub fn into_output(mut self) -> Matrix {
        self.iterates.pop().expect("non-empty")
    }

    /// The σ_max estimate used for the initial scaling.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn residual(&self) -> f64 {
        gram_residual(self.output()).expect("square")
    }

    /// Vector-Jacobian product: maps `∂L/∂out` to `∂L/∂W`.
    pub fn backward(&self, grad_out: &Matrix) -> Matrix {
        let mut g = grad_out.clone();
        for a in self.iterates[..self.iterates.len() - 1].iter().rev() {
            // out = 1.5 A − 0.5 A Aᵀ A
            // ∂/∂A = 1.5 G − 0.5 (G AᵀA + A Gᵀ A + A Aᵀ G)
            let ata = matmul_op(a, Op::T, a, Op::N).expect("square");
            let aat = matmul_op(a, Op::N, a, Op::T).expect("square");
            let g_ata = matmul(&g, &ata).expect("square");
            let a_gt = matmul_op(a, Op::N, &g, Op::T).expect("square");
            let a_gt_a = matmul(&a_gt, a).expect("square");
            let aat_g = matmul(&aat, &g).expect("square");
            let mut next = g.scale(1.5);
            next.axpy(-0.5, &g_ata).expect("square");
            next.axpy(-0.5, &a_gt_a).expect("square");
            next.axpy(-0.5, &aat_g).expect("square");
            g = next;
        }
        g.scale(1.0 / self.scale)
    }
}

/// Björck orthogonalization; fails when the result is not orthogonal to
/// within `cfg.tolerance` (e.g. rank-deficient input).
pub fn bjorck(w: &Matrix, cfg: &BjorckConfig) -> Result<Matrix> {
    let tape = BjorckTape::forward(w, cfg)?;
    let residual = tape.residual();
    if !(residual <= cfg.tolerance) {
        return Err(Error::BjorckResidual {
            residual,
            tolerance: cfg.tolerance,
        });
    }
    Ok(tape.into_output())
}

/// Nearest orthogonal matrix in Frobenius norm, `U Vᵀ` from the SVD.
pub fn projunn_project(w: &Matrix) -> Result<Matrix> {
    if !w.is_square() {
        return Err(Error::NotSquare {
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    let dec = svd(w)?;
    let s_max = dec.s.first().copied().unwrap_or(0.0);
    let threshold = s_max * w.rows() as f64 * f64::EPSILON;
    if let Some((index, &value)) = dec.s.iter().enumerate().find(|(_, &s)| s <= threshold) {
        return Err(Error::Singular { index, value });
    }
    Ok(dec.polar_factor())
}

/// `R(W) = ‖WWᵀ − I‖_F²` and its gradient `4 (WWᵀ − I) W`.
pub fn ortho_penalty(w: &Matrix) -> Result<(f64, Matrix)> {
    if !w.is_square() {
        return Err(Error::NotSquare {
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    let mut gram = matmul_op(w, Op::N, w, Op::T)?;
    for i in 0..w.rows() {
        gram[(i, i)] -= 1.0;
    }
    let value = gram.as_slice().iter().map(|x| x * x).sum();
    let grad = matmul(&gram, w)?.scale(4.0);
    Ok((value, grad))
}

/// `2·n/2^{k−1} + (n/2^{k−1})²`, the proven bound on `‖W_qW_qᵀ − I‖_F`
/// for an orthogonal `W` of size `n`.
pub fn residual_bound(n: usize, bits: u32) -> f64 {
    let r = n as f64 / (1u64 << (bits - 1)) as f64;
    2.0 * r + r * r
}

/// `(1 − n/2^{k−1}, 1 + n/2^{k−1})`, the proven bracket on the singular
/// values of `q_k(W)`.
pub fn sigma_bounds(n: usize, bits: u32) -> (f64, f64) {
    let r = n as f64 / (1u64 << (bits - 1)) as f64;
    (1.0 - r, 1.0 + r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoDiagnostics {
    /// `‖W_qW_qᵀ − I‖_F`
    pub residual: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// `σ_min / σ_max`
    pub sv_ratio: f64,
    pub bound_residual_rhs: f64,
    pub bound_sigma_lo: f64,
    pub bound_sigma_hi: f64,
}

impl OrthoDiagnostics {
    /// Whether the proven bounds hold, allowing `slack` for rounding.
    pub fn within_bounds(&self, slack: f64) -> bool {
        self.residual <= self.bound_residual_rhs + slack
            && self.sigma_min >= self.bound_sigma_lo - slack
            && self.sigma_max <= self.bound_sigma_hi + slack
    }
}

pub fn diagnose(w_q: &Matrix, bits: u32) -> Result<OrthoDiagnostics> {
    let residual = gram_residual(w_q)?;
    let s = singular_values(w_q)?;
    let sigma_max = s.first().copied().unwrap_or(0.0);
    let sigma_min = s.last().copied().unwrap_or(0.0);
    let sv_ratio = if sigma_max > 0.0 { sigma_min / sigma_max } else { 0.0 };
    let n = w_q.rows();
    let (lo, hi) = sigma_bounds(n, bits);
    Ok(OrthoDiagnostics {
        residual,
        sigma_min,
        sigma_max,
        sv_ratio,
        bound_residual_rhs: residual_bound(n, bits),
        bound_sigma_lo: lo,
        bound_sigma_hi: hi,
    })
}

/// `A^p` by repeated squaring.
pub fn matrix_power(a: &Matrix, p: u32) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let mut result = Matrix::identity(a.rows());
    let mut base = a.clone();
    let mut p = p;
    while p > 0 {
        if p & 1 == 1 {
            result = matmul(&result, &base)?;
        }
        p >>= 1;
        if p > 0 {
            base = matmul(&base, &base)?;
        }
    }
    Ok(result)
}

/// `‖W^T − q_k(W)^T‖_F / ‖W^T‖_F` for each power `T`.
pub fn power_distance_curve(w: &Matrix, bits: u32, powers: &[u32]) -> Result<Vec<f64>> {
    let residual = gram_residual(w)?;
    if residual > 1e-8 {
        return Err(Error::invalid(format!(
            "power distance needs an orthogonal matrix (residual {residual:e})"
        )));
    }
    let q = quantize(w, &QuantSpec::new(bits)?);
    powers
        .iter()
        .map(|&t| {
            let wt = matrix_power(w, t)?;
            let qt = matrix_power(&q, t)?;
            let d = wt.sub(&qt)?.frobenius_norm() / wt.frobenius_norm();
            if d.is_finite() {
                Ok(d)
            } else {
                Err(Error::NonFinite("matrix power"))
            }
        })
        .collect()
}

/// One quantized Haar sample of an orthogonality study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudyRecord {
    pub n: usize,
    pub bits: u32,
    /// Seed that regenerates the orthogonal sample.
    pub seed: u64,
    pub diagnostics: OrthoDiagnostics,
}

/// Seed of sample `index` in a study with master seed `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

/// Diagnostics of `q_k(W)` for `samples` Haar-orthogonal `W` and every `k`.
/// The same orthogonal samples are reused across bitwidths.
pub fn orthogonality_study(n: usize, bits: &[u32], samples: usize, seed: u64) -> Result<Vec<StudyRecord>> {
    if n == 0 {
        return Err(Error::invalid("study needs n ≥ 1"));
    }
    let specs = bits.iter().map(|&k| QuantSpec::new(k)).collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(bits.len() * samples);
    for s in 0..samples {
        let sseed = sample_seed(seed, s);
        let w = sample_uniform_orthogonal(n, &mut RngState::new(sseed));
        for spec in &specs {
            let wq = quantize(&w, spec);
            records.push(StudyRecord {
                n,
                bits: spec.bits(),
                seed: sseed,
                diagnostics: diagnose(&wq, spec.bits())?,
            });
        }
    }
    Ok(records)
}

/// `‖W^T − q_k(W)^T‖_F / ‖W^T‖_F` for one sample, bitwidth and power.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerRecord {
    pub n: usize,
    pub bits: u32,
    pub seed: u64,
    pub power: u32,
    pub distance: f64,
}

/// Powers of `a` at the increasing exponents `powers`, each reached from the
/// previous one.
fn power_ladder(a: &Matrix, powers: &[u32]) -> Result<Vec<Matrix>> {
    let mut out: Vec<Matrix> = Vec::with_capacity(powers.len());
    let mut last = 0;
    for &p in powers {
        let step = matrix_power(a, p - last)?;
        out.push(match out.last() {
            Some(prev) => matmul(prev, &step)?,
            None => step,
        });
        last = p;
    }
    Ok(out)
}

/// Power distances over `samples` Haar-orthogonal matrices (seeds as in
/// [`orthogonality_study`]) for every bitwidth and power.
pub fn power_distance_study(n: usize, bits: &[u32], powers: &[u32], samples: usize, seed: u64) -> Result<Vec<PowerRecord>> {
    if n == 0 {
        return Err(Error::invalid("study needs n ≥ 1"));
    }
    let mut sorted = powers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let specs = bits.iter().map(|&k| QuantSpec::new(k)).collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(samples * bits.len() * sorted.len());
    for s in 0..samples {
        let sseed = sample_seed(seed, s);
        let w = sample_uniform_orthogonal(n, &mut RngState::new(sseed));
        let wp = power_ladder(&w, &sorted)?;
        for spec in &specs {
            let qp = power_ladder(&quantize(&w, spec), &sorted)?;
            for ((&power, a), b) in sorted.iter().zip(&wp).zip(&qp) {
                let distance = a.sub(b)?.frobenius_norm() / a.frobenius_norm();
                if !distance.is_finite() {
                    return Err(Error::NonFinite("matrix power"));
                }
                records.push(PowerRecord {
                    n,
                    bits: spec.bits(),
                    seed: sseed,
                    power,
                    distance,
                });
            }
        }
    }
    Ok(records)
}

/// Per-bitwidth samples of `σ_min(q_k(W)) / σ_max(q_k(W))`.
pub fn sv_ratio_study(n: usize, bits: &[u32], samples: usize, seed: u64) -> Result<Vec<(u32, Vec<f64>)>> {
    if samples == 0 {
        return Err(Error::invalid("study needs at least one sample"));
    }
    let records = orthogonality_study(n, bits, samples, seed)?;
    Ok(bits
        .iter()
        .map(|&k| {
            let ratios = records
                .iter()
                .filter(|r| r.bits == k)
                .map(|r| r.diagnostics.sv_ratio)
                .collect();
            (k, ratios)
        })
        .collect())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(n: usize, rng: &mut RngState) -> Matrix {
        Matrix::from_fn(n, n, |_, _| rng.normal())
    }

    fn polar_oracle(w: &Matrix) -> Matrix {
        svd(w).unwrap().polar_factor()
    }

    fn dist(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm()
    }

    /// Random matrix with singular values spread over [1, cond].
    fn conditioned(n: usize, cond: f64, rng: &mut RngState) -> Matrix {
        let q1 = sample_uniform_orthogonal(n, rng);
        let q2 = sample_uniform_orthogonal(n, rng);
        let mut a = q1;
        for i in 0..n {
            for (j, x) in a.row_mut(i).iter_mut().enumerate() {
                *x *= 1.0 + (cond - 1.0) * j as f64 / (n.max(2) - 1) as f64;
            }
        }
        matmul(&a, &q2).unwrap()
    }

    #[test]
    fn bjorck_fixed_point_on_orthogonal() {
        let q = sample_uniform_orthogonal(12, &mut RngState::new(1));
        let out = bjorck(&q, &BjorckConfig::default()).unwrap();
        assert!(dist(&out, &q) <= 1e-10);
    }

    #[test]
    fn bjorck_diagonal_goes_to_identity() {
        let out = bjorck(&Matrix::diag(&[2.0, 0.5]), &BjorckConfig::default()).unwrap();
        assert!(dist(&out, &Matrix::identity(2)) <= 1e-6);
    }

    #[test]
    fn bjorck_matches_polar_factor_on_gaussian() {
        let mut rng = RngState::new(2);
        let w = gaussian(32, &mut rng);
        let s = singular_values(&w).unwrap();
        let out = BjorckTape::forward(&w, &BjorckConfig::default()).unwrap();
        let d = dist(out.output(), &polar_oracle(&w));
        assert!(d <= 1e-5, "distance {d}, condition {}", s[0] / s[31]);
    }

    #[test]
    fn bjorck_reports_rank_deficiency() {
        let mut w = Matrix::identity(4);
        w[(3, 3)] = 0.0;
        assert!(matches!(
            bjorck(&w, &BjorckConfig::default()),
            Err(Error::BjorckResidual { .. })
        ));
        assert!(bjorck(&Matrix::zeros(3, 3), &BjorckConfig::default()).is_err());
    }

    #[test]
    fn bjorck_config_validation() {
        let cfg = BjorckConfig {
            order: 2,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Unsupported(_))));
        let cfg = BjorckConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bjorck_backward_matches_finite_differences() {
        let mut rng = RngState::new(3);
        let n = 8;
        let w = conditioned(n, 3.0, &mut rng);
        let c = gaussian(n, &mut rng);
        let cfg = BjorckConfig::default();
        // σ_max is held fixed, so the finite differences use the same scale.
        let scale = BjorckTape::forward(&w, &cfg).unwrap().scale();
        let loss = |m: &Matrix| {
            let mut a = m.scale(1.0 / scale);
            for _ in 0..cfg.iterations {
                let ata = matmul_op(&a, Op::T, &a, Op::N).unwrap();
                let mut next = a.scale(1.5);
                next.axpy(-0.5, &matmul(&a, &ata).unwrap()).unwrap();
                a = next;
            }
            // Non-linear scalar loss of the output.
            a.as_slice().iter().zip(c.as_slice()).map(|(x, c)| c * x + 0.5 * x * x * x).sum::<f64>()
        };
        let tape = BjorckTape::forward(&w, &cfg).unwrap();
        let out = tape.output();
        let grad_out = Matrix::from_fn(n, n, |i, j| c[(i, j)] + 1.5 * out[(i, j)] * out[(i, j)]);
        let grad = tape.backward(&grad_out);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut p = w.clone();
                p[(i, j)] += h;
                let mut m = w.clone();
                m[(i, j)] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let rel = (fd - grad[(i, j)]).abs() / fd.abs().max(grad[(i, j)].abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn projection_examples() {
        let q = sample_uniform_orthogonal(10, &mut RngState::new(4));
        assert!(dist(&projunn_project(&q).unwrap(), &q) <= 1e-10);

        let p = projunn_project(&Matrix::diag(&[3.0, 0.5])).unwrap();
        assert!(dist(&p, &Matrix::identity(2)) <= 1e-12);

        let mut sing = Matrix::identity(3);
        sing[(1, 1)] = 0.0;
        match projunn_project(&sing) {
            Err(Error::Singular { index, value }) => {
                assert_eq!(index, 2);
                assert_eq!(value, 0.0);
            }
            other => panic!("expected singular error, got {other:?}"),
        }
        assert!(projunn_project(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn projection_is_nearest_among_random_probes() {
        let mut rng = RngState::new(5);
        let w = gaussian(16, &mut rng);
        let p = projunn_project(&w).unwrap();
        assert!(gram_residual(&p).unwrap() <= 1e-10);
        let best = dist(&w, &p);
        for _ in 0..10_000 {
            let r = sample_uniform_orthogonal(16, &mut rng);
            assert!(best <= dist(&w, &r));
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = RngState::new(6);
        let w = gaussian(20, &mut rng);
        let p = projunn_project(&w).unwrap();
        assert!(dist(&projunn_project(&p).unwrap(), &p) <= 1e-10);
    }

    #[test]
    fn both_maps_agree_with_polar_factor_when_well_conditioned() {
        let mut rng = RngState::new(7);
        for n in [2, 5, 16, 40] {
            let w = conditioned(n, 10.0, &mut rng);
            let polar = polar_oracle(&w);
            assert!(dist(&bjorck(&w, &BjorckConfig::default()).unwrap(), &polar) <= 1e-5);
            assert!(dist(&projunn_project(&w).unwrap(), &polar) <= 1e-5);
        }
    }

    #[test]
    fn penalty_examples() {
        let q = sample_uniform_orthogonal(6, &mut RngState::new(8));
        let (v, g) = ortho_penalty(&q).unwrap();
        assert!(v.abs() < 1e-20 && g.max_abs() < 1e-10);

        let (v, _) = ortho_penalty(&Matrix::diag(&[2.0, 1.0])).unwrap();
        assert_eq!(v, 9.0);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = RngState::new(9);
        let w = gaussian(8, &mut rng).scale(0.4);
        let (_, grad) = ortho_penalty(&w).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            for j in 0..8 {
                let mut p = w.clone();
                p[(i, j)] += h;
                let mut m = w.clone();
                m[(i, j)] -= h;
                let fd = (ortho_penalty(&p).unwrap().0 - ortho_penalty(&m).unwrap().0) / (2.0 * h);
                let rel = (fd - grad[(i, j)]).abs() / fd.abs().max(1e-3);
                assert!(rel <= 1e-6, "rel {rel} at ({i},{j})");
            }
        }
    }

    #[test]
    fn diagnose_exact_orthogonal() {
        let q = sample_uniform_orthogonal(30, &mut RngState::new(10));
        for k in 2..=8 {
            let d = diagnose(&q, k).unwrap();
            assert!(d.residual <= 1e-10);
            assert!((d.sv_ratio - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn diagnose_matches_jacobi_oracle() {
        let w = sample_uniform_orthogonal(20, &mut RngState::new(15));
        let wq = quantize(&w, &QuantSpec::new(4).unwrap());
        let d = diagnose(&wq, 4).unwrap();
        let mut s = crate::numerics::oracle::jacobi_singular_values(&wq);
        s.sort_by(|a, b| b.total_cmp(a));
        assert!((d.sigma_max - s[0]).abs() <= 1e-8);
        assert!((d.sigma_min - s[19]).abs() <= 1e-8);
        let naive = crate::numerics::oracle::naive_matmul(&wq, &wq.transpose());
        let r: f64 = (0..20)
            .flat_map(|i| (0..20).map(move |j| (i, j)))
            .map(|(i, j)| (naive[(i, j)] - if i == j { 1.0 } else { 0.0 }).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((d.residual - r).abs() <= 1e-10);
    }

    #[test]
    fn bounds_hold_on_quantized_samples() {
        for r in orthogonality_study(24, &[2, 3, 4, 5, 6, 7, 8], 100, 11).unwrap() {
            assert!(r.diagnostics.within_bounds(1e-12), "{r:?}");
            assert!((0.0..=1.0).contains(&r.diagnostics.sv_ratio));
        }
    }

    #[test]
    fn eight_bit_residual_bound_for_200() {
        let w = sample_uniform_orthogonal(200, &mut RngState::new(12));
        let d = diagnose(&quantize(&w, &QuantSpec::new(8).unwrap()), 8).unwrap();
        assert!(d.residual <= 2.0 * 200.0 / 128.0 + (200.0f64 / 128.0).powi(2));
    }

    #[test]
    fn small_matrix_ratio_bound() {
        // For n = 4, k = 8 the bracket gives ratio ≥ (1 − 4/128)/(1 + 4/128).
        let (lo, hi) = sigma_bounds(4, 8);
        for (_, ratios) in sv_ratio_study(4, &[8], 200, 13).unwrap() {
            for r in ratios {
                assert!(r >= lo / hi);
            }
        }
    }

    #[test]
    fn grid_aligned_matrix_has_unit_ratio() {
        // A signed permutation is orthogonal and already on every grid.
        let mut p = Matrix::zeros(4, 4);
        for (i, j, s) in [(0, 2, 1.0), (1, 0, -1.0), (2, 3, -1.0), (3, 1, 1.0)] {
            p[(i, j)] = s;
        }
        let q = quantize(&p, &QuantSpec::new(3).unwrap());
        assert_eq!(q, p.map(|x| if x > 0.0 { 0.75 } else { x }));
        // The max-abs grid has no +1 level but −1 is exact.
        let neg = Matrix::diag(&[-1.0, -1.0, -1.0]);
        let d = diagnose(&quantize(&neg, &QuantSpec::new(3).unwrap()), 3).unwrap();
        assert!((d.sv_ratio - 1.0).abs() < 1e-15);
        assert_eq!(power_distance_curve(&neg, 3, &[1, 7, 50]).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn power_distance_first_power_bound() {
        let n = 50;
        let w = sample_uniform_orthogonal(n, &mut RngState::new(14));
        for k in [4, 6, 8] {
            let d = power_distance_curve(&w, k, &[1]).unwrap()[0];
            let direct = w.sub(&quantize(&w, &QuantSpec::new(k).unwrap())).unwrap().frobenius_norm() / (n as f64).sqrt();
            assert!((d - direct).abs() < 1e-12);
            assert!(d <= n as f64 / ((1u64 << (k - 1)) as f64 * (n as f64).sqrt()));
        }
    }

    #[test]
    fn power_study_matches_direct_curves() {
        let recs = power_distance_study(12, &[3, 6], &[20, 1, 5], 2, 9).unwrap();
        assert_eq!(recs.len(), 2 * 2 * 3);
        for r in &recs {
            let w = sample_uniform_orthogonal(12, &mut RngState::new(r.seed));
            let d = power_distance_curve(&w, r.bits, &[r.power]).unwrap()[0];
            assert!((d - r.distance).abs() < 1e-10, "{r:?} vs {d}");
        }
        assert!(recs.windows(2).all(|p| p[0].bits != p[1].bits || p[0].power < p[1].power));
    }

    #[test]
    fn power_distance_rejects_non_orthogonal() {
        assert!(power_distance_curve(&Matrix::diag(&[2.0, 1.0]), 4, &[1]).is_err());
    }

    #[test]
    fn matrix_power_small() {
        let a = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]);
        assert_eq!(matrix_power(&a, 5).unwrap(), Matrix::from_rows(&[[1.0, 5.0], [0.0, 1.0]]));
        assert_eq!(matrix_power(&a, 0).unwrap(), Matrix::identity(2));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
