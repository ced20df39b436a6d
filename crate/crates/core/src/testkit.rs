//! Independent reference minimizers used by the test suites to
//! cross-check the closed-form and EM solution paths. Not part of the
//! public contract; compiled only for tests or behind the `testkit`
//! feature.
//!
//! The derivative-free minimizer touches the objective through function
//! values alone (cyclic coordinate descent with golden-section line
//! searches, plus a polish phase over singular and random directions to
//! escape coordinate stalls at spectral kinks). The proximal-gradient
//! minimizer uses its own gradient accumulation and its own singular-value
//! thresholding, sharing nothing with the EM path beyond the bare
//! factorization kernel.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::matcore::{self, DenseMatrix};
use crate::obsmodel::ObservationSet;

/// Brent minimization (parabolic interpolation with golden-section
/// fallback) of a unimodal `g` on the bracket `[a, b]`.
fn brent_min(g: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    const CGOLD: f64 = 0.381_966_011_250_105;
    const MAX_ITER: usize = 80;
    let tol = 1e-11;

    let mut x = a + CGOLD * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = g(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for _ in 0..MAX_ITER {
        let xm = 0.5 * (a + b);
        let tol1 = tol * (1.0 + x.abs());
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            // Parabola through (x, fx), (v, fv), (w, fw).
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            e = d;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm > x { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = g(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Exact-ish 1-D minimization of the convex restriction `t -> f(z + t d)`.
/// Returns the improved `(t, f)` or `(0, f0)` when no progress is possible.
fn line_minimize(g: &impl Fn(f64) -> f64, f0: f64) -> (f64, f64) {
    let h = 0.25;
    let (f_pos, f_neg) = (g(h), g(-h));
    let (mut lo, mut hi);
    if f_pos >= f0 && f_neg >= f0 {
        lo = -h;
        hi = h;
    } else {
        // Expand in the descending direction until the values turn up.
        let sign = if f_pos < f_neg { 1.0 } else { -1.0 };
        let mut t_prev = 0.0;
        let mut t_cur = sign * h;
        let mut f_cur = if sign > 0.0 { f_pos } else { f_neg };
        let mut t_next = 2.0 * t_cur;
        let mut f_next = g(t_next);
        while f_next < f_cur && t_next.abs() < 1e8 {
            t_prev = t_cur;
            t_cur = t_next;
            f_cur = f_next;
            t_next *= 2.0;
            f_next = g(t_next);
        }
        lo = t_prev.min(t_next);
        hi = t_prev.max(t_next);
    }
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }
    let (t, ft) = brent_min(g, lo, hi);
    if ft < f0 {
        (t, ft)
    } else {
        (0.0, f0)
    }
}

/// Completes orthonormal columns to a square orthonormal basis via the
/// SVD of the complementary projector.
fn full_basis(m: &DenseMatrix) -> DenseMatrix {
    let d = m.rows();
    let r = m.cols();
    if r == d {
        return m.clone();
    }
    let proj = DenseMatrix::identity(d).sub(&m.matmul(&m.transpose()));
    let f = matcore::svd(&proj).expect("svd convergence");
    DenseMatrix::from_fn(d, d, |i, j| {
        if j < r {
            m.get(i, j)
        } else {
            f.u.get(i, j - r)
        }
    })
}

/// Derivative-free minimization of a convex objective over matrices of the
/// shape of `z0`, from function evaluations only.
///
/// Each round minimizes along three direction families: the entry basis,
/// the current iterate's full singular basis `u_a v_b^T` (both factors
/// completed to square, so rank-increasing escape directions at spectral
/// kinks are available), and a few random directions as a safety net.
/// Entry coordinates alone can stall at kinks of spectral objectives; the
/// aligned family restores coordinate-wise optimality there.
pub fn df_minimize<F>(objective: &F, z0: &DenseMatrix, rng: &mut impl Rng) -> DenseMatrix
where
    F: Fn(&DenseMatrix) -> f64,
{
    let (rows, cols) = z0.shape();
    let dim = rows * cols;
    let mut z = z0.entries_row_major();
    let eval = |v: &[f64]| -> f64 {
        objective(&DenseMatrix::from_rows(rows, cols, v).expect("finite iterate"))
    };
    let mut fz = eval(&z);
    let f_scale = 1.0 + fz.abs();
    let tol = 1e-15 * f_scale;

    let line = |z: &mut Vec<f64>, fz: &mut f64, dir: &[f64]| {
        let g = |t: f64| {
            let v: Vec<f64> = z.iter().zip(dir).map(|(a, b)| a + t * b).collect();
            eval(&v)
        };
        let (t, ft) = line_minimize(&g, *fz);
        if ft < *fz {
            for (a, b) in z.iter_mut().zip(dir) {
                *a += t * b;
            }
            *fz = ft;
        }
    };

    let mut unit = vec![0.0; dim];
    for _round in 0..400 {
        let f_start = fz;

        // Entry-basis sweep.
        for k in 0..dim {
            unit.fill(0.0);
            unit[k] = 1.0;
            line(&mut z, &mut fz, &unit);
        }

        // Sweep aligned with the current iterate's singular bases.
        let current = DenseMatrix::from_rows(rows, cols, &z).expect("finite iterate");
        if let Ok(f) = matcore::svd(&current) {
            let u_full = full_basis(&f.u);
            let v_full = full_basis(&f.v);
            for a in 0..rows {
                for b in 0..cols {
                    for (p, slot) in unit.iter_mut().enumerate() {
                        *slot = u_full.get(p / cols, a) * v_full.get(p % cols, b);
                    }
                    line(&mut z, &mut fz, &unit);
                }
            }
        }

        // Random safety-net directions.
        for _ in 0..8 {
            let mut nrm = 0.0;
            for slot in unit.iter_mut() {
                *slot = StandardNormal.sample(rng);
                nrm += *slot * *slot;
            }
            let nrm = nrm.sqrt();
            for slot in unit.iter_mut() {
                *slot /= nrm;
            }
            line(&mut z, &mut fz, &unit);
        }

        if f_start - fz <= tol {
            break;
        }
    }
    DenseMatrix::from_rows(rows, cols, &z).expect("finite minimizer")
}

/// Independent proximal-gradient minimizer of the penalized least-squares
/// objective `sum_i M_{omega_i}^2/2 - sum_i y_i M_{omega_i} + lambda1
/// ||M||_N + (lambda2/2) ||M||_F^2`, with step `1 / (m* + lambda2)`.
pub fn prox_grad_enet(
    obs: &ObservationSet,
    lambda1: f64,
    lambda2: f64,
    tol: f64,
    max_steps: usize,
) -> DenseMatrix {
    let (d1, d2) = (obs.d1(), obs.d2());
    let step_l = obs.m_star_max() as f64 + lambda2;
    let mut m = DenseMatrix::zeros(d1, d2);
    for _ in 0..max_steps {
        // Gradient of the smooth part, accumulated over the raw samples.
        let mut grad = vec![0.0; d1 * d2];
        for (k, g) in grad.iter_mut().enumerate() {
            *g = lambda2 * m.get(k / d2, k % d2);
        }
        for &(i, j, y) in obs.samples() {
            grad[i * d2 + j] += m.get(i, j) - y;
        }
        let w = DenseMatrix::from_fn(d1, d2, |i, j| {
            m.get(i, j) - grad[i * d2 + j] / step_l
        });
        let m_next = svt(&w, lambda1 / step_l);
        let delta = m_next.sub(&m).frobenius_norm();
        let done = delta <= tol * (1.0 + m_next.frobenius_norm());
        m = m_next;
        if done {
            break;
        }
    }
    m
}

/// Plain singular-value soft thresholding (no Frobenius rescaling); local
/// to the reference path on purpose.
fn svt(w: &DenseMatrix, tau: f64) -> DenseMatrix {
    let f = matcore::svd(w).expect("svd convergence");
    let (rows, cols) = w.shape();
    DenseMatrix::from_fn(rows, cols, |i, j| {
        let mut acc = 0.0;
        for (k, &s) in f.s.iter().enumerate() {
            let shrunk = (s - tau).max(0.0);
            if shrunk > 0.0 {
                acc += shrunk * f.u.get(i, k) * f.v.get(j, k);
            }
        }
        acc
    })
}

/// Operator norm of a linear map on matrices by power iteration on the
/// normal map `adjoint . apply`, without materializing anything.
pub fn op_norm_power<A, B>(
    apply: A,
    adjoint: B,
    d1: usize,
    d2: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> f64
where
    A: Fn(&DenseMatrix) -> DenseMatrix,
    B: Fn(&DenseMatrix) -> DenseMatrix,
{
    let mut x = DenseMatrix::from_fn(d1, d2, |_, _| StandardNormal.sample(rng));
    let nrm = x.frobenius_norm();
    if nrm == 0.0 {
        return 0.0;
    }
    x = x.scale(1.0 / nrm);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let y = apply(&x);
        let sy = y.frobenius_norm();
        if sy == 0.0 {
            return 0.0;
        }
        let z = adjoint(&y);
        let sz = z.frobenius_norm();
        if sz == 0.0 {
            return sy;
        }
        sigma = sy;
        x = z.scale(1.0 / sz);
    }
    sigma
}
