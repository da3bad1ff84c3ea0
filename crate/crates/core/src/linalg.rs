//! Dense kernels: one-sided Jacobi SVD, Gram-Schmidt passes, principal angles.
//!
//! Everything here works on row-major `ndarray` matrices and treats a basis as
//! a stack of orthonormal *rows*.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `a = u · diag(s) · vt`.
///
/// `s` is sorted non-increasing. Rows of `vt` follow the sign convention of
/// [`sign_normalize`]; the matching columns of `u` are flipped with them.
/// Vectors paired with an exactly-zero singular value may be zero.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub u: Array2<T>,
    pub s: Vec<T>,
    pub vt: Array2<T>,
}

/// Computes the thin SVD with Hestenes one-sided Jacobi rotations.
pub fn svd<T: Scalar>(a: ArrayView2<'_, T>) -> Svd<T> {
    let (m, n) = a.dim();
    let tall = m >= n;
    // Rotations act on the rows of `work`; `accum` records them.
    let mut work = if tall { a.t().to_owned() } else { a.to_owned() };
    let p = work.nrows();
    let mut accum = Array2::<T>::eye(p);
    hestenes(&mut work, &mut accum);

    let mut sigma: Vec<T> = work
        .outer_iter()
        .map(|row| row.dot(&row).sqrt())
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| {
        sigma[j]
            .partial_cmp(&sigma[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });

    let q = work.ncols();
    let mut dirs = Array2::<T>::zeros((p, q));
    let mut others = Array2::<T>::zeros((p, p));
    let mut sorted = Vec::with_capacity(p);
    for (dst, &src) in order.iter().enumerate() {
        let sv = sigma[src];
        if sv > T::zero() {
            dirs.row_mut(dst).assign(&work.row(src).mapv(|x| x / sv));
        }
        others.row_mut(dst).assign(&accum.row(src));
        sorted.push(sv);
    }
    sigma = sorted;

    // tall: dirs hold left vectors, accum holds right vectors; wide: the reverse.
    let (mut ut, mut vt) = if tall { (dirs, others) } else { (others, dirs) };
    for i in 0..p {
        if sign_normalize(vt.row_mut(i)) {
            ut.row_mut(i).mapv_inplace(|x| -x);
        }
    }
    Svd {
        u: ut.reversed_axes(),
        s: sigma,
        vt,
    }
}

fn hestenes<T: Scalar>(work: &mut Array2<T>, accum: &mut Array2<T>) {
    let p = work.nrows();
    let tol = T::epsilon();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..p {
            for j in (i + 1)..p {
                let (alpha, beta, gamma) = {
                    let wi = work.row(i);
                    let wj = work.row(j);
                    (wi.dot(&wi), wj.dot(&wj), wi.dot(&wj))
                };
                if alpha == T::zero() || beta == T::zero() {
                    continue;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let two = T::lit(2.0);
                let zeta = (beta - alpha) / (two * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_rows(work, i, j, c, s);
                rotate_rows(accum, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate_rows<T: Scalar>(m: &mut Array2<T>, i: usize, j: usize, c: T, s: T) {
    let (mut top, mut bottom) = m.view_mut().split_at(Axis(0), j);
    let mut ri = top.row_mut(i);
    let mut rj = bottom.row_mut(0);
    for (x, y) in ri.iter_mut().zip(rj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Flips `v` so its largest-magnitude entry is positive. Entries within a
/// relative `1e4·eps` of the maximum count as ties; the lowest index wins.
/// Returns whether the vector was negated.
pub fn sign_normalize<T: Scalar>(mut v: ArrayViewMut1<'_, T>) -> bool {
    let max = v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
    if max == T::zero() {
        return false;
    }
    let cut = max * (T::one() - T::epsilon() * T::lit(1e4));
    let pivot = v
        .iter()
        .copied()
        .find(|x| x.abs() >= cut)
        .unwrap_or(T::zero());
    if pivot < T::zero() {
        v.mapv_inplace(|x| -x);
        true
    } else {
        false
    }
}

/// Count of singular values above `σ₁ · max(rows, cols) · eps`.
pub fn numerical_rank<T: Scalar>(s: &[T], rows: usize, cols: usize) -> usize {
    let Some(&first) = s.first() else { return 0 };
    if first <= T::zero() {
        return 0;
    }
    let cut = first * T::lit(rows.max(cols) as f64) * T::epsilon();
    s.iter().take_while(|&&x| x > cut).count()
}

/// Removes from `v` its components along the rows of `basis` with two
/// modified Gram-Schmidt passes. Assumes the basis rows are unit length.
pub fn orthogonalize_against<T: Scalar>(basis: ArrayView2<'_, T>, v: &mut Array1<T>) {
    for _ in 0..2 {
        for row in basis.outer_iter() {
            let c = row.dot(v);
            v.scaled_add(-c, &row);
        }
    }
}

/// Orthonormalizes the rows of `m` in order, dropping rows whose residual
/// falls below `rel_drop` times their original norm.
pub fn orthonormal_rows<T: Scalar>(m: &Array2<T>, rel_drop: T) -> Array2<T> {
    let mut kept: Vec<Array1<T>> = Vec::with_capacity(m.nrows());
    for row in m.outer_iter() {
        let pre = norm(row);
        if pre == T::zero() {
            continue;
        }
        let mut v = row.to_owned();
        for _ in 0..2 {
            for q in &kept {
                let c = q.dot(&v);
                v.scaled_add(-c, q);
            }
        }
        let post = norm(v.view());
        if post > rel_drop * pre {
            v.mapv_inplace(|x| x / post);
            kept.push(v);
        }
    }
    stack_rows(&kept, m.ncols())
}

pub fn stack_rows<T: Scalar>(rows: &[Array1<T>], cols: usize) -> Array2<T> {
    let mut out = Array2::<T>::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

pub fn norm<T: Scalar>(v: ArrayView1<'_, T>) -> T {
    v.dot(&v).sqrt()
}

pub fn frobenius_sq<T: Scalar>(m: ArrayView2<'_, T>) -> T {
    m.iter().map(|&x| x * x).sum()
}

/// Largest principal angle (radians) between the row spaces of `u` and
/// `w`, both with orthonormal rows. Computed from the sine side so that
/// angles near zero keep full relative accuracy.
pub fn largest_principal_angle<T: Scalar>(u: ArrayView2<'_, T>, w: ArrayView2<'_, T>) -> T {
    let (small, large) = if u.nrows() <= w.nrows() { (u, w) } else { (w, u) };
    if small.nrows() == 0 {
        return T::zero();
    }
    let coupling = small.dot(&large.t());
    let residual = &small - &coupling.dot(&large);
    let sin_max = svd(residual.view())
        .s
        .first()
        .copied()
        .unwrap_or(T::zero())
        .min(T::one());
    sin_max.asin()
}

pub fn gaussian_matrix<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::lit(rng.sample::<f64, _>(StandardNormal)))
}

pub fn gaussian_vector<T: Scalar, R: Rng + ?Sized>(rng: &mut R, len: usize) -> Array1<T> {
    Array1::from_shape_simple_fn(len, || T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Least-squares solve of `a · x = b` through the SVD pseudo-inverse,
/// truncating singular values below the numerical-rank cut.
pub fn lstsq<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let dec = svd(a);
    let rank = numerical_rank(&dec.s, a.nrows(), a.ncols());
    let u = dec.u.slice(s![.., ..rank]);
    let vt = dec.vt.slice(s![..rank, ..]);
    let mut ub = u.t().dot(&b);
    for (i, mut row) in ub.outer_iter_mut().enumerate() {
        let inv = T::one() / dec.s[i];
        row.mapv_inplace(|x| x * inv);
    }
    vt.t().dot(&ub)
}
