//! Real polynomials in `z^{-1}`: roots, re-expansion and IIR responses.

use nalgebra::{Complex, DMatrix};

pub type Complex64 = Complex<f64>;

/// Roots of `c[0] z^n + c[1] z^{n-1} + ... + c[n]`.
///
/// Eigenvalues of the companion matrix, polished with a few Newton steps on
/// the original polynomial. Returns `None` if the Schur iteration fails.
pub fn roots(coeffs: &[f64]) -> Option<Vec<Complex64>> {
    let first = coeffs.iter().position(|&c| c != 0.0)?;
    let c = &coeffs[first..];
    let mut trailing_zeros = 0;
    let mut end = c.len();
    while end > 1 && c[end - 1] == 0.0 {
        trailing_zeros += 1;
        end -= 1;
    }
    let c = &c[..end];
    let degree = c.len() - 1;
    let mut out = vec![Complex64::new(0.0, 0.0); trailing_zeros];
    if degree == 0 {
        return Some(out);
    }

    let lead = c[0];
    let mut companion = DMatrix::<f64>::zeros(degree, degree);
    for j in 0..degree {
        companion[(0, j)] = -c[j + 1] / lead;
    }
    for i in 1..degree {
        companion[(i, i - 1)] = 1.0;
    }
    let schur = nalgebra::linalg::Schur::try_new(companion, 1e-14, 10_000)?;
    let eig = schur.complex_eigenvalues();
    for z in eig.iter() {
        out.push(polish(c, *z));
    }
    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return None;
    }
    Some(out)
}

fn polish(c: &[f64], mut z: Complex64) -> Complex64 {
    for _ in 0..3 {
        let (p, dp) = eval_with_derivative(c, z);
        if dp.norm() == 0.0 {
            break;
        }
        let step = p / dp;
        let next = z - step;
        // Accept only improving steps; clustered roots can make Newton wander.
        if eval_with_derivative(c, next).0.norm() < p.norm() {
            z = next;
        } else {
            break;
        }
    }
    z
}

fn eval_with_derivative(c: &[f64], z: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &ci in c {
        dp = dp * z + p;
        p = p * z + ci;
    }
    (p, dp)
}

/// Monic real polynomial (descending powers) with the given roots.
///
/// Roots are expected to come in conjugate pairs; imaginary residue of the
/// expanded coefficients is discarded.
pub fn from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut acc = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); acc.len() + 1];
        for (i, &a) in acc.iter().enumerate() {
            next[i] += a;
            next[i + 1] -= a * r;
        }
        acc = next;
    }
    acc.into_iter().map(|c| c.re).collect()
}

/// Poles of `1 / (1 + a[0] z^{-1} + ... + a[R-1] z^{-R})`.
pub fn denominator_poles(a: &[f64]) -> Option<Vec<Complex64>> {
    let mut c = Vec::with_capacity(a.len() + 1);
    c.push(1.0);
    c.extend_from_slice(a);
    roots(&c)
}

/// Zeros of `b[0] + b[1] z^{-1} + ... + b[P] z^{-P}`.
pub fn numerator_zeros(b: &[f64]) -> Option<Vec<Complex64>> {
    if b.iter().all(|&x| x == 0.0) {
        return Some(Vec::new());
    }
    roots(b)
}

/// Largest pole magnitude of the denominator `1 + sum a_j z^{-j}`.
pub fn max_pole_magnitude(a: &[f64]) -> Option<f64> {
    if a.iter().all(|&x| x == 0.0) {
        return Some(0.0);
    }
    Some(
        denominator_poles(a)?
            .iter()
            .map(|p| p.norm())
            .fold(0.0, f64::max),
    )
}

/// Direct-form IIR filtering with zero initial state:
/// `y(n) = sum_i b_i x(n-i) - sum_j a_j y(n-j)`, `a` holding `a_1..a_R`.
pub fn iir_filter(x: &[f64], b: &[f64], a: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for n in 0..x.len() {
        let mut acc = 0.0;
        for (i, &bi) in b.iter().enumerate() {
            if i > n {
                break;
            }
            acc += bi * x[n - i];
        }
        for (j, &aj) in a.iter().enumerate() {
            let lag = j + 1;
            if lag > n {
                break;
            }
            acc -= aj * y[n - lag];
        }
        y[n] = acc;
    }
    y
}

/// First `len` samples of the filter's impulse response.
pub fn impulse_response(b: &[f64], a: &[f64], len: usize) -> Vec<f64> {
    let mut x = vec![0.0; len];
    if len > 0 {
        x[0] = 1.0;
    }
    iir_filter(&x, b, a)
}
