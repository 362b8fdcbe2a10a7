//! LTI representations, discretization, discrete LQR synthesis and
//! state-space/transfer-function conversions.

use std::fmt;

use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("I - A*T/2 is singular")]
    DiscretizationSingularity,
    #[error("Riccati iteration did not converge after {iterations} iterations (last change {last_change:e})")]
    RiccatiNoConvergence { iterations: usize, last_change: f64 },
    #[error("R + B'PB is singular")]
    SingularGain,
    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),
    #[error("transfer function is improper")]
    ImproperTransferFunction,
    #[error("denominator must have a nonzero leading coefficient")]
    ZeroDenominator,
    #[error("system is already discrete")]
    AlreadyDiscrete,
    #[error("sample time must be positive")]
    BadSampleTime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleTime<T> {
    Continuous,
    Discrete(T),
}

impl<T: fmt::Display> fmt::Display for SampleTime<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleTime::Continuous => write!(f, "continuous"),
            SampleTime::Discrete(t) => write!(f, "T={t}"),
        }
    }
}

/// `x' = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace<T: Scalar> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
    pub c: Matrix<T>,
    pub d: Matrix<T>,
    pub sample_time: SampleTime<T>,
}

impl<T: Scalar> StateSpace<T> {
    pub fn new(
        a: Matrix<T>,
        b: Matrix<T>,
        c: Matrix<T>,
        d: Matrix<T>,
        sample_time: SampleTime<T>,
    ) -> Result<Self, ControlError> {
        let n = a.rows();
        let ok = a.is_square()
            && b.rows() == n
            && c.cols() == n
            && d.rows() == c.rows()
            && d.cols() == b.cols();
        if !ok {
            return Err(ControlError::DimensionMismatch(format!(
                "A {:?}, B {:?}, C {:?}, D {:?}",
                a.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            )));
        }
        Ok(Self {
            a,
            b,
            c,
            d,
            sample_time,
        })
    }

    pub fn continuous(
        a: Matrix<T>,
        b: Matrix<T>,
        c: Matrix<T>,
        d: Matrix<T>,
    ) -> Result<Self, ControlError> {
        Self::new(a, b, c, d, SampleTime::Continuous)
    }

    pub fn order(&self) -> usize {
        self.a.rows()
    }

    pub fn inputs(&self) -> usize {
        self.b.cols()
    }

    pub fn outputs(&self) -> usize {
        self.c.rows()
    }

    fn check_continuous(&self, t: T) -> Result<(), ControlError> {
        if self.sample_time != SampleTime::Continuous {
            return Err(ControlError::AlreadyDiscrete);
        }
        if !(t > T::zero()) {
            return Err(ControlError::BadSampleTime);
        }
        Ok(())
    }
}

impl<T: Scalar> fmt::Display for StateSpace<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "A =\n{}", self.a)?;
        writeln!(f, "B =\n{}", self.b)?;
        writeln!(f, "C =\n{}", self.c)?;
        writeln!(f, "D =\n{}", self.d)?;
        write!(f, "{}", self.sample_time)
    }
}

/// Ratio of polynomials, coefficients in descending powers.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction<T> {
    pub num: Vec<T>,
    pub den: Vec<T>,
    pub sample_time: SampleTime<T>,
}

fn trim_leading<T: Scalar>(mut p: Vec<T>) -> Vec<T> {
    let first = p
        .iter()
        .position(|x| *x != T::zero())
        .unwrap_or(p.len().saturating_sub(1));
    p.drain(..first);
    if p.is_empty() {
        p.push(T::zero());
    }
    p
}

impl<T: Scalar> TransferFunction<T> {
    /// Leading zeros of the numerator are dropped; the denominator's
    /// leading coefficient must be nonzero.
    pub fn new(num: Vec<T>, den: Vec<T>, sample_time: SampleTime<T>) -> Result<Self, ControlError> {
        if den.first().is_none_or(|x| *x == T::zero()) {
            return Err(ControlError::ZeroDenominator);
        }
        Ok(Self {
            num: trim_leading(num),
            den,
            sample_time,
        })
    }

    pub fn continuous(num: Vec<T>, den: Vec<T>) -> Result<Self, ControlError> {
        Self::new(num, den, SampleTime::Continuous)
    }

    pub fn is_proper(&self) -> bool {
        self.num.len() <= self.den.len()
    }

    /// Scales both polynomials so the denominator is monic.
    pub fn monic(&self) -> Self {
        let lead = self.den[0];
        Self {
            num: self.num.iter().map(|&x| x / lead).collect(),
            den: self.den.iter().map(|&x| x / lead).collect(),
            sample_time: self.sample_time,
        }
    }

    /// Numerator left-padded with zeros to the denominator's length.
    pub fn padded_num(&self) -> Vec<T> {
        let mut v = vec![T::zero(); self.den.len().saturating_sub(self.num.len())];
        v.extend(&self.num);
        v
    }
}

fn poly_text<T: Scalar>(p: &[T]) -> String {
    let deg = p.len() - 1;
    let terms: Vec<String> = p
        .iter()
        .enumerate()
        .map(|(i, c)| match deg - i {
            0 => format!("{c}"),
            1 => format!("{c} s"),
            k => format!("{c} s^{k}"),
        })
        .collect();
    terms.join(" + ")
}

impl<T: Scalar> fmt::Display for TransferFunction<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}) / ({})", poly_text(&self.num), poly_text(&self.den))
    }
}

/// Matrix exponential by scaling and squaring with a degree-6 Padé
/// approximant.
pub fn expm<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.rows();
    if n == 0 {
        return a.clone();
    }
    const Q: usize = 6;
    let norm = a.norm_inf().to_f64_lossy();
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a.scale(T::lit(0.5f64.powi(s)));

    let mut c = T::one();
    let mut x = Matrix::identity(n);
    let mut num = Matrix::identity(n);
    let mut den = Matrix::identity(n);
    for k in 1..=Q {
        c = c * T::from_usize(Q - k + 1).expect("small int")
            / T::from_usize(k * (2 * Q - k + 1)).expect("small int");
        x = &scaled * &x;
        let term = x.scale(c);
        num = &num + &term;
        den = if k % 2 == 0 {
            &den + &term
        } else {
            &den - &term
        };
    }
    let mut e = den
        .solve(&num)
        .expect("Pade denominator is nonsingular after scaling");
    for _ in 0..s {
        e = &e * &e;
    }
    e
}

/// Zero-order-hold discretization via the augmented exponential
/// `exp([[A, B], [0, 0]] T)`.
pub fn c2d_zoh<T: Scalar>(sys: &StateSpace<T>, t: T) -> Result<StateSpace<T>, ControlError> {
    sys.check_continuous(t)?;
    let (n, m) = (sys.order(), sys.inputs());
    let mut aug = Matrix::zeros(n + m, n + m);
    aug.set_block(0, 0, &sys.a.scale(t));
    aug.set_block(0, n, &sys.b.scale(t));
    let e = expm(&aug);
    StateSpace::new(
        e.block(0, 0, n, n),
        e.block(0, n, n, m),
        sys.c.clone(),
        sys.d.clone(),
        SampleTime::Discrete(t),
    )
}

/// Bilinear (Tustin) discretization.
pub fn c2d_tustin<T: Scalar>(sys: &StateSpace<T>, t: T) -> Result<StateSpace<T>, ControlError> {
    sys.check_continuous(t)?;
    let n = sys.order();
    let half = sys.a.scale(t / T::lit(2.0));
    let i = Matrix::identity(n);
    let inv = (&i - &half).inverse().map_err(|e| match e {
        LinalgError::Singular { .. } => ControlError::DiscretizationSingularity,
        other => ControlError::DimensionMismatch(other.to_string()),
    })?;
    let ad = &inv * &(&i + &half);
    let bd = (&inv * &sys.b).scale(t);
    let cd = &sys.c * &inv;
    let dd = &sys.d + &(&cd * &sys.b).scale(t / T::lit(2.0));
    StateSpace::new(ad, bd, cd, dd, SampleTime::Discrete(t))
}

/// `‖A_d(ZOH) − A_d(Tustin)‖∞ / T`. The two maps agree through the
/// second-order term, so this shrinks like `T²`.
pub fn zoh_tustin_discrepancy<T: Scalar>(sys: &StateSpace<T>, t: T) -> Result<T, ControlError> {
    let z = c2d_zoh(sys, t)?;
    let b = c2d_tustin(sys, t)?;
    Ok((&z.a - &b.a).norm_inf() / t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution<T: Scalar> {
    /// State feedback gain, `u = −K x`.
    pub k: Matrix<T>,
    /// Stabilizing solution of the discrete algebraic Riccati equation.
    pub p: Matrix<T>,
    pub iterations: usize,
}

pub const DARE_TOLERANCE: f64 = 1e-12;
pub const DARE_MAX_ITERATIONS: usize = 10_000;

fn check_lqr_shapes<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    q: &Matrix<T>,
    r: &Matrix<T>,
) -> Result<(), ControlError> {
    let n = a.rows();
    let m = b.cols();
    if !a.is_square() || b.rows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(ControlError::DimensionMismatch(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    Ok(())
}

/// Gain `(R + BᵀPB)⁻¹ BᵀPA` for a given `P`.
pub fn lqr_gain<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    r: &Matrix<T>,
    p: &Matrix<T>,
) -> Result<Matrix<T>, ControlError> {
    let bt = b.transpose();
    let btp = &bt * p;
    let s = r + &(&btp * b);
    s.solve(&(&btp * a)).map_err(|_| ControlError::SingularGain)
}

/// Right-hand side of the DARE at `P`.
pub fn riccati_map<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    q: &Matrix<T>,
    r: &Matrix<T>,
    p: &Matrix<T>,
) -> Result<Matrix<T>, ControlError> {
    let at = a.transpose();
    let atpa = &(&at * p) * a;
    let atpb = &(&at * p) * b;
    let k = lqr_gain(a, b, r, p)?;
    Ok(&(&atpa - &(&atpb * &k)) + q)
}

/// Discrete LQR by fixed-point iteration of the Riccati map from `P₀ = Q`.
///
/// Stops when successive iterates differ by at most `DARE_TOLERANCE` in the
/// infinity norm, scaled by `max(1, ‖P‖∞)` so large solutions are not held
/// to an absolute tolerance below their rounding error.
pub fn dlqr<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    q: &Matrix<T>,
    r: &Matrix<T>,
) -> Result<LqrSolution<T>, ControlError> {
    check_lqr_shapes(a, b, q, r)?;
    let tol = T::lit(DARE_TOLERANCE);
    let mut p = q.clone();
    let mut change = T::infinity();
    for it in 1..=DARE_MAX_ITERATIONS {
        let next = riccati_map(a, b, q, r, &p)?;
        let next = (&next + &next.transpose()).scale(T::lit(0.5));
        change = (&next - &p).norm_inf();
        p = next;
        if !p.is_finite() {
            break;
        }
        if change <= tol * p.norm_inf().max(T::one()) {
            let k = lqr_gain(a, b, r, &p)?;
            return Ok(LqrSolution {
                k,
                p,
                iterations: it,
            });
        }
    }
    Err(ControlError::RiccatiNoConvergence {
        iterations: DARE_MAX_ITERATIONS,
        last_change: change.to_f64_lossy(),
    })
}

/// `‖P − riccati_map(P)‖∞`.
pub fn dare_residual<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    q: &Matrix<T>,
    r: &Matrix<T>,
    p: &Matrix<T>,
) -> Result<T, ControlError> {
    Ok((p - &riccati_map(a, b, q, r, p)?).norm_inf())
}

/// Upper estimate of the spectral radius from `‖M^k‖^(1/k)` with `k = 2^squarings`.
pub fn spectral_radius_estimate<T: Scalar>(m: &Matrix<T>, squarings: u32) -> T {
    let mut x = m.clone();
    let mut log_scale = T::zero();
    for _ in 0..squarings {
        x = &x * &x;
        let nrm = x.norm_inf();
        if nrm == T::zero() {
            return T::zero();
        }
        // Renormalize to avoid overflow; track the scale in log space.
        log_scale = log_scale * T::lit(2.0) + nrm.ln();
        x = x.scale(T::one() / nrm);
    }
    let k = T::lit(2f64.powi(squarings as i32));
    (log_scale / k).exp()
}

/// Characteristic polynomial and adjugate terms by the Leverrier–Faddeev
/// recursion: returns `[1, c_{n-1}, …, c_0]` and `M_1 … M_n` with
/// `adj(sI − A) = Σ M_k s^{n−k}`.
pub fn leverrier<T: Scalar>(a: &Matrix<T>) -> (Vec<T>, Vec<Matrix<T>>) {
    let n = a.rows();
    let i = Matrix::identity(n);
    let mut coeffs = vec![T::one()];
    let mut ms = Vec::with_capacity(n);
    let mut m = i.clone();
    for k in 1..=n {
        if k > 1 {
            m = &(a * &m) + &i.scale(*coeffs.last().expect("nonempty"));
        }
        let am = a * &m;
        let c = -am.trace() / T::from_usize(k).expect("small int");
        ms.push(m.clone());
        coeffs.push(c);
    }
    (coeffs, ms)
}

/// SISO state space to transfer function. The denominator is the monic
/// characteristic polynomial of A.
pub fn ss2tf<T: Scalar>(sys: &StateSpace<T>) -> Result<TransferFunction<T>, ControlError> {
    if sys.inputs() != 1 || sys.outputs() != 1 {
        return Err(ControlError::UnsupportedShape(format!(
            "ss2tf needs SISO, got {} inputs and {} outputs",
            sys.inputs(),
            sys.outputs()
        )));
    }
    let (den, ms) = leverrier(&sys.a);
    let d = sys.d[(0, 0)];
    let mut num: Vec<T> = den.iter().map(|&x| d * x).collect();
    for (k, m) in ms.iter().enumerate() {
        num[k + 1] += (&(&sys.c * m) * &sys.b)[(0, 0)];
    }
    TransferFunction::new(num, den, sys.sample_time)
}

/// Controllable canonical realization of a proper SISO transfer function.
pub fn tf2ss<T: Scalar>(tf: &TransferFunction<T>) -> Result<StateSpace<T>, ControlError> {
    if !tf.is_proper() {
        return Err(ControlError::ImproperTransferFunction);
    }
    let tf = tf.monic();
    let n = tf.den.len() - 1;
    let num = tf.padded_num();
    let d0 = num[0];
    let mut a = Matrix::zeros(n, n);
    let mut b = Matrix::zeros(n, 1);
    let mut c = Matrix::zeros(1, n);
    for j in 0..n {
        a[(0, j)] = -tf.den[j + 1];
        c[(0, j)] = num[j + 1] - d0 * tf.den[j + 1];
    }
    for i in 1..n {
        a[(i, i - 1)] = T::one();
    }
    if n > 0 {
        b[(0, 0)] = T::one();
    }
    StateSpace::new(a, b, c, Matrix::scalar(d0), tf.sample_time)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows)
    }

    #[test]
    fn expm_scalar_and_nilpotent() {
        let e = expm(&m(&[&[-1.0]]));
        assert!((e[(0, 0)] - (-1f64).exp()).abs() < 1e-14);
        let e = expm(&m(&[&[0.0, 1.0], &[0.0, 0.0]]));
        assert_eq!(e, m(&[&[1.0, 1.0], &[0.0, 1.0]]));
        let e = expm(&m(&[&[3.0]]));
        assert!((e[(0, 0)] / 3f64.exp() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn leverrier_companion() {
        // s^2 + 3 s + 2
        let (c, _) = leverrier(&m(&[&[-3.0, -2.0], &[1.0, 0.0]]));
        assert_eq!(c, vec![1.0, 3.0, 2.0]);
    }

    #[test]
    fn spectral_radius_of_rotation_scaled() {
        let r = spectral_radius_estimate(&m(&[&[0.0, -0.5], &[0.5, 0.0]]), 10);
        assert!((r - 0.5).abs() < 1e-2);
    }
}
