//! Forward-mode automatic differentiation with vector-valued duals.
//!
//! Assembly kernels are written once over the [`Scalar`] trait and
//! instantiated three ways:
//!
//! * [`f64`] — plain evaluation (energies),
//! * [`Grad`] — value plus gradient with respect to a local variable set
//!   (residuals = energy gradients),
//! * [`Hess`] — value, gradient and packed symmetric Hessian (stiffness
//!   matrices and mixed second derivatives).
//!
//! A "variable set" is whatever the caller seeds with [`Scalar::var`]:
//! element displacement coefficients, control-point coordinates,
//! intersection parameters, or a concatenation of these. Derivatives of
//! spline basis functions enter through [`Scalar::compose`], which applies
//! the univariate chain rule given a Taylor table of the basis function at
//! the point value.

/// Number of directional variables in the active seed set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdDim(pub usize);

/// Packed lower-triangle index for a symmetric matrix, `i >= j`.
#[inline]
pub fn tri(i: usize, j: usize) -> usize {
    debug_assert!(i >= j);
    i * (i + 1) / 2 + j
}

/// Length of the packed lower triangle of an `n x n` symmetric matrix.
#[inline]
pub fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Scalar abstraction shared by all assembly kernels.
pub trait Scalar: Clone + std::fmt::Debug + Send + Sync + 'static {
    fn constant(v: f64) -> Self;

    /// Seed variable `i` of the active set with value `v`.
    fn var(v: f64, i: usize, dim: AdDim) -> Self;

    fn value(&self) -> f64;

    fn add(&self, rhs: &Self) -> Self;
    fn sub(&self, rhs: &Self) -> Self;
    fn mul(&self, rhs: &Self) -> Self;
    fn div(&self, rhs: &Self) -> Self;
    fn neg(&self) -> Self;

    /// `c * self` for a plain constant `c`.
    fn scale(&self, c: f64) -> Self;

    /// `self += c * rhs`; the workhorse of basis-function summations.
    fn add_scaled_assign(&mut self, rhs: &Self, c: f64);

    fn sqrt(&self) -> Self;

    /// Chain rule through a univariate function `f` with Taylor data
    /// `f = [f(u0), f'(u0), f''(u0)]` at `u0 = u.value()`.
    ///
    /// `f[2]` must be the true second derivative of the composed function
    /// for the Hessian to be exact; callers composing a basis-derivative
    /// table therefore supply the table shifted by one order.
    fn compose(f: &[f64; 3], u: &Self) -> Self;

    fn zero() -> Self {
        Self::constant(0.0)
    }
}

impl Scalar for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }
    #[inline]
    fn var(v: f64, _i: usize, _dim: AdDim) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn add(&self, rhs: &Self) -> Self {
        self + rhs
    }
    #[inline]
    fn sub(&self, rhs: &Self) -> Self {
        self - rhs
    }
    #[inline]
    fn mul(&self, rhs: &Self) -> Self {
        self * rhs
    }
    #[inline]
    fn div(&self, rhs: &Self) -> Self {
        self / rhs
    }
    #[inline]
    fn neg(&self) -> Self {
        -self
    }
    #[inline]
    fn scale(&self, c: f64) -> Self {
        c * self
    }
    #[inline]
    fn add_scaled_assign(&mut self, rhs: &Self, c: f64) {
        *self += c * rhs;
    }
    #[inline]
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    #[inline]
    fn compose(f: &[f64; 3], _u: &Self) -> Self {
        f[0]
    }
}

/// Value plus dense gradient over the active variable set.
#[derive(Debug, Clone, PartialEq)]
pub struct Grad {
    pub v: f64,
    pub g: Vec<f64>,
}

impl Grad {
    #[inline]
    fn n(&self) -> usize {
        self.g.len()
    }
}

impl Scalar for Grad {
    fn constant(v: f64) -> Self {
        Grad { v, g: Vec::new() }
    }

    fn var(v: f64, i: usize, dim: AdDim) -> Self {
        let mut g = vec![0.0; dim.0];
        g[i] = 1.0;
        Grad { v, g }
    }

    #[inline]
    fn value(&self) -> f64 {
        self.v
    }

    fn add(&self, rhs: &Self) -> Self {
        let mut out = promote(self, rhs);
        out.v = self.v + rhs.v;
        out
    }

    fn sub(&self, rhs: &Self) -> Self {
        let mut out = promote_neg(self, rhs);
        out.v = self.v - rhs.v;
        out
    }

    fn mul(&self, rhs: &Self) -> Self {
        let n = self.n().max(rhs.n());
        let mut g = vec![0.0; n];
        for (gi, a) in g.iter_mut().zip(self.g.iter()) {
            *gi += a * rhs.v;
        }
        for (gi, b) in g.iter_mut().zip(rhs.g.iter()) {
            *gi += b * self.v;
        }
        Grad { v: self.v * rhs.v, g }
    }

    fn div(&self, rhs: &Self) -> Self {
        let v = self.v / rhs.v;
        let n = self.n().max(rhs.n());
        let inv = 1.0 / rhs.v;
        let mut g = vec![0.0; n];
        for (gi, a) in g.iter_mut().zip(self.g.iter()) {
            *gi += a * inv;
        }
        for (gi, b) in g.iter_mut().zip(rhs.g.iter()) {
            *gi -= v * inv * b;
        }
        Grad { v, g }
    }

    fn neg(&self) -> Self {
        Grad {
            v: -self.v,
            g: self.g.iter().map(|x| -x).collect(),
        }
    }

    fn scale(&self, c: f64) -> Self {
        Grad {
            v: c * self.v,
            g: self.g.iter().map(|x| c * x).collect(),
        }
    }

    fn add_scaled_assign(&mut self, rhs: &Self, c: f64) {
        self.v += c * rhs.v;
        if self.g.len() < rhs.g.len() {
            self.g.resize(rhs.g.len(), 0.0);
        }
        for (gi, b) in self.g.iter_mut().zip(rhs.g.iter()) {
            *gi += c * b;
        }
    }

    fn sqrt(&self) -> Self {
        let v = self.v.sqrt();
        let c = 0.5 / v;
        Grad {
            v,
            g: self.g.iter().map(|x| c * x).collect(),
        }
    }

    fn compose(f: &[f64; 3], u: &Self) -> Self {
        Grad {
            v: f[0],
            g: u.g.iter().map(|x| f[1] * x).collect(),
        }
    }
}

/// Widen a constant-sized gradient (`g` empty for constants) to the larger
/// of two operand sizes and pre-fill with `a + b`.
fn promote(a: &Grad, b: &Grad) -> Grad {
    let n = a.n().max(b.n());
    let mut g = vec![0.0; n];
    for (gi, x) in g.iter_mut().zip(a.g.iter()) {
        *gi += x;
    }
    for (gi, x) in g.iter_mut().zip(b.g.iter()) {
        *gi += x;
    }
    Grad { v: 0.0, g }
}

fn promote_neg(a: &Grad, b: &Grad) -> Grad {
    let n = a.n().max(b.n());
    let mut g = vec![0.0; n];
    for (gi, x) in g.iter_mut().zip(a.g.iter()) {
        *gi += x;
    }
    for (gi, x) in g.iter_mut().zip(b.g.iter()) {
        *gi -= x;
    }
    Grad { v: 0.0, g }
}

/// Value, gradient and packed symmetric Hessian over the active set.
///
/// The Hessian stores the lower triangle row-major: entry `(i, j)` with
/// `i >= j` lives at [`tri`]`(i, j)`. Constants carry empty buffers and are
/// widened on contact with seeded values.
#[derive(Debug, Clone, PartialEq)]
pub struct Hess {
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl Hess {
    #[inline]
    fn n(&self) -> usize {
        self.g.len()
    }

    fn widened(n: usize) -> Hess {
        Hess {
            v: 0.0,
            g: vec![0.0; n],
            h: vec![0.0; tri_len(n)],
        }
    }
}

impl Scalar for Hess {
    fn constant(v: f64) -> Self {
        Hess {
            v,
            g: Vec::new(),
            h: Vec::new(),
        }
    }

    fn var(v: f64, i: usize, dim: AdDim) -> Self {
        let mut out = Hess::widened(dim.0);
        out.v = v;
        out.g[i] = 1.0;
        out
    }

    #[inline]
    fn value(&self) -> f64 {
        self.v
    }

    fn add(&self, rhs: &Self) -> Self {
        let mut out = Hess::widened(self.n().max(rhs.n()));
        out.v = self.v + rhs.v;
        axpy(&mut out.g, 1.0, &self.g);
        axpy(&mut out.g, 1.0, &rhs.g);
        axpy(&mut out.h, 1.0, &self.h);
        axpy(&mut out.h, 1.0, &rhs.h);
        out
    }

    fn sub(&self, rhs: &Self) -> Self {
        let mut out = Hess::widened(self.n().max(rhs.n()));
        out.v = self.v - rhs.v;
        axpy(&mut out.g, 1.0, &self.g);
        axpy(&mut out.g, -1.0, &rhs.g);
        axpy(&mut out.h, 1.0, &self.h);
        axpy(&mut out.h, -1.0, &rhs.h);
        out
    }

    fn mul(&self, rhs: &Self) -> Self {
        let n = self.n().max(rhs.n());
        let mut out = Hess::widened(n);
        out.v = self.v * rhs.v;
        axpy(&mut out.g, rhs.v, &self.g);
        axpy(&mut out.g, self.v, &rhs.g);
        axpy(&mut out.h, rhs.v, &self.h);
        axpy(&mut out.h, self.v, &rhs.h);
        outer_sym_add(&mut out.h, &self.g, &rhs.g);
        out
    }

    fn div(&self, rhs: &Self) -> Self {
        let n = self.n().max(rhs.n());
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        let mut out = Hess::widened(n);
        out.v = v;
        // g = (a.g - v * b.g) / b.v
        axpy(&mut out.g, inv, &self.g);
        axpy(&mut out.g, -v * inv, &rhs.g);
        // h = (a.h - v * b.h - sym(out.g, b.g)) / b.v
        axpy(&mut out.h, inv, &self.h);
        axpy(&mut out.h, -v * inv, &rhs.h);
        let cg = out.g.clone();
        outer_sym_add_scaled(&mut out.h, &cg, &rhs.g, -inv);
        out
    }

    fn neg(&self) -> Self {
        Hess {
            v: -self.v,
            g: self.g.iter().map(|x| -x).collect(),
            h: self.h.iter().map(|x| -x).collect(),
        }
    }

    fn scale(&self, c: f64) -> Self {
        Hess {
            v: c * self.v,
            g: self.g.iter().map(|x| c * x).collect(),
            h: self.h.iter().map(|x| c * x).collect(),
        }
    }

    fn add_scaled_assign(&mut self, rhs: &Self, c: f64) {
        self.v += c * rhs.v;
        if self.g.len() < rhs.g.len() {
            let n = rhs.g.len();
            self.g.resize(n, 0.0);
            self.h.resize(tri_len(n), 0.0);
        }
        axpy(&mut self.g, c, &rhs.g);
        axpy(&mut self.h, c, &rhs.h);
    }

    fn sqrt(&self) -> Self {
        let v = self.v.sqrt();
        let inv = 1.0 / v;
        let mut out = Hess::widened(self.n());
        out.v = v;
        axpy(&mut out.g, 0.5 * inv, &self.g);
        axpy(&mut out.h, 0.5 * inv, &self.h);
        let cg = out.g.clone();
        outer_sym_add_scaled(&mut out.h, &cg, &cg, -0.5 * inv);
        out
    }

    fn compose(f: &[f64; 3], u: &Self) -> Self {
        let mut out = Hess::widened(u.n());
        out.v = f[0];
        axpy(&mut out.g, f[1], &u.g);
        axpy(&mut out.h, f[1], &u.h);
        outer_sym_add_scaled(&mut out.h, &u.g, &u.g, 0.5 * f[2]);
        out
    }
}

#[inline]
fn axpy(dst: &mut [f64], c: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += c * s;
    }
}

/// `h += a (x) b + b (x) a` restricted to the packed lower triangle.
#[inline]
fn outer_sym_add(h: &mut [f64], a: &[f64], b: &[f64]) {
    outer_sym_add_scaled(h, a, b, 1.0);
}

#[inline]
fn outer_sym_add_scaled(h: &mut [f64], a: &[f64], b: &[f64], c: f64) {
    let na = a.len();
    let nb = b.len();
    let n = na.max(nb);
    let mut k = 0;
    for i in 0..n {
        let ai = if i < na { a[i] } else { 0.0 };
        let bi = if i < nb { b[i] } else { 0.0 };
        let row = &mut h[k..k + i + 1];
        if ai != 0.0 {
            for (j, hij) in row.iter_mut().enumerate().take(nb.min(i + 1)) {
                *hij += c * ai * b[j];
            }
        }
        if bi != 0.0 {
            for (j, hij) in row.iter_mut().enumerate().take(na.min(i + 1)) {
                *hij += c * bi * a[j];
            }
        }
        k += i + 1;
    }
}

/// Small vector helpers shared by the geometric kernels.
pub mod vec3 {
    use super::Scalar;

    pub fn dot<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> S {
        let mut out = a[0].mul(&b[0]);
        out = out.add(&a[1].mul(&b[1]));
        out.add(&a[2].mul(&b[2]))
    }

    pub fn cross<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> [S; 3] {
        [
            a[1].mul(&b[2]).sub(&a[2].mul(&b[1])),
            a[2].mul(&b[0]).sub(&a[0].mul(&b[2])),
            a[0].mul(&b[1]).sub(&a[1].mul(&b[0])),
        ]
    }

    pub fn norm<S: Scalar>(a: &[S; 3]) -> S {
        dot(a, a).sqrt()
    }

    pub fn sub<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> [S; 3] {
        [a[0].sub(&b[0]), a[1].sub(&b[1]), a[2].sub(&b[2])]
    }

    pub fn add<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> [S; 3] {
        [a[0].add(&b[0]), a[1].add(&b[1]), a[2].add(&b[2])]
    }

    pub fn scale<S: Scalar>(a: &[S; 3], c: &S) -> [S; 3] {
        [a[0].mul(c), a[1].mul(c), a[2].mul(c)]
    }

    pub fn zero<S: Scalar>() -> [S; 3] {
        [S::zero(), S::zero(), S::zero()]
    }
}
