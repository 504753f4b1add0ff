//! Truncated mean-zero fields on the torus `[-pi, pi]^2`.
//!
//! Fields are stored as real coefficients over the basis
//! `gamma_k = sin(k.x)` for `k` in the upper half plane (`k2 > 0`, or `k2 = 0`
//! and `k1 > 0`) and `gamma_k = cos(k.x)` for `k` in the lower half plane. The
//! basis is left unnormalised: every `gamma_k` has squared `L^2` norm
//! [`BASIS_NORM_SQ`] `= 2 pi^2`, and every norm or inner product below carries
//! that factor explicitly.
//!
//! Products are computed pseudospectrally. With dealiasing on, the collocation
//! grid has at least `3K + 1` points per side, so the Galerkin projection of a
//! product of two band-`K` fields is exact up to round-off.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng::CounterRng;

/// Squared `L^2(T^2)` norm of a single basis function.
pub const BASIS_NORM_SQ: f64 = 2.0 * PI * PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeIndex {
    pub k1: i32,
    pub k2: i32,
}

impl ModeIndex {
    pub const fn new(k1: i32, k2: i32) -> Self {
        Self { k1, k2 }
    }

    /// Upper half plane: the sine modes.
    pub fn is_positive(self) -> bool {
        self.k2 > 0 || (self.k2 == 0 && self.k1 > 0)
    }

    pub fn is_zero(self) -> bool {
        self.k1 == 0 && self.k2 == 0
    }

    pub fn neg(self) -> Self {
        Self::new(-self.k1, -self.k2)
    }

    pub fn norm_sq(self) -> i64 {
        let (a, b) = (self.k1 as i64, self.k2 as i64);
        a * a + b * b
    }

    pub fn max_norm(self) -> u32 {
        self.k1.unsigned_abs().max(self.k2.unsigned_abs())
    }

    /// `j x k = j1 k2 - j2 k1`.
    pub fn cross(self, other: Self) -> i64 {
        self.k1 as i64 * other.k2 as i64 - self.k2 as i64 * other.k1 as i64
    }

    pub fn add(self, other: Self) -> Self {
        Self::new(self.k1 + other.k1, self.k2 + other.k2)
    }
}

impl fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.k1, self.k2)
    }
}

/// Square (max-norm) truncation `max(|k1|, |k2|) <= radius`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub radius: usize,
    pub dealias: bool,
}

impl TruncationSpec {
    pub fn new(radius: usize) -> Self {
        assert!(radius >= 1, "truncation radius must be positive");
        Self { radius, dealias: true }
    }

    pub fn with_dealias(mut self, dealias: bool) -> Self {
        self.dealias = dealias;
        self
    }

    /// Number of modes, `(2K+1)^2 - 1`.
    pub fn len(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, k: ModeIndex) -> bool {
        !k.is_zero() && k.max_norm() as usize <= self.radius
    }

    /// Position of `k` in the canonical lexicographic order on `(k1, k2)`.
    pub fn index_of(&self, k: ModeIndex) -> Option<usize> {
        if !self.contains(k) {
            return None;
        }
        let r = self.radius as i64;
        let side = 2 * r + 1;
        let lin = (k.k1 as i64 + r) * side + (k.k2 as i64 + r);
        let centre = r * side + r;
        Some(if lin < centre { lin } else { lin - 1 } as usize)
    }

    /// Canonical mode enumeration (lexicographic on `(k1, k2)`, zero excluded).
    pub fn modes(&self) -> Vec<ModeIndex> {
        let r = self.radius as i32;
        let mut out = Vec::with_capacity(self.len());
        for k1 in -r..=r {
            for k2 in -r..=r {
                if k1 != 0 || k2 != 0 {
                    out.push(ModeIndex::new(k1, k2));
                }
            }
        }
        out
    }

    pub fn check_same(&self, other: &TruncationSpec) -> Result<()> {
        if self.radius != other.radius {
            return Err(Error::TruncationMismatch {
                left: self.radius,
                right: other.radius,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralField {
    trunc: TruncationSpec,
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn zeros(trunc: TruncationSpec) -> Self {
        Self {
            trunc,
            coeffs: vec![0.0; trunc.len()],
        }
    }

    pub fn from_coeffs(trunc: TruncationSpec, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != trunc.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} coefficients for radius {}, got {}",
                trunc.len(),
                trunc.radius,
                coeffs.len()
            )));
        }
        if let Some(x) = coeffs.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("coefficient {x}")));
        }
        Ok(Self { trunc, coeffs })
    }

    /// Unchecked constructor for hot loops; the caller guarantees the length.
    pub(crate) fn from_raw(trunc: TruncationSpec, coeffs: Vec<f64>) -> Self {
        debug_assert_eq!(coeffs.len(), trunc.len());
        Self { trunc, coeffs }
    }

    /// Field with the listed coefficients and zeros elsewhere.
    pub fn make(trunc: TruncationSpec, entries: &[(ModeIndex, f64)]) -> Result<Self> {
        let mut field = Self::zeros(trunc);
        let mut seen = vec![false; trunc.len()];
        for &(k, value) in entries {
            if k.is_zero() {
                return Err(Error::ZeroMode);
            }
            let idx = trunc.index_of(k).ok_or(Error::OutOfTruncation {
                mode: k,
                radius: trunc.radius,
            })?;
            if seen[idx] {
                return Err(Error::DuplicateMode(k));
            }
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("coefficient of {k}: {value}")));
            }
            seen[idx] = true;
            field.coeffs[idx] = value;
        }
        Ok(field)
    }

    /// `gamma_k` itself.
    pub fn basis(trunc: TruncationSpec, k: ModeIndex) -> Result<Self> {
        Self::make(trunc, &[(k, 1.0)])
    }

    pub fn trunc(&self) -> TruncationSpec {
        self.trunc
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn coeff(&self, k: ModeIndex) -> f64 {
        self.trunc.index_of(k).map_or(0.0, |i| self.coeffs[i])
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|x| x.is_finite())
    }

    /// Modes with a nonzero coefficient.
    pub fn support(&self) -> Vec<ModeIndex> {
        self.trunc
            .modes()
            .into_iter()
            .zip(&self.coeffs)
            .filter(|(_, c)| **c != 0.0)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            trunc: self.trunc,
            coeffs: self.coeffs.iter().map(|x| a * x).collect(),
        }
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &Self) -> Self {
        debug_assert_eq!(self.coeffs.len(), other.coeffs.len());
        Self {
            trunc: self.trunc,
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(x, y)| x + a * y).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.axpy(-1.0, other)
    }

    /// Plain coefficient dot product (no basis factor).
    pub fn coeff_dot(&self, other: &Self) -> f64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum()
    }

    /// `L^2(T^2)` inner product.
    pub fn inner(&self, other: &Self) -> f64 {
        BASIS_NORM_SQ * self.coeff_dot(other)
    }

    /// `L^2` norm, `||w||`.
    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.inner(self)
    }

    /// `||(-Laplacian)^{s/2} w||`.
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        sobolev_norm(self, s)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Re-expresses the field on another truncation, dropping modes that do
    /// not fit.
    pub fn project(&self, target: TruncationSpec) -> Self {
        let mut out = Self::zeros(target);
        for (k, c) in self.trunc.modes().into_iter().zip(&self.coeffs) {
            if let Some(i) = target.index_of(k) {
                out.coeffs[i] = *c;
            }
        }
        out
    }

    /// Complex Fourier coefficient `w_hat(k)` for `w = sum_k w_hat(k) e^{ik.x}`.
    pub fn complex_coeff(&self, k: ModeIndex) -> Complex64 {
        let (kp, sign) = if k.is_positive() { (k, 1.0) } else { (k.neg(), -1.0) };
        let s = self.coeff(kp);
        let c = self.coeff(kp.neg());
        Complex64::new(0.5 * c, -0.5 * s * sign)
    }

    /// Partial derivative along `axis` (0 for x1, 1 for x2).
    pub fn derivative(&self, axis: usize) -> Self {
        let mut out = Self::zeros(self.trunc);
        for (i, k) in self.trunc.modes().into_iter().enumerate() {
            if !k.is_positive() {
                continue;
            }
            let kj = if axis == 0 { k.k1 } else { k.k2 } as f64;
            let hat = self.complex_coeff(k) * Complex64::new(0.0, kj);
            let ineg = self.trunc.index_of(k.neg()).expect("symmetric truncation");
            out.coeffs[i] = -2.0 * hat.im;
            out.coeffs[ineg] = 2.0 * hat.re;
        }
        out
    }

    /// `(-Laplacian)^p` applied mode-wise.
    pub fn neg_laplacian_pow(&self, p: f64) -> Self {
        let mut out = self.clone();
        for (c, k) in out.coeffs.iter_mut().zip(self.trunc.modes()) {
            *c *= (k.norm_sq() as f64).powf(p);
        }
        out
    }

    /// Point evaluation (slow; tests and diagnostics only).
    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        self.trunc
            .modes()
            .into_iter()
            .zip(&self.coeffs)
            .map(|(k, c)| {
                let phase = k.k1 as f64 * x1 + k.k2 as f64 * x2;
                if k.is_positive() {
                    c * phase.sin()
                } else {
                    c * phase.cos()
                }
            })
            .sum()
    }
}

/// Velocity with both components expanded in the same real basis.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub ux: SpectralField,
    pub uy: SpectralField,
}

impl VelocityField {
    pub fn divergence(&self) -> SpectralField {
        self.ux.derivative(0).add(&self.uy.derivative(1))
    }

    pub fn curl(&self) -> SpectralField {
        self.uy.derivative(0).sub(&self.ux.derivative(1))
    }

    pub fn norm(&self) -> f64 {
        (self.ux.norm_sq() + self.uy.norm_sq()).sqrt()
    }
}

pub fn sobolev_norm(w: &SpectralField, s: f64) -> f64 {
    let sum: f64 = w
        .trunc
        .modes()
        .into_iter()
        .zip(&w.coeffs)
        .map(|(k, c)| (k.norm_sq() as f64).powf(s) * c * c)
        .sum();
    (BASIS_NORM_SQ * sum).sqrt()
}

/// Biot-Savart: the divergence-free velocity `u = grad^perp (Laplacian^{-1} w)`
/// with `curl u = w`. For `w = sin(x1)` this gives `u = (0, -cos(x1))`.
pub fn biot_savart(w: &SpectralField) -> VelocityField {
    let t = w.trunc;
    let mut ux = SpectralField::zeros(t);
    let mut uy = SpectralField::zeros(t);
    for (i, k) in t.modes().into_iter().enumerate() {
        if !k.is_positive() {
            continue;
        }
        let ineg = t.index_of(k.neg()).expect("symmetric truncation");
        let hat = w.complex_coeff(k) / k.norm_sq() as f64;
        let hx = hat * Complex64::new(0.0, k.k2 as f64);
        let hy = hat * Complex64::new(0.0, -(k.k1 as f64));
        ux.coeffs[i] = -2.0 * hx.im;
        ux.coeffs[ineg] = 2.0 * hx.re;
        uy.coeffs[i] = -2.0 * hy.im;
        uy.coeffs[ineg] = 2.0 * hy.re;
    }
    VelocityField { ux, uy }
}

// ---------------------------------------------------------------------------
// Pseudospectral transforms

/// One positive mode and where it and its mirror live in the coefficient
/// vector and on the FFT grid.
#[derive(Debug, Clone, Copy)]
struct ModeSlot {
    k1: f64,
    k2: f64,
    k_sq: f64,
    sin_idx: usize,
    cos_idx: usize,
    grid_pos: usize,
    grid_neg: usize,
}

pub(crate) struct Transform {
    n: usize,
    len: usize,
    slots: Vec<ModeSlot>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transform")
            .field("n", &self.n)
            .field("len", &self.len)
            .finish()
    }
}

fn smooth_size(min: usize) -> usize {
    (min..)
        .find(|&n| {
            let mut m = n;
            for p in [2, 3, 5] {
                while m % p == 0 {
                    m /= p;
                }
            }
            m == 1
        })
        .expect("unbounded search")
}

/// Collocation grid side for products at this truncation.
pub fn product_grid_size(trunc: TruncationSpec) -> usize {
    if trunc.dealias {
        smooth_size(3 * trunc.radius + 1)
    } else {
        smooth_size(2 * trunc.radius + 1)
    }
}

/// Grid side on which quartic integrals of band-`K` fields are exact.
pub fn quartic_grid_size(trunc: TruncationSpec) -> usize {
    smooth_size(4 * trunc.radius + 1)
}

impl Transform {
    fn build(trunc: TruncationSpec, n: usize) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let wrap = |k: i32| k.rem_euclid(n as i32) as usize;
        let slots = trunc
            .modes()
            .into_iter()
            .filter(|k| k.is_positive())
            .map(|k| ModeSlot {
                k1: k.k1 as f64,
                k2: k.k2 as f64,
                k_sq: k.norm_sq() as f64,
                sin_idx: trunc.index_of(k).unwrap(),
                cos_idx: trunc.index_of(k.neg()).unwrap(),
                grid_pos: wrap(k.k1) * n + wrap(k.k2),
                grid_neg: wrap(-k.k1) * n + wrap(-k.k2),
            })
            .collect();
        Self {
            n,
            len: trunc.len(),
            slots,
            fwd,
            inv,
        }
    }

    /// Shared, cached transform for `(radius, grid side)`.
    pub(crate) fn get(trunc: TruncationSpec, n: usize) -> Arc<Transform> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Transform>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("transform cache poisoned");
        guard
            .entry((trunc.radius, n))
            .or_insert_with(|| Arc::new(Transform::build(trunc, n)))
            .clone()
    }

    pub(crate) fn for_products(trunc: TruncationSpec) -> Arc<Transform> {
        Self::get(trunc, product_grid_size(trunc))
    }

    pub(crate) fn grid_len(&self) -> usize {
        self.n * self.n
    }

    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process(buf);
        transpose(buf, n);
        plan.process(buf);
        transpose(buf, n);
    }

    /// Inverse transform of `a + i b`, where the spectra of `a` and `b` are
    /// obtained from `wa`, `wb` by the mode-wise complex multipliers `ma`,
    /// `mb`. The result holds `a` in the real part and `b` in the imaginary
    /// part of each grid point.
    fn packed_inverse(
        &self,
        wa: &[f64],
        ma: impl Fn(&ModeSlot) -> Complex64,
        wb: &[f64],
        mb: impl Fn(&ModeSlot) -> Complex64,
        buf: &mut Vec<Complex64>,
    ) {
        buf.clear();
        buf.resize(self.grid_len(), Complex64::new(0.0, 0.0));
        let i = Complex64::new(0.0, 1.0);
        for s in &self.slots {
            let ha = ma(s) * Complex64::new(0.5 * wa[s.cos_idx], -0.5 * wa[s.sin_idx]);
            let hb = mb(s) * Complex64::new(0.5 * wb[s.cos_idx], -0.5 * wb[s.sin_idx]);
            buf[s.grid_pos] = ha + i * hb;
            buf[s.grid_neg] = ha.conj() + i * hb.conj();
        }
        self.fft2(buf, true);
    }

    /// Forward transform of the real grid functions held in the real and
    /// imaginary parts of `buf`; writes the Galerkin projections of both
    /// into `out_re`, `out_im` (real-basis coefficients), after applying the
    /// mode-wise real multipliers.
    fn packed_forward(
        &self,
        buf: &mut [Complex64],
        mult_re: impl Fn(&ModeSlot) -> f64,
        out_re: &mut [f64],
        mult_im: impl Fn(&ModeSlot) -> f64,
        out_im: Option<&mut [f64]>,
    ) {
        self.fft2(buf, false);
        let scale = 1.0 / self.grid_len() as f64;
        let half_i = Complex64::new(0.0, 0.5);
        let mut out_im = out_im;
        for s in &self.slots {
            let zp = buf[s.grid_pos] * scale;
            let zn = buf[s.grid_neg].conj() * scale;
            let p = (zp + zn) * 0.5;
            let m = mult_re(s);
            out_re[s.sin_idx] = -2.0 * p.im * m;
            out_re[s.cos_idx] = 2.0 * p.re * m;
            if let Some(o) = out_im.as_deref_mut() {
                let q = (zp - zn) * (-half_i);
                let m = mult_im(s);
                o[s.sin_idx] = -2.0 * q.im * m;
                o[s.cos_idx] = 2.0 * q.re * m;
            }
        }
    }

    /// Grid values of `w` (real part only).
    pub(crate) fn to_grid(&self, w: &[f64], buf: &mut Vec<Complex64>) {
        let zero = |_: &ModeSlot| Complex64::new(0.0, 0.0);
        let one = |_: &ModeSlot| Complex64::new(1.0, 0.0);
        self.packed_inverse(w, one, w, zero, buf);
    }
}

fn canonical_le(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}

fn transpose(buf: &mut [Complex64], n: usize) {
    for r in 0..n {
        for c in (r + 1)..n {
            buf.swap(r * n + c, c * n + r);
        }
    }
}

#[inline]
fn vel_x(s: &ModeSlot) -> Complex64 {
    Complex64::new(0.0, s.k2 / s.k_sq)
}
#[inline]
fn vel_y(s: &ModeSlot) -> Complex64 {
    Complex64::new(0.0, -s.k1 / s.k_sq)
}
#[inline]
fn d_x(s: &ModeSlot) -> Complex64 {
    Complex64::new(0.0, s.k1)
}
#[inline]
fn d_y(s: &ModeSlot) -> Complex64 {
    Complex64::new(0.0, s.k2)
}
#[inline]
fn unit(_: &ModeSlot) -> f64 {
    1.0
}

/// Reusable scratch for the pseudospectral products along one trajectory.
pub struct ProductWorkspace {
    transform: Arc<Transform>,
    a: Vec<Complex64>,
    b: Vec<Complex64>,
    c: Vec<Complex64>,
    d: Vec<Complex64>,
}

impl fmt::Debug for ProductWorkspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProductWorkspace")
            .field("transform", &self.transform)
            .finish()
    }
}

impl ProductWorkspace {
    pub fn new(trunc: TruncationSpec) -> Self {
        Self {
            transform: Transform::for_products(trunc),
            a: Vec::new(),
            b: Vec::new(),
            c: Vec::new(),
            d: Vec::new(),
        }
    }

    /// Galerkin projection of `B(Ku, v) = (Ku) . grad v`, written into `out`.
    pub fn advect_into(&mut self, u: &[f64], v: &[f64], out: &mut [f64]) {
        let t = &self.transform;
        t.packed_inverse(u, vel_x, u, vel_y, &mut self.a);
        t.packed_inverse(v, d_x, v, d_y, &mut self.b);
        for (p, q) in self.a.iter_mut().zip(&self.b) {
            *p = Complex64::new(p.re * q.re + p.im * q.im, 0.0);
        }
        t.packed_forward(&mut self.a, unit, out, unit, None);
    }

    /// `B(Kw, w)`.
    pub fn nonlinear_into(&mut self, w: &[f64], out: &mut [f64]) {
        self.advect_into(w, w, out)
    }

    /// `-B(Ku, w) - B(Kw, u)`.
    /// The arguments are put in a canonical order first, so the result is
    /// bit-for-bit symmetric.
    pub fn bracket_into(&mut self, u: &[f64], w: &[f64], out: &mut [f64]) {
        let (u, w) = if canonical_le(u, w) { (u, w) } else { (w, u) };
        let t = &self.transform;
        t.packed_inverse(u, vel_x, u, vel_y, &mut self.a);
        t.packed_inverse(w, d_x, w, d_y, &mut self.b);
        t.packed_inverse(w, vel_x, w, vel_y, &mut self.c);
        t.packed_inverse(u, d_x, u, d_y, &mut self.d);
        for i in 0..self.a.len() {
            let (ku, gw, kw, gu) = (self.a[i], self.b[i], self.c[i], self.d[i]);
            let p = ku.re * gw.re + ku.im * gw.im + kw.re * gu.re + kw.im * gu.im;
            self.a[i] = Complex64::new(-p, 0.0);
        }
        t.packed_forward(&mut self.a, unit, out, unit, None);
    }

    /// Transpose (in the coefficient inner product) of `xi -> bracket(w, xi)`,
    /// applied to `v`: `B(Kw, v) - (-Laplacian)^{-1}(d1 v d2 w - d2 v d1 w)`.
    pub fn bracket_transpose_into(&mut self, w: &[f64], v: &[f64], out: &mut [f64]) {
        let t = &self.transform;
        t.packed_inverse(w, vel_x, w, vel_y, &mut self.a);
        t.packed_inverse(v, d_x, v, d_y, &mut self.b);
        t.packed_inverse(w, d_x, w, d_y, &mut self.c);
        for i in 0..self.a.len() {
            let (kw, gv, gw) = (self.a[i], self.b[i], self.c[i]);
            let adv = kw.re * gv.re + kw.im * gv.im;
            let jac = gv.re * gw.im - gv.im * gw.re;
            self.a[i] = Complex64::new(adv, jac);
        }
        let mut tmp = vec![0.0; t.len];
        t.packed_forward(&mut self.a, unit, out, |s| 1.0 / s.k_sq, Some(&mut tmp));
        for (o, j) in out.iter_mut().zip(&tmp) {
            *o -= j;
        }
    }
}

/// Galerkin projection of `B(Kw, w) = (Kw) . grad w`.
pub fn nonlinear_term(w: &SpectralField) -> SpectralField {
    let mut ws = ProductWorkspace::new(w.trunc);
    let mut out = SpectralField::zeros(w.trunc);
    ws.nonlinear_into(&w.coeffs, &mut out.coeffs);
    out
}

/// Galerkin projection of `B(Ku, v)`.
pub fn advect(u: &SpectralField, v: &SpectralField) -> Result<SpectralField> {
    u.trunc.check_same(&v.trunc)?;
    let mut ws = ProductWorkspace::new(u.trunc);
    let mut out = SpectralField::zeros(u.trunc);
    ws.advect_into(&u.coeffs, &v.coeffs, &mut out.coeffs);
    Ok(out)
}

/// Symmetrised nonlinearity `-B(Ku, w) - B(Kw, u)`.
pub fn symmetrized_bracket(u: &SpectralField, w: &SpectralField) -> Result<SpectralField> {
    u.trunc.check_same(&w.trunc)?;
    let mut ws = ProductWorkspace::new(u.trunc);
    let mut out = SpectralField::zeros(u.trunc);
    ws.bracket_into(&u.coeffs, &w.coeffs, &mut out.coeffs);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ladyzhenskaya constant

/// `||w||_{L^4}^2`, integrated exactly on a grid of side at least `4K + 1`.
pub fn l4_norm_sq(w: &SpectralField) -> f64 {
    let t = Transform::get(w.trunc, quartic_grid_size(w.trunc));
    let mut buf = Vec::new();
    t.to_grid(&w.coeffs, &mut buf);
    let cell = (2.0 * PI / t.n as f64).powi(2);
    let quartic: f64 = buf.iter().map(|z| z.re.powi(4)).sum::<f64>() * cell;
    quartic.sqrt()
}

/// `||w||_{L^4}^2 / (||w||_1 ||w||)`; zero for the zero field.
pub fn ladyzhenskaya_ratio(w: &SpectralField) -> f64 {
    let denom = w.sobolev_norm(1.0) * w.norm();
    if denom == 0.0 {
        0.0
    } else {
        l4_norm_sq(w) / denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct C0Estimate {
    /// Largest ratio seen: a lower bound for the true constant.
    pub lower_bound: f64,
    pub argmax_sample: usize,
    pub samples: usize,
}

const HILL_CLIMB_STEPS: usize = 8;

/// One candidate of the c0 search, a pure function of `(seed, index)`.
///
/// Index 0 is the single mode `gamma_(1,0)`. Every other index draws Gaussian
/// coefficients on a random sub-box `max(|k1|,|k2|) <= R` with spectral slope
/// `|k|^{-p}`, `p` uniform in `[0, 3]`. Each candidate is then refined by
/// [`HILL_CLIMB_STEPS`] greedy random perturbations (relative size 0.1),
/// keeping only improvements.
fn c0_candidate(trunc: TruncationSpec, seed: u64, index: usize) -> f64 {
    let modes = trunc.modes();
    let mut rng = CounterRng::new(seed, index as u64);
    let mut coeffs = vec![0.0; trunc.len()];
    if index == 0 {
        coeffs[trunc.index_of(ModeIndex::new(1, 0)).unwrap()] = 1.0;
    } else {
        let cutoff = 1 + (rng.uniform() * trunc.radius as f64) as u32;
        let slope = 3.0 * rng.uniform();
        for (c, k) in coeffs.iter_mut().zip(&modes) {
            let z = rng.normal();
            if k.max_norm() <= cutoff {
                *c = z * (k.norm_sq() as f64).powf(-0.5 * slope);
            }
        }
    }
    let eval = |c: &[f64]| {
        ladyzhenskaya_ratio(&SpectralField {
            trunc,
            coeffs: c.to_vec(),
        })
    };
    let mut best = eval(&coeffs);
    let scale = 0.1 * coeffs.iter().map(|x| x * x).sum::<f64>().sqrt() / (trunc.len() as f64).sqrt();
    for _ in 0..HILL_CLIMB_STEPS {
        let trial: Vec<f64> = coeffs.iter().map(|c| c + scale * rng.normal()).collect();
        let r = eval(&trial);
        if r > best {
            best = r;
            coeffs = trial;
        }
    }
    best
}

/// Lower-bound estimate of the Ladyzhenskaya constant `c0` in
/// `||w||_{L^4}^2 <= c0 ||w||_1 ||w||` at this truncation: the running
/// maximum over `samples` candidates. Non-decreasing in `samples`.
pub fn estimate_ladyzhenskaya_c0(trunc: TruncationSpec, samples: usize, seed: u64) -> Result<C0Estimate> {
    if samples == 0 {
        return Err(Error::InvalidArgument("c0 estimate needs at least one sample".into()));
    }
    let values = exec::map_indexed(samples, exec::Execution::Parallel, |i| c0_candidate(trunc, seed, i));
    let (argmax, best) = values.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
    );
    Ok(C0Estimate {
        lower_bound: best,
        argmax_sample: argmax,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(k: usize) -> TruncationSpec {
        TruncationSpec::new(k)
    }

    fn random_field(trunc: TruncationSpec, seed: u64) -> SpectralField {
        let mut rng = CounterRng::new(seed, 0);
        let coeffs = (0..trunc.len()).map(|_| rng.normal()).collect();
        SpectralField::from_coeffs(trunc, coeffs).unwrap()
    }

    #[test]
    fn canonical_order_and_index() {
        let tr = t(3);
        let modes = tr.modes();
        assert_eq!(modes.len(), 48);
        for (i, k) in modes.iter().enumerate() {
            assert_eq!(tr.index_of(*k), Some(i));
        }
        assert!(modes.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(tr.index_of(ModeIndex::new(0, 0)), None);
        assert_eq!(tr.index_of(ModeIndex::new(4, 0)), None);
    }

    #[test]
    fn half_plane_tags() {
        assert!(ModeIndex::new(1, 0).is_positive());
        assert!(!ModeIndex::new(-1, 0).is_positive());
        assert!(ModeIndex::new(-3, 1).is_positive());
        assert!(!ModeIndex::new(3, -1).is_positive());
    }

    #[test]
    fn make_field_cases() {
        let f = SpectralField::make(t(3), &[(ModeIndex::new(1, 0), 1.0)]).unwrap();
        assert_eq!(f.support(), vec![ModeIndex::new(1, 0)]);
        assert_eq!(f.coeff(ModeIndex::new(1, 0)), 1.0);
        let z = SpectralField::make(t(3), &[]).unwrap();
        assert_eq!(z.norm(), 0.0);
        assert!(matches!(
            SpectralField::make(t(3), &[(ModeIndex::new(4, 0), 1.0)]),
            Err(Error::OutOfTruncation { .. })
        ));
        assert!(matches!(
            SpectralField::make(t(3), &[(ModeIndex::new(1, 0), 1.0), (ModeIndex::new(1, 0), 2.0)]),
            Err(Error::DuplicateMode(_))
        ));
        assert!(matches!(
            SpectralField::make(t(3), &[(ModeIndex::new(1, 0), f64::NAN)]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn sobolev_examples() {
        let g10 = SpectralField::basis(t(3), ModeIndex::new(1, 0)).unwrap();
        assert_relative_eq!(g10.sobolev_norm(0.0), 4.442882938158366, epsilon = 1e-12);
        assert_relative_eq!(g10.sobolev_norm(0.0), g10.norm(), epsilon = 1e-15);
        let g11 = SpectralField::basis(t(3), ModeIndex::new(1, 1)).unwrap();
        assert_relative_eq!(
            g11.sobolev_norm(1.0),
            2f64.sqrt() * g11.sobolev_norm(0.0),
            epsilon = 1e-14
        );
        assert_eq!(SpectralField::zeros(t(3)).sobolev_norm(-1.5), 0.0);
    }

    #[test]
    fn norm_matches_grid_quadrature() {
        // independent check of the basis normalisation: midpoint rule on a
        // fine grid is exact for trigonometric polynomials of low degree
        let w = random_field(t(2), 3);
        let n = 32;
        let h = 2.0 * PI / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = w.eval(-PI + i as f64 * h, -PI + j as f64 * h);
                acc += v * v * h * h;
            }
        }
        assert_relative_eq!(acc.sqrt(), w.norm(), epsilon = 1e-10);
    }

    #[test]
    fn biot_savart_single_mode() {
        let w = SpectralField::basis(t(3), ModeIndex::new(1, 0)).unwrap();
        let u = biot_savart(&w);
        assert_eq!(u.ux.norm(), 0.0);
        // uy = -cos(x1), i.e. coefficient -1 on the cosine mode (-1,0)
        assert_eq!(u.uy.coeff(ModeIndex::new(-1, 0)), -1.0);
        assert_eq!(u.uy.support(), vec![ModeIndex::new(-1, 0)]);
        assert_relative_eq!(u.norm(), w.norm(), epsilon = 1e-14);
        let x = (0.3, -1.1);
        assert_relative_eq!(u.uy.eval(x.0, x.1), -(x.0).cos(), epsilon = 1e-14);
    }

    #[test]
    fn biot_savart_inverts_curl() {
        for seed in 0..5 {
            let w = random_field(t(4), seed);
            let u = biot_savart(&w);
            assert!(u.curl().max_abs_diff(&w) <= 1e-12 * w.coeffs.iter().fold(0.0f64, |a, b| a.max(b.abs())));
            assert!(u.divergence().coeffs.iter().all(|x| x.abs() < 1e-13));
        }
        let z = biot_savart(&SpectralField::zeros(t(2)));
        assert_eq!(z.norm(), 0.0);
    }

    #[test]
    fn nonlinear_single_mode_vanishes() {
        for k in t(3).modes() {
            let w = SpectralField::basis(t(3), k).unwrap();
            let b = nonlinear_term(&w);
            assert!(b.coeffs.iter().all(|x| x.abs() < 1e-13), "mode {k}");
        }
    }

    #[test]
    fn nonlinear_conserves_energy_and_enstrophy() {
        for seed in 0..10 {
            let w = random_field(t(3), 100 + seed);
            let b = nonlinear_term(&w);
            let n = w.norm();
            assert!(b.inner(&w).abs() <= 1e-10 * n.powi(3));
            let inv_lap = w.neg_laplacian_pow(-1.0);
            assert!(b.inner(&inv_lap).abs() <= 1e-10 * n.powi(3));
        }
    }

    #[test]
    fn nonlinear_matches_direct_quadrature() {
        // (Kw).grad w evaluated pointwise from closed-form velocity and
        // gradient, then projected by brute-force quadrature on a fine grid
        let tr = t(2);
        let w = random_field(tr, 9);
        let b = nonlinear_term(&w);
        let u = biot_savart(&w);
        let (wx, wy) = (w.derivative(0), w.derivative(1));
        let n = 24;
        let h = 2.0 * PI / n as f64;
        for (idx, k) in tr.modes().into_iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let (x, y) = (i as f64 * h, j as f64 * h);
                    let val = u.ux.eval(x, y) * wx.eval(x, y) + u.uy.eval(x, y) * wy.eval(x, y);
                    let phase = k.k1 as f64 * x + k.k2 as f64 * y;
                    let basis = if k.is_positive() { phase.sin() } else { phase.cos() };
                    acc += val * basis * h * h;
                }
            }
            assert!((acc / BASIS_NORM_SQ - b.coeffs[idx]).abs() < 1e-11, "mode {k}");
        }
    }

    #[test]
    fn two_equal_length_modes_give_zero() {
        let w = SpectralField::make(t(3), &[(ModeIndex::new(1, 0), 1.0), (ModeIndex::new(0, 1), 1.0)]).unwrap();
        let b = nonlinear_term(&w);
        for (k, c) in t(3).modes().into_iter().zip(b.coeffs()) {
            let allowed = [
                ModeIndex::new(1, 1),
                ModeIndex::new(1, -1),
                ModeIndex::new(-1, -1),
                ModeIndex::new(-1, 1),
            ];
            if !allowed.contains(&k) {
                assert!(c.abs() < 1e-13);
            }
        }
    }

    #[test]
    fn bracket_symmetry_and_diagonal() {
        let tr = t(3);
        let g = SpectralField::basis(tr, ModeIndex::new(1, 0)).unwrap();
        let s = symmetrized_bracket(&g, &g).unwrap();
        assert!(s.coeffs.iter().all(|x| x.abs() < 1e-13));
        let u = random_field(tr, 1);
        let w = random_field(tr, 2);
        let a = symmetrized_bracket(&u, &w).unwrap();
        let b = symmetrized_bracket(&w, &u).unwrap();
        assert_eq!(a, b);
        let diag = symmetrized_bracket(&w, &w).unwrap();
        let nl = nonlinear_term(&w);
        assert!(diag.max_abs_diff(&nl.scaled(-2.0)) < 1e-12);
        assert!(symmetrized_bracket(&u, &SpectralField::zeros(t(2))).is_err());
    }

    #[test]
    fn bracket_of_10_and_11() {
        let tr = t(3);
        let a = SpectralField::basis(tr, ModeIndex::new(1, 0)).unwrap();
        let b = SpectralField::basis(tr, ModeIndex::new(1, 1)).unwrap();
        let s = symmetrized_bracket(&a, &b).unwrap();
        let support: Vec<_> = tr
            .modes()
            .into_iter()
            .zip(s.coeffs())
            .filter(|(_, c)| c.abs() > 1e-12)
            .map(|(k, _)| k)
            .collect();
        assert!(!support.is_empty());
        for k in support {
            let p = if k.is_positive() { k } else { k.neg() };
            assert!(p == ModeIndex::new(2, 1) || p == ModeIndex::new(0, 1), "unexpected {k}");
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let tr = t(3);
        let w = random_field(tr, 4);
        let xi = random_field(tr, 5);
        let v = random_field(tr, 6);
        let mut ws = ProductWorkspace::new(tr);
        let mut lxi = vec![0.0; tr.len()];
        ws.bracket_into(&w.coeffs, &xi.coeffs, &mut lxi);
        let mut ltv = vec![0.0; tr.len()];
        ws.bracket_transpose_into(&w.coeffs, &v.coeffs, &mut ltv);
        let lhs: f64 = lxi.iter().zip(&v.coeffs).map(|(a, b)| a * b).sum();
        let rhs: f64 = ltv.iter().zip(&xi.coeffs).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn l4_of_single_sine_matches_quadrature() {
        // Simpson quadrature of sin^4 over [-pi, pi]^2, independent of the FFT
        let m = 2000;
        let h = 2.0 * PI / m as f64;
        let mut s = 0.0;
        for i in 0..=m {
            let x = -PI + i as f64 * h;
            let wgt = if i == 0 || i == m {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            s += wgt * x.sin().powi(4);
        }
        let one_d = s * h / 3.0;
        let l4_sq = (one_d * 2.0 * PI).sqrt();
        let expected = l4_sq / (BASIS_NORM_SQ.sqrt() * BASIS_NORM_SQ.sqrt());
        let w = SpectralField::basis(t(3), ModeIndex::new(1, 0)).unwrap();
        assert_relative_eq!(ladyzhenskaya_ratio(&w), expected, epsilon = 1e-10);
        assert_relative_eq!(expected, 1.5f64.sqrt() / (2.0 * PI), epsilon = 1e-10);
    }

    #[test]
    fn c0_estimate_monotone_and_guarded() {
        let tr = t(3);
        let a = estimate_ladyzhenskaya_c0(tr, 20, 5).unwrap();
        let b = estimate_ladyzhenskaya_c0(tr, 40, 5).unwrap();
        assert!(b.lower_bound >= a.lower_bound);
        let single = ladyzhenskaya_ratio(&SpectralField::basis(tr, ModeIndex::new(1, 0)).unwrap());
        assert!(a.lower_bound >= single);
        assert!(estimate_ladyzhenskaya_c0(tr, 0, 5).is_err());
    }

    #[test]
    fn derivative_of_sine_is_cosine() {
        let w = SpectralField::basis(t(2), ModeIndex::new(2, 1)).unwrap();
        let dx = w.derivative(0);
        // d/dx1 sin(2x1 + x2) = 2 cos(2x1 + x2) = 2 cos((-2,-1).x)
        assert_eq!(dx.support(), vec![ModeIndex::new(-2, -1)]);
        assert_relative_eq!(dx.coeff(ModeIndex::new(-2, -1)), 2.0);
    }
}
