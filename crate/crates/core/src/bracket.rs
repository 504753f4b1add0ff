//! Bracket generation of the noise directions.
//!
//! Starting from the forced directions `g_l = a_l gamma_{k_l}`, the sets
//! `A_{n+1} = A_n ∪ { Btilde(h, g_l) }` are grown at a fixed truncation and the
//! dimension of their span is tracked with an orthonormal basis. Only diagonal
//! noise (one basis function per channel) is supported.

use num_integer::Integer;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::spectral::{ModeIndex, ProductWorkspace, SpectralField, TruncationSpec, BASIS_NORM_SQ};

/// Relative tolerance deciding whether a candidate adds a new direction.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedModeSet {
    modes: Vec<ModeIndex>,
    amplitudes: Vec<f64>,
}

impl ForcedModeSet {
    pub fn new(modes: Vec<ModeIndex>, amplitudes: Vec<f64>) -> Result<Self> {
        if modes.len() != amplitudes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} modes but {} amplitudes",
                modes.len(),
                amplitudes.len()
            )));
        }
        for (i, k) in modes.iter().enumerate() {
            if k.is_zero() {
                return Err(Error::ZeroMode);
            }
            if modes[..i].contains(k) {
                return Err(Error::DuplicateMode(*k));
            }
        }
        if let Some(a) = amplitudes.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "noise amplitude must be positive, got {a}"
            )));
        }
        Ok(Self { modes, amplitudes })
    }

    /// All amplitudes equal to one.
    pub fn unit(modes: Vec<ModeIndex>) -> Result<Self> {
        let n = modes.len();
        Self::new(modes, vec![1.0; n])
    }

    /// No noise at all.
    pub fn empty() -> Self {
        Self {
            modes: Vec::new(),
            amplitudes: Vec::new(),
        }
    }

    pub fn modes(&self) -> &[ModeIndex] {
        &self.modes
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn channels(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Energy input `B_0 = sum_l ||g_l||^2 = 2 pi^2 sum_l a_l^2`.
    pub fn energy_input(&self) -> f64 {
        BASIS_NORM_SQ * self.amplitudes.iter().map(|a| a * a).sum::<f64>()
    }

    /// Same modes with amplitudes rescaled so that `B_0` equals `target`.
    pub fn with_energy_input(&self, target: f64) -> Result<Self> {
        let scale = (target / self.energy_input()).sqrt();
        Self::new(self.modes.clone(), self.amplitudes.iter().map(|a| a * scale).collect())
    }

    /// The noise directions `g_l` as fields.
    pub fn directions(&self, trunc: TruncationSpec) -> Result<Vec<SpectralField>> {
        self.modes
            .iter()
            .zip(&self.amplitudes)
            .map(|(k, a)| SpectralField::make(trunc, &[(*k, *a)]))
            .collect()
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::InvalidArgument("forced mode set is empty".into()));
        }
        Ok(())
    }
}

/// A1: at least two forced modes with different Euclidean lengths.
pub fn check_condition_a1(z0: &ForcedModeSet) -> bool {
    let first = match z0.modes.first() {
        Some(k) => k.norm_sq(),
        None => return false,
    };
    z0.modes.iter().any(|k| k.norm_sq() != first)
}

/// A2: the forced modes generate `Z^2` as a group.
pub fn check_condition_a2(z0: &ForcedModeSet) -> bool {
    invariant_factors(z0.modes()) == (1, 1)
}

// ---------------------------------------------------------------------------
// Integer lattices

/// Smith invariant factors `(d1, d2)` of the `2 x n` matrix whose columns are
/// the given vectors, via determinantal divisors: `d1` is the gcd of all
/// entries and `d1 d2` the gcd of all 2x2 minors. Zero entries mark a rank
/// deficiency.
pub fn invariant_factors(gens: &[ModeIndex]) -> (i64, i64) {
    let d1 = gens.iter().fold(0i64, |g, k| g.gcd(&(k.k1 as i64)).gcd(&(k.k2 as i64)));
    let mut minors = 0i64;
    for (i, a) in gens.iter().enumerate() {
        for b in &gens[i + 1..] {
            minors = minors.gcd(&a.cross(*b));
        }
    }
    if d1 == 0 {
        (0, 0)
    } else {
        (d1, minors / d1)
    }
}

/// Subgroup of `Z^2` in Hermite form: generated by `(a, b)` and `(0, c)` with
/// `a >= 0`, `c >= 0` and `0 <= b < c` whenever `c > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    a: i64,
    b: i64,
    c: i64,
}

impl Lattice {
    pub fn generated_by(gens: &[ModeIndex]) -> Self {
        let mut first = (0i64, 0i64);
        let mut c = 0i64;
        for k in gens {
            let mut v = (k.k1 as i64, k.k2 as i64);
            while v.0 != 0 {
                let q = first.0 / v.0;
                first = (first.0 - q * v.0, first.1 - q * v.1);
                std::mem::swap(&mut first, &mut v);
            }
            c = c.gcd(&v.1);
        }
        if first.0 < 0 {
            first = (-first.0, -first.1);
        }
        if first.0 == 0 {
            // everything lies on the k2 axis
            c = c.gcd(&first.1);
            first = (0, 0);
        }
        if c > 0 {
            first.1 = first.1.rem_euclid(c);
        }
        Self {
            a: first.0,
            b: first.1,
            c,
        }
    }

    pub fn rank(&self) -> usize {
        (self.a != 0) as usize + (self.c != 0) as usize
    }

    /// `[Z^2 : L]`, zero for rank-deficient lattices.
    pub fn index(&self) -> i64 {
        self.a * self.c
    }

    pub fn contains(&self, k: ModeIndex) -> bool {
        let (x, y) = (k.k1 as i64, k.k2 as i64);
        let rem = if self.a == 0 {
            if x != 0 {
                return false;
            }
            y
        } else {
            if x % self.a != 0 {
                return false;
            }
            y - (x / self.a) * self.b
        };
        if self.c == 0 {
            rem == 0
        } else {
            rem % self.c == 0
        }
    }

    /// Lagrange-Gauss reduced generators.
    pub fn reduced_basis(&self) -> Vec<ModeIndex> {
        let mut gens: Vec<(i64, i64)> = Vec::new();
        if self.a != 0 {
            gens.push((self.a, self.b));
        }
        if self.c != 0 {
            gens.push((0, self.c));
        }
        if gens.len() == 2 {
            let dot = |p: (i64, i64), q: (i64, i64)| p.0 * q.0 + p.1 * q.1;
            let (mut u, mut v) = (gens[0], gens[1]);
            if dot(u, u) > dot(v, v) {
                std::mem::swap(&mut u, &mut v);
            }
            loop {
                let num = dot(u, v);
                let den = dot(u, u);
                // nearest integer to num/den
                let q = Ratio::new(num, den).round().to_integer();
                v = (v.0 - q * u.0, v.1 - q * u.1);
                if dot(v, v) >= dot(u, u) {
                    break;
                }
                std::mem::swap(&mut u, &mut v);
            }
            gens = vec![u, v];
        }
        gens.into_iter()
            .map(|(x, y)| ModeIndex::new(x as i32, y as i32))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Closed-form brackets of basis functions

type Q = Ratio<i64>;

#[derive(Debug, Clone, Copy, PartialEq)]
struct GaussQ {
    re: Q,
    im: Q,
}

impl GaussQ {
    fn new(re: Q, im: Q) -> Self {
        Self { re, im }
    }
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
    fn scale(self, s: Q) -> Self {
        Self::new(self.re * s, self.im * s)
    }
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }
}

/// `gamma_k` as a combination of `e^{ik.x}` and `e^{-ik.x}`.
fn exponential_expansion(k: ModeIndex) -> [(ModeIndex, GaussQ); 2] {
    let half = Q::new(1, 2);
    let zero = Q::from_integer(0);
    if k.is_positive() {
        // sin = (e_k - e_{-k}) / 2i
        [(k, GaussQ::new(zero, -half)), (k.neg(), GaussQ::new(zero, half))]
    } else {
        [(k, GaussQ::new(half, zero)), (k.neg(), GaussQ::new(half, zero))]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormBracket {
    /// Exact real-basis coefficients of the nonzero terms.
    pub terms: Vec<(ModeIndex, Ratio<i64>)>,
    /// The same expansion projected onto the truncation.
    pub field: SpectralField,
    /// Modes of the expansion that fall outside the truncation.
    pub dropped: Vec<ModeIndex>,
}

/// `Btilde(gamma_j, gamma_k)` in closed form.
///
/// On exponentials, `Btilde(e_p, e_q) = (p x q)(|q|^-2 - |p|^-2) e_{p+q}`, so
/// the bracket of two basis functions lives on `j + k` and `j - k` and vanishes
/// when the modes are collinear or of equal length.
pub fn closed_form_mode_bracket(j: ModeIndex, k: ModeIndex, trunc: TruncationSpec) -> Result<ClosedFormBracket> {
    if j.is_zero() || k.is_zero() {
        return Err(Error::ZeroMode);
    }
    let mut acc: Vec<(ModeIndex, GaussQ)> = Vec::new();
    for (p, alpha) in exponential_expansion(j) {
        for (q, beta) in exponential_expansion(k) {
            let cross = p.cross(q);
            let (np, nq) = (p.norm_sq(), q.norm_sq());
            if cross == 0 || np == nq {
                continue;
            }
            let factor = Q::new(cross * (np - nq), np * nq);
            let m = p.add(q);
            if !m.is_positive() {
                // conjugate half is implied by reality
                continue;
            }
            let term = alpha.mul(beta).scale(factor);
            match acc.iter_mut().find(|(mm, _)| *mm == m) {
                Some((_, c)) => *c = c.add(term),
                None => acc.push((m, term)),
            }
        }
    }
    let mut terms = Vec::new();
    let mut dropped = Vec::new();
    let mut field = SpectralField::zeros(trunc);
    acc.sort_by_key(|(m, _)| *m);
    for (m, c) in acc {
        let sin_coeff = c.im * Q::from_integer(-2);
        let cos_coeff = c.re * Q::from_integer(2);
        for (mode, value) in [(m, sin_coeff), (m.neg(), cos_coeff)] {
            if value == Q::from_integer(0) {
                continue;
            }
            terms.push((mode, value));
            match trunc.index_of(mode) {
                Some(i) => field.coeffs_mut()[i] = *value.numer() as f64 / *value.denom() as f64,
                None => dropped.push(mode),
            }
        }
    }
    Ok(ClosedFormBracket { terms, field, dropped })
}

// ---------------------------------------------------------------------------
// Span growth and classification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    Full,
    Case1,
    Case2,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketReport {
    pub truncation_radius: usize,
    pub truncated_dimension: usize,
    /// `dim span A_1, dim span A_2, ...`
    pub span_dims: Vec<usize>,
    /// Depth `n` (1-based) with `dim A_n = dim A_{n+1}`.
    pub saturated_at: Option<usize>,
    pub classification: Classification,
    pub degenerate_basis: Option<Vec<ModeIndex>>,
    pub subgroup_generators: Option<Vec<ModeIndex>>,
    /// Modes carrying weight in the final span.
    pub span_support: Vec<ModeIndex>,
    pub condition_a1: bool,
    pub condition_a2: bool,
}

impl BracketReport {
    pub fn final_dimension(&self) -> usize {
        self.span_dims.last().copied().unwrap_or(0)
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Incrementally maintained orthonormal basis (coefficient inner product).
#[derive(Debug, Default)]
pub struct OrthonormalBasis {
    vectors: Vec<Vec<f64>>,
}

impl OrthonormalBasis {
    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Adds the component of `v` orthogonal to the current span if it is
    /// larger than `RANK_TOL` relative to `|v|`; returns the new unit vector.
    pub fn try_add(&mut self, v: &[f64]) -> Option<Vec<f64>> {
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.try_add_scaled(v, norm0)
    }

    /// As [`try_add`](Self::try_add), with the tolerance taken relative to
    /// `scale` instead of `|v|`. Candidates that are round-off residue of an
    /// exactly vanishing bracket are rejected this way.
    pub fn try_add_scaled(&mut self, v: &[f64], scale: f64) -> Option<Vec<f64>> {
        let norm0 = scale;
        if norm0 == 0.0 || v.iter().all(|x| *x == 0.0) {
            return None;
        }
        let mut r: Vec<f64> = v.iter().map(|x| x / norm0).collect();
        for _ in 0..2 {
            for q in &self.vectors {
                let d: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
                for (ri, qi) in r.iter_mut().zip(q) {
                    *ri -= d * qi;
                }
            }
        }
        let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nr <= RANK_TOL {
            return None;
        }
        r.iter_mut().for_each(|x| *x /= nr);
        self.vectors.push(r.clone());
        Some(r)
    }
}

/// Grows `span A_n` until two consecutive dimensions agree or `max_depth`
/// levels have been formed. Brackets of one level are evaluated in parallel
/// and merged in a fixed order.
pub fn generate_bracket_spans(z0: &ForcedModeSet, trunc: TruncationSpec, max_depth: usize) -> Result<BracketReport> {
    z0.check_nonempty()?;
    if max_depth == 0 {
        return Err(Error::InvalidArgument("max_depth must be positive".into()));
    }
    for k in z0.modes() {
        if !trunc.contains(*k) {
            return Err(Error::OutOfTruncation {
                mode: *k,
                radius: trunc.radius,
            });
        }
    }
    let dirs: Vec<Vec<f64>> = z0
        .directions(trunc)?
        .into_iter()
        .map(SpectralField::into_coeffs)
        .collect();
    let mut basis = OrthonormalBasis::default();
    let mut frontier: Vec<Vec<f64>> = dirs.iter().filter_map(|g| basis.try_add(g)).collect();
    let mut span_dims = vec![basis.dim()];
    let mut saturated_at = None;
    while span_dims.len() < max_depth {
        let pairs: Vec<(usize, usize)> = (0..frontier.len())
            .flat_map(|h| (0..dirs.len()).map(move |g| (h, g)))
            .collect();
        let candidates = exec::map_indexed(pairs.len(), Execution::Parallel, |i| {
            let (h, g) = pairs[i];
            let mut ws = ProductWorkspace::new(trunc);
            let mut out = vec![0.0; trunc.len()];
            ws.bracket_into(&frontier[h], &dirs[g], &mut out);
            // frontier vectors are unit; the bracket scales with |g|
            (out, l2(&dirs[g]))
        });
        frontier = candidates
            .iter()
            .filter_map(|(c, scale)| basis.try_add_scaled(c, *scale))
            .collect();
        span_dims.push(basis.dim());
        let n = span_dims.len();
        if span_dims[n - 1] == span_dims[n - 2] {
            saturated_at = Some(n - 1);
            break;
        }
    }
    let full = saturated_at.is_some() && basis.dim() == trunc.len();
    let span_support = trunc
        .modes()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| basis.vectors.iter().map(|q| q[*i] * q[*i]).sum::<f64>() > RANK_TOL)
        .map(|(_, k)| k)
        .collect();
    Ok(BracketReport {
        truncation_radius: trunc.radius,
        truncated_dimension: trunc.len(),
        span_dims,
        saturated_at,
        classification: if full {
            Classification::Full
        } else {
            Classification::Indeterminate
        },
        degenerate_basis: None,
        subgroup_generators: None,
        span_support,
        condition_a1: check_condition_a1(z0),
        condition_a2: check_condition_a2(z0),
    })
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn all_collinear(modes: &[ModeIndex]) -> bool {
    modes.iter().all(|a| modes.iter().all(|b| a.cross(*b) == 0))
}

fn all_equal_length(modes: &[ModeIndex]) -> bool {
    modes.windows(2).all(|w| w[0].norm_sq() == w[1].norm_sq())
}

/// Assigns Full / Case1 / Case2 / Indeterminate. A degenerate case is only
/// reported when the numerically saturated span has exactly the dimension
/// the geometry predicts.
pub fn classify_degeneracy(report: &BracketReport, z0: &ForcedModeSet, trunc: TruncationSpec) -> BracketReport {
    let mut out = report.clone();
    out.degenerate_basis = None;
    out.subgroup_generators = None;
    let saturated = report.saturated_at.is_some();
    let dim = report.final_dimension();
    if saturated && dim == trunc.len() {
        out.classification = Classification::Full;
        return out;
    }
    out.classification = Classification::Indeterminate;
    if !saturated {
        return out;
    }
    let modes = z0.modes();
    if all_collinear(modes) || all_equal_length(modes) {
        if dim == modes.len() {
            out.classification = Classification::Case1;
            let mut b = modes.to_vec();
            b.sort();
            out.degenerate_basis = Some(b);
        }
        return out;
    }
    let lattice = Lattice::generated_by(modes);
    if lattice.rank() == 2 && lattice.index() > 1 {
        // the truncation can cut the span short of every lattice mode, so
        // only confinement to the lattice is required
        let inside: Vec<ModeIndex> = trunc.modes().into_iter().filter(|k| lattice.contains(*k)).collect();
        if report.span_support.iter().all(|k| lattice.contains(*k)) {
            out.classification = Classification::Case2;
            out.degenerate_basis = Some(inside);
            out.subgroup_generators = Some(lattice.reduced_basis());
        }
    }
    out
}

/// Spans and classification in one call.
pub fn analyze(z0: &ForcedModeSet, trunc: TruncationSpec, max_depth: usize) -> Result<BracketReport> {
    let report = generate_bracket_spans(z0, trunc, max_depth)?;
    Ok(classify_degeneracy(&report, z0, trunc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::symmetrized_bracket;

    fn m(k1: i32, k2: i32) -> ModeIndex {
        ModeIndex::new(k1, k2)
    }

    fn set(modes: &[(i32, i32)]) -> ForcedModeSet {
        ForcedModeSet::unit(modes.iter().map(|&(a, b)| m(a, b)).collect()).unwrap()
    }

    fn four_direction() -> ForcedModeSet {
        set(&[(1, 0), (-1, 0), (1, 1), (-1, -1)])
    }

    #[test]
    fn condition_a1() {
        assert!(check_condition_a1(&four_direction()));
        assert!(!check_condition_a1(&set(&[(1, 0), (0, 1), (-1, 0), (0, -1)])));
        assert!(!check_condition_a1(&set(&[(2, 0)])));
    }

    #[test]
    fn condition_a2() {
        assert!(check_condition_a2(&four_direction()));
        assert!(!check_condition_a2(&set(&[(2, 0), (0, 2)])));
        assert!(!check_condition_a2(&set(&[(1, 0)])));
        assert_eq!(invariant_factors(&[m(2, 0), m(0, 2)]), (2, 2));
        assert_eq!(invariant_factors(&[m(2, 0), m(0, 3)]), (1, 6));
    }

    #[test]
    fn lattice_membership_matches_brute_force() {
        // brute force: all integer combinations with small coefficients
        let gens = [m(2, 1), m(0, 3), m(4, -1)];
        let lat = Lattice::generated_by(&gens);
        assert_eq!(lat.index(), invariant_factors(&gens).0 * invariant_factors(&gens).1);
        let mut reach = std::collections::HashSet::new();
        for a in -6..=6 {
            for b in -6..=6 {
                for c in -6..=6 {
                    reach.insert((2 * a + 4 * c, a + 3 * b - c));
                }
            }
        }
        for x in -4..=4 {
            for y in -4..=4 {
                assert_eq!(lat.contains(m(x, y)), reach.contains(&(x, y)), "({x},{y})");
            }
        }
        let rb = lat.reduced_basis();
        assert_eq!(rb.len(), 2);
        assert_eq!(rb[0].cross(rb[1]).abs(), lat.index());
    }

    #[test]
    fn closed_form_zero_cases() {
        let tr = TruncationSpec::new(3);
        let col = closed_form_mode_bracket(m(1, 0), m(2, 0), tr).unwrap();
        assert!(col.terms.is_empty());
        let eq = closed_form_mode_bracket(m(1, 0), m(0, 1), tr).unwrap();
        assert!(eq.terms.is_empty());
    }

    #[test]
    fn closed_form_matches_pseudospectral() {
        let tr = TruncationSpec::new(3);
        let cf = closed_form_mode_bracket(m(1, 0), m(1, 1), tr).unwrap();
        assert!(cf.dropped.is_empty());
        for (k, _) in &cf.terms {
            let p = if k.is_positive() { *k } else { k.neg() };
            assert!(p == m(2, 1) || p == m(0, 1));
        }
        let ps = symmetrized_bracket(
            &SpectralField::basis(tr, m(1, 0)).unwrap(),
            &SpectralField::basis(tr, m(1, 1)).unwrap(),
        )
        .unwrap();
        assert!(cf.field.max_abs_diff(&ps) <= 1e-10);
        assert!(cf.field.norm() > 0.1);
    }

    #[test]
    fn closed_form_flags_dropped_modes() {
        let tr = TruncationSpec::new(2);
        let cf = closed_form_mode_bracket(m(2, 1), m(1, 0), tr).unwrap();
        assert!(!cf.dropped.is_empty());
        let ps = symmetrized_bracket(
            &SpectralField::basis(tr, m(2, 1)).unwrap(),
            &SpectralField::basis(tr, m(1, 0)).unwrap(),
        )
        .unwrap();
        assert!(cf.field.max_abs_diff(&ps) <= 1e-10);
    }

    /// Independent span count: Gaussian elimination with full pivoting on
    /// every member of A_n, enumerated explicitly without the incremental
    /// frontier trick.
    fn brute_force_dims(z0: &ForcedModeSet, tr: TruncationSpec, depth: usize) -> Vec<usize> {
        fn rank(rows: &[Vec<f64>]) -> usize {
            let mut a: Vec<Vec<f64>> = rows.to_vec();
            let ncols = a.first().map_or(0, |r| r.len());
            let mut r = 0;
            for c in 0..ncols {
                let piv = (r..a.len()).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()));
                let Some(p) = piv else { break };
                if a[p][c].abs() < 1e-9 {
                    continue;
                }
                a.swap(r, p);
                for i in 0..a.len() {
                    if i != r {
                        let f = a[i][c] / a[r][c];
                        let row = a[r].clone();
                        a[i].iter_mut().zip(&row).for_each(|(x, y)| *x -= f * y);
                    }
                }
                r += 1;
            }
            r
        }
        let gs: Vec<SpectralField> = z0.directions(tr).unwrap();
        let mut level: Vec<SpectralField> = gs.clone();
        let mut all: Vec<Vec<f64>> = level.iter().map(|f| f.coeffs().to_vec()).collect();
        let mut dims = vec![rank(&all)];
        for _ in 1..depth {
            let mut next = Vec::new();
            for h in &level {
                for g in &gs {
                    let b = symmetrized_bracket(h, g).unwrap();
                    if b.norm() > 1e-9 * h.norm() * g.norm() {
                        next.push(b);
                    }
                }
            }
            all.extend(next.iter().map(|f| f.coeffs().to_vec()));
            dims.push(rank(&all));
            level = next;
            if level.len() > 400 {
                break;
            }
        }
        dims
    }

    #[test]
    fn span_growth_agrees_with_brute_force() {
        let tr = TruncationSpec::new(2);
        let z0 = four_direction();
        let report = generate_bracket_spans(&z0, tr, 12).unwrap();
        let brute = brute_force_dims(&z0, tr, 4);
        for (a, b) in report.span_dims.iter().zip(&brute) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn four_direction_loses_axis_mode_at_radius_two() {
        // new directions are brackets against a forced mode g, so (2,0) = g + h
        // with |g| != |h| forces h in {(3,0), (3,-1)}, outside the box
        let tr = TruncationSpec::new(2);
        let r = analyze(&four_direction(), tr, 20).unwrap();
        assert_eq!(r.final_dimension(), tr.len() - 2);
        assert!(!r.span_support.contains(&m(2, 0)));
        assert!(!r.span_support.contains(&m(-2, 0)));
        assert_eq!(r.classification, Classification::Indeterminate);
    }

    #[test]
    fn four_direction_saturates_full() {
        for k in [3, 4] {
            let tr = TruncationSpec::new(k);
            let r = analyze(&four_direction(), tr, 20).unwrap();
            assert_eq!(r.classification, Classification::Full, "K={k}: {:?}", r.span_dims);
            assert_eq!(r.final_dimension(), tr.len());
            assert!(r.span_dims.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn case1_equal_length() {
        let tr = TruncationSpec::new(3);
        let z0 = set(&[(1, 0), (0, 1), (-1, 0), (0, -1)]);
        let r = analyze(&z0, tr, 12).unwrap();
        assert_eq!(r.span_dims, vec![4, 4]);
        assert_eq!(r.saturated_at, Some(1));
        assert_eq!(r.classification, Classification::Case1);
        assert_eq!(r.degenerate_basis.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn singleton_self_annihilates() {
        let r = analyze(&set(&[(1, 0)]), TruncationSpec::new(3), 12).unwrap();
        assert_eq!(r.span_dims, vec![1, 1]);
        assert_eq!(r.classification, Classification::Case1);
    }

    #[test]
    fn case2_even_lattice() {
        // the four-direction set scaled by 2; at radius 6 the even modes form
        // a radius-3 box, where the unscaled set is full
        let tr = TruncationSpec::new(6);
        let z0 = set(&[(2, 0), (-2, 0), (2, 2), (-2, -2)]);
        let r = analyze(&z0, tr, 20).unwrap();
        assert_eq!(r.classification, Classification::Case2, "{:?}", r.span_dims);
        let basis = r.degenerate_basis.clone().unwrap();
        assert!(basis.iter().all(|k| k.k1 % 2 == 0 && k.k2 % 2 == 0));
        assert_eq!(basis.len(), 48);
        assert_eq!(r.final_dimension(), 48);
        assert!(r.span_support.iter().all(|k| k.k1 % 2 == 0 && k.k2 % 2 == 0));
        let gens = r.subgroup_generators.clone().unwrap();
        assert_eq!(gens[0].cross(gens[1]).abs(), 4);
    }

    #[test]
    fn indeterminate_when_depth_exhausted() {
        let tr = TruncationSpec::new(3);
        let r = analyze(&four_direction(), tr, 2).unwrap();
        assert_eq!(r.classification, Classification::Indeterminate);
        assert_eq!(r.saturated_at, None);
    }

    #[test]
    fn forced_set_validation() {
        assert!(ForcedModeSet::new(vec![m(1, 0), m(1, 0)], vec![1.0, 1.0]).is_err());
        assert!(ForcedModeSet::new(vec![m(1, 0)], vec![0.0]).is_err());
        assert!(ForcedModeSet::new(vec![m(0, 0)], vec![1.0]).is_err());
        let z = four_direction().with_energy_input(1.0).unwrap();
        assert!((z.energy_input() - 1.0).abs() < 1e-14);
    }
}
