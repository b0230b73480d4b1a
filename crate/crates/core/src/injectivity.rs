//! Cumulant generating functions of token distributions and numerical tests
//! of their linear independence modulo affine functions.
//!
//! `g_μ(q) = log ∫ e^{⟨q,y⟩} dμ(y)`. Its gradient at `Qx + q` is the softmax
//! mean seen by an attention head, so affine relations between the `g_μ` of
//! several samples produce null directions of the `V`-kernel.

use nalgebra::SymmetricEigen;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, Matrix, Tilted, TokenCloud, Vector};
use crate::error::{ensure_dim, Error, Result};
use crate::flow::Sample;

pub const MAX_DEPTH: usize = 8;
pub const DEFAULT_THRESHOLD: f64 = 1e-8;
/// Strict-inequality tolerance for argmax ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// A token distribution with a closed-form or finite cumulant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeMeasure {
    Discrete {
        points: Vec<Vec<f64>>,
        /// Uniform when absent.
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    /// Uniform on `[−radius, radius]^dim`.
    UniformCube { dim: usize, radius: f64 },
    /// Centered symmetric Laplace, `E e^{⟨q,y⟩} = 1 / (1 − ½ qᵀΣq)`.
    Laplace { covariance: Vec<Vec<f64>> },
    /// `½ N(offset, Σ) + ½ N(−offset, Σ)`.
    GaussianMixtureTwoPoint { offset: Vec<f64>, covariance: Vec<Vec<f64>> },
    Convolve { left: Box<ProbeMeasure>, right: Box<ProbeMeasure> },
    /// Pushforward by `y ↦ y − shift`.
    Translate { measure: Box<ProbeMeasure>, shift: Vec<f64> },
    /// Convolution with `N(0, Σ)`.
    GaussianSmooth { measure: Box<ProbeMeasure>, covariance: Vec<Vec<f64>> },
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let d = rows.len();
    if d == 0 {
        return Err(Error::Invalid(format!("{what}: empty matrix")));
    }
    for r in rows {
        ensure_dim("covariance row", d, r.len())?;
    }
    Ok(Matrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn check_psd(m: &Matrix, what: &str) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Invalid(format!("{what}: not symmetric")));
    }
    let lo = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if lo < -1e-12 * scale {
        return Err(Error::Invalid(format!("{what}: not positive semidefinite (eigenvalue {lo:e})")));
    }
    Ok(())
}

fn quad(m: &Matrix, q: &Vector) -> f64 {
    q.dot(&(m * q))
}

/// `log((e^{u} + e^{−u})/2)` without overflow.
fn log_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

// Series coefficients of log(sinh u / u) in u^{2k}, k = 1..6.
const LOG_SINHC: [f64; 6] = [
    1.0 / 6.0,
    -1.0 / 180.0,
    1.0 / 2835.0,
    -1.0 / 37800.0,
    1.0 / 467775.0,
    -691.0 / 3831077250.0,
];

/// `log(sinh u / u)`, even and smooth through `u = 0`.
pub fn log_sinhc(u: f64) -> f64 {
    let a = u.abs();
    if a < 1e-3 {
        let u2 = a * a;
        LOG_SINHC.iter().rev().fold(0.0, |acc, c| acc * u2 + c) * u2
    } else if a <= 2.0 {
        // sinh(u)/u − 1 = Σ_{k≥1} u^{2k}/(2k+1)!, positive terms
        let u2 = a * a;
        let mut term = 1.0;
        let mut sum = 0.0;
        let mut k = 1.0;
        loop {
            term *= u2 / ((2.0 * k) * (2.0 * k + 1.0));
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
            k += 1.0;
        }
        sum.ln_1p()
    } else {
        a + (-(-2.0 * a).exp_m1()).ln() - std::f64::consts::LN_2 - a.ln()
    }
}

impl ProbeMeasure {
    pub fn discrete(cloud: &TokenCloud) -> Self {
        Self::Discrete {
            points: cloud.points().iter().map(|p| p.iter().copied().collect()).collect(),
            weights: Some(cloud.weights().to_vec()),
        }
    }

    pub fn dirac(point: &[f64]) -> Self {
        Self::Discrete {
            points: vec![point.to_vec()],
            weights: None,
        }
    }

    pub fn convolve(left: ProbeMeasure, right: ProbeMeasure) -> Self {
        Self::Convolve {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn translate(measure: ProbeMeasure, shift: Vec<f64>) -> Self {
        Self::Translate {
            measure: Box::new(measure),
            shift,
        }
    }

    pub fn gaussian_smooth(measure: ProbeMeasure, covariance: Vec<Vec<f64>>) -> Self {
        Self::GaussianSmooth {
            measure: Box::new(measure),
            covariance,
        }
    }

    /// `covariance = scale · I_dim`
    pub fn isotropic(dim: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { scale } else { 0.0 }).collect())
            .collect()
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Discrete { points, .. } => points.first().map_or(0, Vec::len),
            Self::UniformCube { dim, .. } => *dim,
            Self::Laplace { covariance } => covariance.len(),
            Self::GaussianMixtureTwoPoint { offset, .. } => offset.len(),
            Self::Convolve { left, .. } => left.dim(),
            Self::Translate { measure, .. } | Self::GaussianSmooth { measure, .. } => measure.dim(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Self::Convolve { left, right } => 1 + left.depth().max(right.depth()),
            Self::Translate { measure, .. } | Self::GaussianSmooth { measure, .. } => 1 + measure.depth(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() > MAX_DEPTH {
            return Err(Error::Invalid(format!("measure nesting deeper than {MAX_DEPTH}")));
        }
        self.validate_inner()
    }

    fn validate_inner(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::Invalid("measure dimension must be positive".into()));
        }
        match self {
            Self::Discrete { .. } => {
                self.token_cloud()?;
            }
            Self::UniformCube { radius, .. } => {
                if !(*radius > 0.0) || !radius.is_finite() {
                    return Err(Error::Invalid(format!("cube radius must be positive, got {radius}")));
                }
            }
            Self::Laplace { covariance } => check_psd(&matrix_from_rows(covariance, "laplace")?, "laplace covariance")?,
            Self::GaussianMixtureTwoPoint { offset, covariance } => {
                ensure_dim("mixture covariance", d, covariance.len())?;
                if !offset.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("mixture offset".into()));
                }
                check_psd(&matrix_from_rows(covariance, "mixture")?, "mixture covariance")?;
            }
            Self::Convolve { left, right } => {
                ensure_dim("convolution operands", left.dim(), right.dim())?;
                left.validate_inner()?;
                right.validate_inner()?;
            }
            Self::Translate { measure, shift } => {
                ensure_dim("translation", d, shift.len())?;
                if !shift.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("translation".into()));
                }
                measure.validate_inner()?;
            }
            Self::GaussianSmooth { measure, covariance } => {
                ensure_dim("smoothing covariance", d, covariance.len())?;
                check_psd(&matrix_from_rows(covariance, "smoothing")?, "smoothing covariance")?;
                measure.validate_inner()?;
            }
        }
        Ok(())
    }

    fn token_cloud(&self) -> Result<TokenCloud> {
        let Self::Discrete { points, weights } = self else {
            return Err(Error::Unsupported("token cloud of a non-discrete measure"));
        };
        let pts: Vec<Vector> = points.iter().map(|p| Vector::from_column_slice(p)).collect();
        match weights {
            Some(w) => TokenCloud::new(pts, w.clone()),
            None => TokenCloud::uniform(pts),
        }
    }

    /// `g_μ(q)`.
    pub fn cumulant(&self, q: &Vector) -> Result<f64> {
        ensure_dim("cumulant argument", self.dim(), q.len())?;
        match self {
            Self::Discrete { points, weights } => {
                let n = points.len() as f64;
                let w = |i: usize| weights.as_ref().map_or(1.0 / n, |w| w[i]);
                let scores: Vec<f64> = points
                    .iter()
                    .map(|p| p.iter().zip(q.iter()).map(|(a, b)| a * b).sum())
                    .collect();
                let shift = (0..points.len())
                    .filter(|&i| w(i) > 0.0)
                    .map(|i| scores[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..points.len())
                    .filter(|&i| w(i) > 0.0)
                    .map(|i| w(i) * (scores[i] - shift).exp())
                    .sum();
                Ok(shift + total.ln())
            }
            Self::UniformCube { radius, .. } => Ok(q.iter().map(|qi| log_sinhc(radius * qi)).sum()),
            Self::Laplace { covariance } => {
                let s = 0.5 * quad(&matrix_from_rows(covariance, "laplace")?, q);
                if s >= 1.0 {
                    return Err(Error::Domain(format!("½qᵀΣq = {s} ≥ 1")));
                }
                Ok(-(-s).ln_1p())
            }
            Self::GaussianMixtureTwoPoint { offset, covariance } => {
                let u: f64 = offset.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
                Ok(log_cosh(u) + 0.5 * quad(&matrix_from_rows(covariance, "mixture")?, q))
            }
            Self::Convolve { left, right } => Ok(left.cumulant(q)? + right.cumulant(q)?),
            Self::Translate { measure, shift } => {
                let lin: f64 = shift.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
                Ok(measure.cumulant(q)? - lin)
            }
            Self::GaussianSmooth { measure, covariance } => {
                Ok(measure.cumulant(q)? + 0.5 * quad(&matrix_from_rows(covariance, "smoothing")?, q))
            }
        }
    }

    /// `g_{μ,e}(t) = g_μ(t e)`.
    pub fn directional_cumulant(&self, e: &Vector, t: f64) -> Result<f64> {
        self.cumulant(&(e * t))
    }

    /// Largest `r` such that `g_μ` is finite on the ball of radius `r`.
    pub fn domain_radius(&self) -> Result<f64> {
        Ok(match self {
            Self::Laplace { covariance } => {
                let top = SymmetricEigen::new(matrix_from_rows(covariance, "laplace")?).eigenvalues.max();
                if top > 0.0 {
                    (2.0 / top).sqrt()
                } else {
                    f64::INFINITY
                }
            }
            Self::Convolve { left, right } => left.domain_radius()?.min(right.domain_radius()?),
            Self::Translate { measure, .. } | Self::GaussianSmooth { measure, .. } => measure.domain_radius()?,
            _ => f64::INFINITY,
        })
    }

    /// Largest `T` with `g_{μ,e}` finite on `(−T, T)`.
    pub fn domain_radius_along(&self, e: &Vector) -> Result<f64> {
        Ok(match self {
            Self::Laplace { covariance } => {
                let s = 0.5 * quad(&matrix_from_rows(covariance, "laplace")?, e);
                if s > 0.0 {
                    1.0 / s.sqrt()
                } else {
                    f64::INFINITY
                }
            }
            Self::Convolve { left, right } => left.domain_radius_along(e)?.min(right.domain_radius_along(e)?),
            Self::Translate { measure, .. } | Self::GaussianSmooth { measure, .. } => measure.domain_radius_along(e)?,
            _ => f64::INFINITY,
        })
    }

    /// Finite support, when there is one.
    pub fn support(&self) -> Option<Vec<Vector>> {
        match self {
            Self::Discrete { points, .. } => Some(points.iter().map(|p| Vector::from_column_slice(p)).collect()),
            Self::Translate { measure, shift } => {
                let a = Vector::from_column_slice(shift);
                measure.support().map(|s| s.into_iter().map(|y| y - &a).collect())
            }
            Self::Convolve { left, right } => {
                let (l, r) = (left.support()?, right.support()?);
                Some(l.iter().flat_map(|a| r.iter().map(move |b| a + b)).collect())
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum IndependenceMode {
    Weak,
    Strong { direction: Vec<f64> },
}

/// Probe points: `q`-vectors for the weak test, scalars `t` for the strong one.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeGrid {
    Points(Vec<Vector>),
    Line(Vec<f64>),
}

impl ProbeGrid {
    /// Seeded Gaussian cloud of `count` points with standard deviation
    /// `scale`, keeping only points strictly inside the ball of radius
    /// `0.9·limit`.
    pub fn gaussian(dim: usize, count: usize, scale: f64, limit: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cap = 0.9 * limit;
        let mut points = Vec::with_capacity(count);
        while points.len() < count {
            let p = Vector::from_fn(dim, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            });
            if p.norm() < cap {
                points.push(p);
            }
        }
        Self::Points(points)
    }

    /// `count` equispaced values on `[−half_width, half_width]`.
    pub fn line(half_width: f64, count: usize) -> Self {
        let n = count.max(2);
        Self::Line(
            (0..n)
                .map(|i| -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64)
                .collect(),
        )
    }

    /// Default weak grid: `4(N + d + 2)` points at unit scale, clipped to the
    /// common domain.
    pub fn weak_default(measures: &[ProbeMeasure], seed: u64) -> Result<Self> {
        let d = measures.first().map_or(0, ProbeMeasure::dim);
        let limit = measures
            .iter()
            .map(ProbeMeasure::domain_radius)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let scale = 1.0f64.min(limit / 3.0);
        Ok(Self::gaussian(d, 4 * (measures.len() + d + 2), scale, limit, seed))
    }

    /// Default strong grid: 61 points on `|t| ≤ min(3, 0.9·T)` with `T` the
    /// common domain radius along `e`.
    pub fn strong_default(measures: &[ProbeMeasure], e: &Vector) -> Result<Self> {
        let limit = measures
            .iter()
            .map(|m| m.domain_radius_along(e))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        Ok(Self::line(3.0f64.min(0.9 * limit), 61))
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Points(p) => p.len(),
            Self::Line(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Points(p) => {
                let r = p.iter().map(|v| v.norm()).fold(0.0, f64::max);
                format!("{} points, max radius {r:.3e}", p.len())
            }
            Self::Line(t) => {
                let r = t.iter().map(|v| v.abs()).fold(0.0, f64::max);
                format!("{} line points on [-{r:.3e}, {r:.3e}]", t.len())
            }
        }
    }
}

/// Support margins of a finitely supported measure along a direction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeasureDiagnostics {
    /// `h(e) = max ⟨e, y⟩` over the support.
    pub support_max: Option<f64>,
    pub argmax: Option<usize>,
    /// Gap between the largest and second largest `⟨e, y⟩`.
    pub score_gap: Option<f64>,
    pub tie: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndependenceReport {
    pub mode: IndependenceMode,
    pub sigma_min: f64,
    pub threshold: f64,
    pub passed: bool,
    pub grid: String,
    pub diagnostics: Vec<MeasureDiagnostics>,
    /// Why the strong-mode precondition failed, if it did.
    pub precondition: Option<String>,
}

fn directional_diagnostics(m: &ProbeMeasure, e: &Vector) -> MeasureDiagnostics {
    let Some(support) = m.support() else {
        return MeasureDiagnostics {
            support_max: None,
            argmax: None,
            score_gap: None,
            tie: false,
        };
    };
    let scores: Vec<f64> = support.iter().map(|y| e.dot(y)).collect();
    let (argmax, top) = scores
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best });
    let second = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != argmax)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let gap = top - second;
    MeasureDiagnostics {
        support_max: Some(top),
        argmax: Some(argmax),
        score_gap: second.is_finite().then_some(gap),
        tie: second.is_finite() && gap <= TIE_TOLERANCE * top.abs().max(1.0),
    }
}

fn smallest_singular_value(m: &Matrix) -> f64 {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    if m.nrows() < m.ncols() {
        return 0.0;
    }
    sv.min()
}

fn normalize_columns(m: &mut Matrix) {
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
}

/// Smallest singular value of the cumulant design matrix modulo affine
/// functions (weak) or modulo linear functions along `e` (strong). Columns are
/// scaled to unit norm before the affine projection.
pub fn independence_sigma_min(
    measures: &[ProbeMeasure],
    mode: &IndependenceMode,
    grid: &ProbeGrid,
    threshold: f64,
) -> Result<IndependenceReport> {
    let n = measures.len();
    if n == 0 {
        return Err(Error::Invalid("no measures".into()));
    }
    let d = measures[0].dim();
    for m in measures {
        m.validate()?;
        ensure_dim("measure dimension", d, m.dim())?;
    }
    let (sigma_min, diagnostics, precondition) = match (mode, grid) {
        (IndependenceMode::Weak, ProbeGrid::Points(points)) => {
            if points.len() < n + d + 2 {
                return Err(Error::Invalid(format!(
                    "weak grid needs at least {} points, got {}",
                    n + d + 2,
                    points.len()
                )));
            }
            let rows = points.len();
            let mut affine = Matrix::from_element(rows, d + 1, 1.0);
            for (r, p) in points.iter().enumerate() {
                ensure_dim("grid point", d, p.len())?;
                for a in 0..d {
                    affine[(r, a + 1)] = p[a];
                }
            }
            let mut scaled = affine.clone();
            normalize_columns(&mut scaled);
            let sv = scaled.svd(false, false).singular_values;
            if sv.min() <= 1e-10 * sv.max() {
                return Err(Error::Invalid("degenerate grid: affine block is rank deficient".into()));
            }
            let mut g = Matrix::zeros(rows, n);
            for (j, m) in measures.iter().enumerate() {
                for (r, p) in points.iter().enumerate() {
                    g[(r, j)] = m.cumulant(p)?;
                }
            }
            normalize_columns(&mut g);
            let basis = affine.qr().q();
            let projected = &g - &basis * (basis.transpose() * &g);
            let diag = measures
                .iter()
                .map(|_| MeasureDiagnostics {
                    support_max: None,
                    argmax: None,
                    score_gap: None,
                    tie: false,
                })
                .collect();
            (smallest_singular_value(&projected), diag, None)
        }
        (IndependenceMode::Strong { direction }, ProbeGrid::Line(ts)) => {
            ensure_dim("strong direction", d, direction.len())?;
            let e = Vector::from_column_slice(direction);
            let norm = e.norm();
            if !(norm > 0.0) {
                return Err(Error::Invalid("strong direction must be nonzero".into()));
            }
            let e = e / norm;
            if ts.len() < n + 3 {
                return Err(Error::Invalid(format!(
                    "strong grid needs at least {} points, got {}",
                    n + 3,
                    ts.len()
                )));
            }
            let mut g = Matrix::zeros(ts.len(), n + 1);
            for (r, t) in ts.iter().enumerate() {
                g[(r, 0)] = *t;
                for (j, m) in measures.iter().enumerate() {
                    g[(r, j + 1)] = m.directional_cumulant(&e, *t)?;
                }
            }
            if g.column(0).norm() == 0.0 {
                return Err(Error::Invalid("degenerate grid: all t are zero".into()));
            }
            normalize_columns(&mut g);
            let diag: Vec<MeasureDiagnostics> = measures.iter().map(|m| directional_diagnostics(m, &e)).collect();
            let ties: Vec<usize> = diag.iter().enumerate().filter(|(_, x)| x.tie).map(|(j, _)| j).collect();
            let pre = (!ties.is_empty()).then(|| format!("argmax along e is tied for measures {ties:?}"));
            (smallest_singular_value(&g), diag, pre)
        }
        _ => return Err(Error::Invalid("grid kind does not match the independence mode".into())),
    };
    Ok(IndependenceReport {
        mode: mode.clone(),
        sigma_min,
        threshold,
        passed: sigma_min > threshold && precondition.is_none(),
        grid: grid.describe(),
        diagnostics,
        precondition,
    })
}

// B_2, B_4, ..., B_20
const BERNOULLI_EVEN: [f64; 10] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
    43867.0 / 798.0,
    -174611.0 / 330.0,
];

pub const MAX_SERIES_TERMS: usize = BERNOULLI_EVEN.len();

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Coefficient of `u^{2k}` in `log(sinh u / u)`.
pub fn log_sinhc_coefficient(k: usize) -> f64 {
    let b = BERNOULLI_EVEN[k - 1];
    4f64.powi(k as i32) * b / (2.0 * k as f64 * factorial(2 * k))
}

/// Coefficient of `u^{2k}` in `log cosh u`.
pub fn log_cosh_coefficient(k: usize) -> f64 {
    let p = 4f64.powi(k as i32);
    p * (p - 1.0) * BERNOULLI_EVEN[k - 1] / (2.0 * k as f64 * factorial(2 * k))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesFamily {
    /// `Σₖ γₖ (Σᵢ eᵢ^{2k}) s^k t^{2k}`, `s = a²`
    Cube,
    /// `Σₖ (1/k) s^k t^{2k}`, `s = ½ eᵀΣe`
    Laplace,
    /// `Σₖ βₖ s^k t^{2k}` plus a quadratic, `s = ⟨offset, e⟩²`
    Mixture,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesReport {
    pub family: SeriesFamily,
    pub s: Vec<f64>,
    /// First order used; quadratic terms are skipped when Gaussian parts are present.
    pub start: usize,
    pub alpha: Vec<f64>,
    pub min_pairwise_gap: f64,
    /// `Π_{i<j}(s_j − s_i) · Π_j s_j^{start}`, the generalized Vandermonde determinant.
    pub vandermonde: f64,
    pub passed: bool,
}

struct SeriesTerm {
    family: SeriesFamily,
    s: f64,
    start: usize,
    cube_dim: Option<usize>,
}

fn series_term(m: &ProbeMeasure, e: &Vector) -> Result<SeriesTerm> {
    match m {
        ProbeMeasure::UniformCube { dim, radius } => Ok(SeriesTerm {
            family: SeriesFamily::Cube,
            s: radius * radius,
            start: 1,
            cube_dim: Some(*dim),
        }),
        ProbeMeasure::Laplace { covariance } => Ok(SeriesTerm {
            family: SeriesFamily::Laplace,
            s: 0.5 * quad(&matrix_from_rows(covariance, "laplace")?, e),
            start: 1,
            cube_dim: None,
        }),
        ProbeMeasure::GaussianMixtureTwoPoint { offset, covariance } => {
            let a: f64 = offset.iter().zip(e.iter()).map(|(x, y)| x * y).sum();
            let gaussian = covariance.iter().flatten().any(|v| *v != 0.0);
            Ok(SeriesTerm {
                family: SeriesFamily::Mixture,
                s: a * a,
                start: if gaussian { 2 } else { 1 },
                cube_dim: None,
            })
        }
        ProbeMeasure::GaussianSmooth { measure, .. } => {
            let mut inner = series_term(measure, e)?;
            inner.start = inner.start.max(2);
            Ok(inner)
        }
        _ => Err(Error::Unsupported("series independence check")),
    }
}

/// Vandermonde test on families whose directional cumulants are even power
/// series `Σₖ αₖ s_j^k t^{2k}` with common coefficients `αₖ`. Passes when the
/// `s_j` are nonzero and pairwise distinct and `αₖ ≠ 0` for the orders used.
pub fn series_independence_check(family: &[ProbeMeasure], e: &Vector, terms: usize) -> Result<SeriesReport> {
    if family.is_empty() {
        return Err(Error::Invalid("empty family".into()));
    }
    for m in family {
        m.validate()?;
        ensure_dim("series direction", m.dim(), e.len())?;
    }
    let norm = e.norm();
    if !(norm > 0.0) {
        return Err(Error::Invalid("direction must be nonzero".into()));
    }
    let e = e / norm;
    let parsed = family.iter().map(|m| series_term(m, &e)).collect::<Result<Vec<_>>>()?;
    let kind = parsed[0].family;
    if parsed.iter().any(|p| p.family != kind || p.cube_dim != parsed[0].cube_dim) {
        return Err(Error::Unsupported("series check on a mixed family"));
    }
    let start = parsed.iter().map(|p| p.start).max().unwrap();
    let n = parsed.len();
    let needed = terms.max(n);
    if start + needed - 1 > MAX_SERIES_TERMS {
        return Err(Error::Invalid(format!(
            "series check supports orders up to {MAX_SERIES_TERMS}, requested {}",
            start + needed - 1
        )));
    }
    let alpha: Vec<f64> = (start..start + needed)
        .map(|k| match kind {
            SeriesFamily::Cube => log_sinhc_coefficient(k) * e.iter().map(|x| x.powi(2 * k as i32)).sum::<f64>(),
            SeriesFamily::Laplace => 1.0 / k as f64,
            SeriesFamily::Mixture => log_cosh_coefficient(k),
        })
        .collect();
    let s: Vec<f64> = parsed.iter().map(|p| p.s).collect();
    let mut min_gap = f64::INFINITY;
    let mut vandermonde = 1.0;
    for i in 0..n {
        vandermonde *= s[i].powi(start as i32);
        for j in i + 1..n {
            min_gap = min_gap.min((s[j] - s[i]).abs());
            vandermonde *= s[j] - s[i];
        }
    }
    let scale = s.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let distinct = n == 1 || min_gap > TIE_TOLERANCE * scale;
    let nonzero = s.iter().all(|v| v.abs() > TIE_TOLERANCE * scale);
    Ok(SeriesReport {
        family: kind,
        s,
        start,
        passed: distinct && nonzero && alpha.iter().all(|a| *a != 0.0),
        alpha,
        min_pairwise_gap: min_gap,
        vandermonde,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairwiseReport {
    pub min_gap: f64,
    pub scale: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// `(i, p, q, j, r, s)` attaining the minimum.
    pub worst: Option<[usize; 6]>,
}

/// Minimal norm of `(xⁱ_p − xⁱ_q) − (xʲ_r − xʲ_s)` over cloud pairs `i ≠ j`
/// and point pairs `p ≠ q`, `r ≠ s`. The default tolerance is `1e-9` times
/// the largest point norm.
pub fn check_pairwise_difference_condition(clouds: &[TokenCloud], tolerance: Option<f64>) -> Result<PairwiseReport> {
    if clouds.len() < 2 {
        return Err(Error::Invalid("need at least two clouds".into()));
    }
    let d = clouds[0].dim();
    for c in clouds {
        ensure_dim("cloud dimension", d, c.dim())?;
        if c.len() < 2 {
            return Err(Error::Invalid("every cloud needs at least two points".into()));
        }
    }
    let scale = clouds.iter().map(TokenCloud::max_norm).fold(0.0, f64::max);
    let tol = tolerance.unwrap_or(1e-9 * scale);
    let diffs: Vec<Vec<(usize, usize, Vector)>> = clouds
        .iter()
        .map(|c| {
            let pts = c.points();
            let mut out = Vec::new();
            for p in 0..pts.len() {
                for q in 0..pts.len() {
                    if p != q {
                        out.push((p, q, &pts[p] - &pts[q]));
                    }
                }
            }
            out
        })
        .collect();
    let mut best = f64::INFINITY;
    let mut worst = None;
    for i in 0..clouds.len() {
        for j in i + 1..clouds.len() {
            for (p, q, a) in &diffs[i] {
                for (r, s, b) in &diffs[j] {
                    let gap = (a - b).norm();
                    if gap < best {
                        best = gap;
                        worst = Some([i, *p, *q, j, *r, *s]);
                    }
                }
            }
        }
    }
    Ok(PairwiseReport {
        min_gap: best,
        scale,
        tolerance: tol,
        passed: best > tol,
        worst,
    })
}

/// `|Σ pᵢ ⟨e,yᵢ⟩ − max ⟨e,yᵢ⟩|` for `pᵢ ∝ wᵢ e^{s⟨e,yᵢ⟩}`.
pub fn softmax_max_gap(cloud: &TokenCloud, e: &Vector, s: f64) -> Result<f64> {
    ensure_dim("direction", cloud.dim(), e.len())?;
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::Invalid(format!("inverse temperature must be finite and nonnegative, got {s}")));
    }
    let tilted = Tilted::new(&(e * s), cloud);
    let scores: Vec<f64> = cloud.points().iter().map(|y| e.dot(y)).collect();
    let top = scores
        .iter()
        .zip(cloud.weights())
        .filter(|(_, w)| **w > 0.0)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    // summing nonnegative deficits avoids cancellation
    Ok(tilted
        .probs
        .iter()
        .zip(&scores)
        .map(|(p, x)| p * (top - x))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WitnessReport {
    /// Scalar weight of the adjoint on each token (query first) of each
    /// sample; the adjoint itself is this weight times a fixed unit vector.
    pub token_coefficients: Vec<Vec<f64>>,
    /// Largest `‖Σⱼ Cⱼ (ȳⱼ(x₁) − ȳⱼ(x₂))‖` over the probe heads, divided by
    /// `Σⱼ |Cⱼ| (‖ȳⱼ(x₁)‖ + ‖ȳⱼ(x₂)‖)`.
    pub residual: f64,
    pub raw_residual: f64,
}

impl WitnessReport {
    /// Token coefficients stacked sample-major, matching the `V`-kernel layout.
    pub fn stacked(&self) -> Vector {
        Vector::from_iterator(
            self.token_coefficients.iter().map(Vec::len).sum(),
            self.token_coefficients.iter().flatten().copied(),
        )
    }
}

fn token_position(sample: &Sample, x: &Vector) -> Option<usize> {
    let close = |y: &Vector| (y - x).norm() <= 1e-12 * x.norm().max(1.0);
    if close(&sample.input) {
        return Some(0);
    }
    sample.cloud.points().iter().position(close).map(|i| i + 1)
}

/// Builds the adjoint family `m⁽ʲ⁾ = Cⱼ (δ_{x₁} − δ_{x₂})` on the tokens of each
/// sample and evaluates how far the `V`-features cancel on a set of probe heads.
pub fn null_direction_witness(
    samples: &[Sample],
    x1: &Vector,
    x2: &Vector,
    coefficients: &[f64],
    probes: &[AttentionParams],
) -> Result<WitnessReport> {
    ensure_dim("witness coefficients", samples.len(), coefficients.len())?;
    if samples.is_empty() || probes.is_empty() {
        return Err(Error::Invalid("witness needs samples and probe heads".into()));
    }
    if (x1 - x2).norm() == 0.0 {
        return Err(Error::Invalid("witness points must be distinct".into()));
    }
    let mut token_coefficients = Vec::with_capacity(samples.len());
    for (j, s) in samples.iter().enumerate() {
        let (Some(i1), Some(i2)) = (token_position(s, x1), token_position(s, x2)) else {
            return Err(Error::Invalid(format!("sample {j} does not contain both witness points")));
        };
        let mut c = vec![0.0; s.cloud.len() + 1];
        c[i1] += coefficients[j];
        c[i2] -= coefficients[j];
        token_coefficients.push(c);
    }
    let mut residual = 0.0f64;
    let mut raw = 0.0f64;
    for head in probes {
        ensure_dim("probe head", x1.len(), head.dim())?;
        let xi1 = &head.query * x1 + &head.bias;
        let xi2 = &head.query * x2 + &head.bias;
        let mut sum = Vector::zeros(x1.len());
        let mut mass = 0.0;
        for (s, c) in samples.iter().zip(coefficients) {
            let a = Tilted::new(&xi1, &s.cloud).mean;
            let b = Tilted::new(&xi2, &s.cloud).mean;
            mass += c.abs() * (a.norm() + b.norm());
            sum += (a - b) * *c;
        }
        raw = raw.max(sum.norm());
        if mass > 0.0 {
            residual = residual.max(sum.norm() / mass);
        }
    }
    Ok(WitnessReport {
        token_coefficients,
        residual,
        raw_residual: raw,
    })
}
