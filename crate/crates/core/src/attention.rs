//! Softmax attention with a fixed identity key matrix, evaluated on weighted
//! token clouds, together with its exact derivatives with respect to token
//! positions and head parameters.
//!
//! A head is `θ = (Q, q, V)` and acts on a cloud `μ = Σ wₗ δ_{yₗ}` as
//!
//! ```text
//! φ_θ[μ](x) = V · Σₗ pₗ yₗ,     pₗ ∝ wₗ exp⟨Qx + q, yₗ⟩.
//! ```
//!
//! All softmax evaluations subtract the largest score before exponentiating.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_dim, Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Tokens with at most this many context points get a dense Jacobian.
pub const DENSE_TOKEN_LIMIT: usize = 64;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Parameter block of a head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamComponent {
    Query,
    Bias,
    Value,
}

impl ParamComponent {
    pub fn label(self) -> &'static str {
        match self {
            ParamComponent::Query => "Q",
            ParamComponent::Bias => "q",
            ParamComponent::Value => "V",
        }
    }
}

/// One attention head `θ = (Q, q, V)`. Also used as the tangent/cotangent
/// type for parameter derivatives, since both live in the same space.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Matrix,
    pub bias: Vector,
    pub value: Matrix,
}

impl AttentionParams {
    pub fn new(query: Matrix, bias: Vector, value: Matrix) -> Result<Self> {
        let head = Self { query, bias, value };
        head.validate()?;
        Ok(head)
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            query: Matrix::zeros(dim, dim),
            bias: Vector::zeros(dim),
            value: Matrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.bias.len();
        if d == 0 {
            return Err(Error::Invalid("head dimension must be positive".into()));
        }
        ensure_dim("query rows", d, self.query.nrows())?;
        ensure_dim("query cols", d, self.query.ncols())?;
        ensure_dim("value rows", d, self.value.nrows())?;
        ensure_dim("value cols", d, self.value.ncols())?;
        let finite = self.query.iter().all(|v| v.is_finite())
            && self.bias.iter().all(|v| v.is_finite())
            && self.value.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("attention head parameters".into()));
        }
        Ok(())
    }

    /// Number of scalar parameters of a head in dimension `dim`.
    pub fn param_count(dim: usize) -> usize {
        2 * dim * dim + dim
    }

    /// Flattens as `Q` (row-major), then `q`, then `V` (row-major).
    pub fn to_flat(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(Self::param_count(d));
        for r in 0..d {
            for c in 0..d {
                out.push(self.query[(r, c)]);
            }
        }
        out.extend(self.bias.iter().copied());
        for r in 0..d {
            for c in 0..d {
                out.push(self.value[(r, c)]);
            }
        }
        out
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        ensure_dim("flat head parameters", Self::param_count(dim), flat.len())?;
        let dd = dim * dim;
        let query = Matrix::from_row_slice(dim, dim, &flat[..dd]);
        let bias = Vector::from_column_slice(&flat[dd..dd + dim]);
        let value = Matrix::from_row_slice(dim, dim, &flat[dd + dim..]);
        Self::new(query, bias, value)
    }

    /// Maps a flat index back to `(component, row, col)`; biases use `col = 0`.
    pub fn locate(dim: usize, index: usize) -> (ParamComponent, usize, usize) {
        let dd = dim * dim;
        if index < dd {
            (ParamComponent::Query, index / dim, index % dim)
        } else if index < dd + dim {
            (ParamComponent::Bias, index - dd, 0)
        } else {
            let k = index - dd - dim;
            (ParamComponent::Value, k / dim, k % dim)
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.query.norm_squared() + self.bias.norm_squared() + self.value.norm_squared()
    }

    pub fn value_norm_squared(&self) -> f64 {
        self.value.norm_squared()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &AttentionParams) {
        self.query += &other.query * alpha;
        self.bias += &other.bias * alpha;
        self.value += &other.value * alpha;
    }

    pub fn distance_squared(&self, other: &AttentionParams) -> f64 {
        (&self.query - &other.query).norm_squared()
            + (&self.bias - &other.bias).norm_squared()
            + (&self.value - &other.value).norm_squared()
    }

    /// Spectral norm of `V`.
    pub fn value_op_norm(&self) -> f64 {
        operator_norm(&self.value)
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

pub fn operator_norm(m: &Matrix) -> f64 {
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Smooth radial clamp `Π(V) = V · R tanh(‖V‖/R) / ‖V‖`; `‖Π(V)‖_F ≤ R`.
pub fn smooth_value_clamp(value: &Matrix, radius: f64) -> Matrix {
    let norm = value.norm();
    if norm == 0.0 || radius <= 0.0 {
        return value.clone();
    }
    value * (radius * (norm / radius).tanh() / norm)
}

/// Weighted empirical token distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenCloud {
    points: Vec<Vector>,
    weights: Vec<f64>,
}

impl TokenCloud {
    pub fn new(points: Vec<Vector>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("token cloud needs at least one point".into()));
        }
        ensure_dim("cloud weights", points.len(), weights.len())?;
        let d = points[0].len();
        if d == 0 {
            return Err(Error::Invalid("token dimension must be positive".into()));
        }
        for p in &points {
            ensure_dim("cloud point", d, p.len())?;
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("token cloud point".into()));
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid("cloud weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Invalid(format!("cloud weights sum to {total}, not 1")));
        }
        Ok(Self { points, weights })
    }

    pub fn uniform(points: Vec<Vector>) -> Result<Self> {
        let n = points.len().max(1);
        let weights = vec![1.0 / n as f64; points.len()];
        Self::new(points, weights)
    }

    pub fn dirac(point: Vector) -> Result<Self> {
        Self::new(vec![point], vec![1.0])
    }

    pub fn points(&self) -> &[Vector] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn mean(&self) -> Vector {
        let mut m = Vector::zeros(self.dim());
        for (p, w) in self.points.iter().zip(&self.weights) {
            m.axpy(*w, p, 1.0);
        }
        m
    }

    /// Same weights, moved points. Callers guarantee matching shapes.
    pub(crate) fn with_points(&self, points: Vec<Vector>) -> Self {
        debug_assert_eq!(points.len(), self.weights.len());
        Self {
            points,
            weights: self.weights.clone(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }
}

/// A query token coupled with its context cloud. Token index 0 is the
/// query; indices `1..=n` are the context points.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledState {
    pub query: Vector,
    pub context: TokenCloud,
}

impl CoupledState {
    pub fn new(query: Vector, context: TokenCloud) -> Result<Self> {
        ensure_dim("query token", context.dim(), query.len())?;
        if !query.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("query token".into()));
        }
        Ok(Self { query, context })
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }

    pub fn token_count(&self) -> usize {
        self.context.len() + 1
    }

    pub fn token(&self, index: usize) -> &Vector {
        if index == 0 {
            &self.query
        } else {
            &self.context.points()[index - 1]
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Vector> {
        std::iter::once(&self.query).chain(self.context.points().iter())
    }

    /// Rebuilds a state from stacked token positions (query first).
    pub(crate) fn from_tokens(&self, mut tokens: Vec<Vector>) -> Self {
        let query = tokens.remove(0);
        Self {
            query,
            context: self.context.with_points(tokens),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tokens().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_norm(&self) -> f64 {
        self.tokens().map(|t| t.norm()).fold(0.0, f64::max)
    }
}

/// Weighted collection of heads forming a mean-field attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadEnsemble {
    heads: Vec<AttentionParams>,
    weights: Vec<f64>,
}

impl HeadEnsemble {
    pub fn new(heads: Vec<AttentionParams>, weights: Vec<f64>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::Invalid("head ensemble is empty".into()));
        }
        ensure_dim("ensemble weights", heads.len(), weights.len())?;
        let d = heads[0].dim();
        for h in &heads {
            h.validate()?;
            ensure_dim("ensemble head", d, h.dim())?;
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid("ensemble weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Invalid(format!("ensemble weights sum to {total}, not 1")));
        }
        Ok(Self { heads, weights })
    }

    /// Equal-weight ensemble `(1/H) Σₕ δ_{θₕ}`.
    pub fn uniform(heads: Vec<AttentionParams>) -> Result<Self> {
        let h = heads.len().max(1);
        let weights = vec![1.0 / h as f64; heads.len()];
        Self::new(heads, weights)
    }

    pub fn heads(&self) -> &[AttentionParams] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [AttentionParams] {
        &mut self.heads
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.heads[0].dim()
    }
}

/// Stabilized moment maps of the exponentially tilted cloud.
#[derive(Clone, Debug)]
pub struct MomentMaps {
    /// `Σ wᵢ e^{sᵢ − shift}`, strictly positive.
    pub normalizer: f64,
    /// `Σ wᵢ e^{sᵢ − shift} yᵢ`.
    pub first_moment: Vector,
    /// Largest score over the positively weighted points.
    pub shift: f64,
}

impl MomentMaps {
    pub fn ratio(&self) -> Vector {
        &self.first_moment / self.normalizer
    }
}

/// Softmax over a cloud at tilt `xi`: probabilities, mean and covariance.
#[derive(Clone, Debug)]
pub(crate) struct Tilted {
    pub probs: Vec<f64>,
    pub mean: Vector,
}

impl Tilted {
    pub(crate) fn new(xi: &Vector, cloud: &TokenCloud) -> Self {
        let scores: Vec<f64> = cloud.points().iter().map(|y| xi.dot(y)).collect();
        let shift = scores
            .iter()
            .zip(cloud.weights())
            .filter(|(_, w)| **w > 0.0)
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = scores
            .iter()
            .zip(cloud.weights())
            .map(|(s, w)| if *w > 0.0 { w * (s - shift).exp() } else { 0.0 })
            .collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        let mut mean = Vector::zeros(cloud.dim());
        for (p, y) in probs.iter().zip(cloud.points()) {
            mean.axpy(*p, y, 1.0);
        }
        Self { probs, mean }
    }

    /// `Σ pₗ (yₗ − ȳ)(yₗ − ȳ)ᵀ`
    pub(crate) fn covariance(&self, cloud: &TokenCloud) -> Matrix {
        let d = cloud.dim();
        let mut cov = Matrix::zeros(d, d);
        for (p, y) in self.probs.iter().zip(cloud.points()) {
            let c = y - &self.mean;
            cov.ger(*p, &c, &c, 1.0);
        }
        cov
    }
}

fn check_inputs(query: &Matrix, bias: &Vector, cloud: &TokenCloud, x: &Vector) -> Result<()> {
    let d = cloud.dim();
    ensure_dim("query token", d, x.len())?;
    ensure_dim("bias", d, bias.len())?;
    ensure_dim("query matrix rows", d, query.nrows())?;
    ensure_dim("query matrix cols", d, query.ncols())?;
    if !x.iter().all(|v| v.is_finite())
        || !bias.iter().all(|v| v.is_finite())
        || !query.iter().all(|v| v.is_finite())
    {
        return Err(Error::NonFinite("attention inputs".into()));
    }
    Ok(())
}

/// Normalizer `N` and first moment `M` of `μ` tilted by `⟨Qx + q, ·⟩`,
/// both scaled by `e^{−c}` with `c` the maximal score.
pub fn moment_maps(query: &Matrix, bias: &Vector, cloud: &TokenCloud, x: &Vector) -> Result<MomentMaps> {
    check_inputs(query, bias, cloud, x)?;
    let xi = query * x + bias;
    let scores: Vec<f64> = cloud.points().iter().map(|y| xi.dot(y)).collect();
    let shift = scores
        .iter()
        .zip(cloud.weights())
        .filter(|(_, w)| **w > 0.0)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut normalizer = 0.0;
    let mut first_moment = Vector::zeros(cloud.dim());
    for ((s, w), y) in scores.iter().zip(cloud.weights()).zip(cloud.points()) {
        if *w > 0.0 {
            let e = w * (s - shift).exp();
            normalizer += e;
            first_moment.axpy(e, y, 1.0);
        }
    }
    Ok(MomentMaps {
        normalizer,
        first_moment,
        shift,
    })
}

/// Attention weights over the context tokens.
pub fn softmax_weights(query: &Matrix, bias: &Vector, cloud: &TokenCloud, x: &Vector) -> Result<Vec<f64>> {
    check_inputs(query, bias, cloud, x)?;
    let xi = query * x + bias;
    Ok(Tilted::new(&xi, cloud).probs)
}

/// Single-head attention `V · M/N`.
pub fn attention_single(head: &AttentionParams, cloud: &TokenCloud, x: &Vector) -> Result<Vector> {
    ensure_dim("value matrix", cloud.dim(), head.value.nrows())?;
    let maps = moment_maps(&head.query, &head.bias, cloud, x)?;
    Ok(&head.value * maps.ratio())
}

/// Weighted average of single-head attention over an ensemble.
pub fn attention_meanfield(ensemble: &HeadEnsemble, cloud: &TokenCloud, x: &Vector) -> Result<Vector> {
    let mut out = Vector::zeros(cloud.dim());
    for (head, w) in ensemble.heads().iter().zip(ensemble.weights()) {
        out.axpy(*w, &attention_single(head, cloud, x)?, 1.0);
    }
    Ok(out)
}

/// The coupled vector field `Fᵢ = Φ[μ](xᵢ)` for every token of the state
/// (query first). The query does not enter `μ`.
pub fn coupled_field(ensemble: &HeadEnsemble, state: &CoupledState) -> Result<Vec<Vector>> {
    ensure_dim("ensemble dimension", state.dim(), ensemble.dim())?;
    state
        .tokens()
        .map(|x| attention_meanfield(ensemble, &state.context, x))
        .collect()
}

#[derive(Clone, Debug)]
struct TokenLinearization {
    xi: Vector,
    probs: Vec<f64>,
    mean: Vector,
    cov: Matrix,
}

#[derive(Clone, Debug)]
struct HeadLinearization {
    weight: f64,
    query: Matrix,
    value: Matrix,
    tokens: Vec<TokenLinearization>,
}

/// Jacobian of the coupled field with respect to all token positions,
/// stored as per-head softmax data and applied matrix-free.
///
/// For token `i` with tilt `ξ = Qxᵢ + q` and softmax `p` over the context,
/// the head contributes
///
/// ```text
/// ∂Fᵢ/∂xᵢ (through ξ)  = V Cᵢ Q
/// ∂Fᵢ/∂y_k             = V p_k (I + (y_k − ȳᵢ) ξᵀ)
/// ```
///
/// where `Cᵢ` is the softmax covariance. Context tokens collect both terms.
#[derive(Clone, Debug)]
pub struct TokenJacobian {
    dim: usize,
    context: Vec<Vector>,
    heads: Vec<HeadLinearization>,
}

impl TokenJacobian {
    pub fn token_count(&self) -> usize {
        self.context.len() + 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, v: &[Vector]) -> Result<()> {
        ensure_dim("stacked token perturbation", self.token_count(), v.len())?;
        for t in v {
            ensure_dim("token perturbation", self.dim, t.len())?;
        }
        Ok(())
    }

    /// `J · δx`
    pub fn apply(&self, dx: &[Vector]) -> Result<Vec<Vector>> {
        self.check(dx)?;
        let mut out = vec![Vector::zeros(self.dim); self.token_count()];
        for head in &self.heads {
            for (i, tok) in head.tokens.iter().enumerate() {
                let mut inner = &tok.cov * (&head.query * &dx[i]);
                for (k, (p, y)) in tok.probs.iter().zip(&self.context).enumerate() {
                    let dy = &dx[k + 1];
                    inner.axpy(*p, dy, 1.0);
                    let tilt = tok.xi.dot(dy);
                    inner.axpy(p * tilt, &(y - &tok.mean), 1.0);
                }
                out[i].gemv(head.weight, &head.value, &inner, 1.0);
            }
        }
        Ok(out)
    }

    /// `Jᵀ · m`
    pub fn apply_transpose(&self, m: &[Vector]) -> Result<Vec<Vector>> {
        self.check(m)?;
        let mut out = vec![Vector::zeros(self.dim); self.token_count()];
        for head in &self.heads {
            for (i, tok) in head.tokens.iter().enumerate() {
                let mut u = Vector::zeros(self.dim);
                u.gemv_tr(head.weight, &head.value, &m[i], 0.0);
                let cu = &tok.cov * &u;
                out[i].gemv_tr(1.0, &head.query, &cu, 1.0);
                for (k, (p, y)) in tok.probs.iter().zip(&self.context).enumerate() {
                    let proj = (y - &tok.mean).dot(&u);
                    out[k + 1].axpy(*p, &u, 1.0);
                    out[k + 1].axpy(p * proj, &tok.xi, 1.0);
                }
            }
        }
        Ok(out)
    }

    /// Dense `(n+1)d × (n+1)d` matrix, token-major. `None` above
    /// [`DENSE_TOKEN_LIMIT`] context tokens.
    pub fn to_dense(&self) -> Option<Matrix> {
        if self.context.len() > DENSE_TOKEN_LIMIT {
            return None;
        }
        let n = self.token_count() * self.dim;
        let mut dense = Matrix::zeros(n, n);
        let mut basis = vec![Vector::zeros(self.dim); self.token_count()];
        for col in 0..n {
            let (t, a) = (col / self.dim, col % self.dim);
            basis[t][a] = 1.0;
            let image = self.apply(&basis).expect("basis has matching shape");
            basis[t][a] = 0.0;
            for (ti, v) in image.iter().enumerate() {
                for (b, val) in v.iter().enumerate() {
                    dense[(ti * self.dim + b, col)] = *val;
                }
            }
        }
        Some(dense)
    }
}

pub fn token_jacobian(ensemble: &HeadEnsemble, state: &CoupledState) -> Result<TokenJacobian> {
    ensure_dim("ensemble dimension", state.dim(), ensemble.dim())?;
    let cloud = &state.context;
    let heads = ensemble
        .heads()
        .iter()
        .zip(ensemble.weights())
        .map(|(head, w)| {
            let tokens = state
                .tokens()
                .map(|x| {
                    let xi = &head.query * x + &head.bias;
                    let tilted = Tilted::new(&xi, cloud);
                    let cov = tilted.covariance(cloud);
                    TokenLinearization {
                        xi,
                        probs: tilted.probs,
                        mean: tilted.mean,
                        cov,
                    }
                })
                .collect();
            HeadLinearization {
                weight: *w,
                query: head.query.clone(),
                value: head.value.clone(),
                tokens,
            }
        })
        .collect();
    Ok(TokenJacobian {
        dim: state.dim(),
        context: cloud.points().to_vec(),
        heads,
    })
}

/// Derivative of a single head's output at one token with respect to
/// `θ = (Q, q, V)`, in covariance form:
///
/// ```text
/// D_V φ · V' = V' ȳ
/// D_q φ · q' = V C q'
/// D_Q φ · Q' = V C Q' x
/// ```
#[derive(Clone, Debug)]
pub struct ParamDerivative {
    x: Vector,
    mean: Vector,
    cov: Matrix,
    value: Matrix,
}

impl ParamDerivative {
    /// Softmax mean `M/N`.
    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    /// Softmax covariance of the context tokens.
    pub fn covariance(&self) -> &Matrix {
        &self.cov
    }

    /// Directional derivative along a parameter tangent.
    pub fn apply(&self, tangent: &AttentionParams) -> Result<Vector> {
        ensure_dim("tangent dimension", self.x.len(), tangent.dim())?;
        let dxi = &tangent.query * &self.x + &tangent.bias;
        Ok(&self.value * (&self.cov * dxi) + &tangent.value * &self.mean)
    }

    /// Adjoint `D_θφ* m` as a parameter-shaped cotangent.
    pub fn adjoint(&self, m: &Vector) -> Result<AttentionParams> {
        ensure_dim("cotangent dimension", self.x.len(), m.len())?;
        let u = &self.cov * (self.value.transpose() * m);
        Ok(AttentionParams {
            query: &u * self.x.transpose(),
            bias: u,
            value: m * self.mean.transpose(),
        })
    }

    /// `D_Vφ* m = m ⊗ ȳ`, the only block that survives when `V = 0`.
    pub fn value_adjoint(&self, m: &Vector) -> Matrix {
        m * self.mean.transpose()
    }
}

pub fn d_theta_attention(head: &AttentionParams, cloud: &TokenCloud, x: &Vector) -> Result<ParamDerivative> {
    check_inputs(&head.query, &head.bias, cloud, x)?;
    ensure_dim("value matrix", cloud.dim(), head.value.nrows())?;
    let xi = &head.query * x + &head.bias;
    let tilted = Tilted::new(&xi, cloud);
    let cov = tilted.covariance(cloud);
    Ok(ParamDerivative {
        x: x.clone(),
        mean: tilted.mean,
        cov,
        value: head.value.clone(),
    })
}
