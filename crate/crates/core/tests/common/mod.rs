#![allow(dead_code)]

use mflab::adjoint::risk;
use mflab::attention::{
    attention_single, coupled_field, d_theta_attention, AttentionParams, CoupledState, HeadEnsemble, Matrix, TokenCloud, Vector,
};
use mflab::flow::{DepthParameterization, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gvec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vector {
    Vector::from_fn(d, |_, _| scale * gauss(rng))
}

pub fn gmat(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Matrix {
    Matrix::from_fn(d, d, |_, _| scale * gauss(rng))
}

pub fn head(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> AttentionParams {
    AttentionParams::new(gmat(rng, d, scale), gvec(rng, d, scale), gmat(rng, d, scale)).unwrap()
}

pub fn rho(rng: &mut ChaCha8Rng, layers: usize, heads: usize, d: usize, scale: f64) -> DepthParameterization {
    DepthParameterization::new(
        (0..layers)
            .map(|_| (0..heads).map(|_| head(rng, d, scale)).collect())
            .collect(),
    )
    .unwrap()
}

/// Cloud with random positive weights.
pub fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> TokenCloud {
    let pts = (0..n).map(|_| gvec(rng, d, 1.0)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    TokenCloud::new(pts, raw.iter().map(|w| w / total).collect()).unwrap()
}

pub fn uniform_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> TokenCloud {
    TokenCloud::uniform((0..n).map(|_| gvec(rng, d, 1.0)).collect()).unwrap()
}

pub fn state(rng: &mut ChaCha8Rng, n: usize, d: usize) -> CoupledState {
    CoupledState::new(gvec(rng, d, 1.0), cloud(rng, n, d)).unwrap()
}

pub fn dataset(rng: &mut ChaCha8Rng, samples: usize, n: usize, d: usize) -> Vec<Sample> {
    (0..samples)
        .map(|_| Sample::new(cloud(rng, n, d), gvec(rng, d, 1.0), gvec(rng, d, 1.0)).unwrap())
        .collect()
}

/// Same head count and dimension, every entry drawn from `N(0, 1)`.
pub fn direction_like(rng: &mut ChaCha8Rng, like: &DepthParameterization) -> DepthParameterization {
    rho(rng, like.layer_count(), like.head_count(), like.dim(), 1.0)
}

/// `rho + delta · dir`, head by head.
pub fn shifted(rho: &DepthParameterization, dir: &DepthParameterization, delta: f64) -> DepthParameterization {
    let mut out = rho.clone();
    for (l, h, p) in dir.heads() {
        out.head_mut(l, h).axpy(delta, p);
    }
    out
}

/// Compensated (Neumaier) summation.
pub fn neumaier(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(a.abs()).max(floor)
}

pub fn max_rel_vec(a: &Vector, b: &Vector, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(a.norm()).max(floor)
}

pub fn shifted_state(s: &CoupledState, t: usize, a: usize, h: f64) -> CoupledState {
    let mut q = s.query.clone();
    let mut pts = s.context.points().to_vec();
    if t == 0 {
        q[a] += h;
    } else {
        pts[t - 1][a] += h;
    }
    CoupledState::new(q, TokenCloud::new(pts, s.context.weights().to_vec()).unwrap()).unwrap()
}

pub fn stack(f: &[Vector]) -> Vector {
    Vector::from_iterator(f.iter().map(Vector::len).sum(), f.iter().flat_map(|x| x.iter().copied()))
}

/// Central-difference Jacobian of the coupled field, token-major.
pub fn fd_token_jacobian(ens: &HeadEnsemble, s: &CoupledState, h: f64) -> Matrix {
    let d = s.dim();
    let n = s.token_count() * d;
    let mut j = Matrix::zeros(n, n);
    for col in 0..n {
        let (t, a) = (col / d, col % d);
        let plus = stack(&coupled_field(ens, &shifted_state(s, t, a, h)).unwrap());
        let minus = stack(&coupled_field(ens, &shifted_state(s, t, a, -h)).unwrap());
        j.set_column(col, &((plus - minus) / (2.0 * h)));
    }
    j
}

/// Analytic and central-difference `d × P` parameter Jacobians of one head.
pub fn param_jacobians(h: &AttentionParams, c: &TokenCloud, x: &Vector, step: f64) -> (Matrix, Matrix) {
    let d = x.len();
    let der = d_theta_attention(h, c, x).unwrap();
    let base = h.to_flat();
    let mut exact = Matrix::zeros(d, base.len());
    let mut fd = Matrix::zeros(d, base.len());
    for idx in 0..base.len() {
        let mut e = vec![0.0; base.len()];
        e[idx] = 1.0;
        let tangent = AttentionParams::from_flat(d, &e).unwrap();
        exact.set_column(idx, &der.apply(&tangent).unwrap());
        let mut p = base.clone();
        p[idx] += step;
        let plus = attention_single(&AttentionParams::from_flat(d, &p).unwrap(), c, x).unwrap();
        p[idx] -= 2.0 * step;
        let minus = attention_single(&AttentionParams::from_flat(d, &p).unwrap(), c, x).unwrap();
        fd.set_column(idx, &((plus - minus) / (2.0 * step)));
    }
    (exact, fd)
}

/// `½ Σ_l Σ_l' p_l p_l' (y_l − y_l')(y_l − y_l')ᵀ`
pub fn double_sum_covariance(p: &[f64], ys: &[Vector]) -> Matrix {
    let d = ys[0].len();
    let mut c = Matrix::zeros(d, d);
    for (pl, yl) in p.iter().zip(ys) {
        for (pk, yk) in p.iter().zip(ys) {
            let diff = yl - yk;
            c += &diff * diff.transpose() * (0.5 * pl * pk);
        }
    }
    c
}

/// Components pass when either the absolute or the relative error is small.
pub fn component_ok(analytic: f64, fd: f64, rel: f64, abs: f64) -> bool {
    let err = (analytic - fd).abs();
    err <= abs || err <= rel * fd.abs().max(analytic.abs())
}

/// Central differences of the risk, one flat parameter at a time.
pub fn fd_gradient(p: &DepthParameterization, data: &[Sample], step: f64) -> Vec<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for l in 0..p.layer_count() {
        let mut layer = Vec::new();
        for h in 0..p.head_count() {
            let flat = p.head(l, h).to_flat();
            let d = p.dim();
            let g: Vec<f64> = (0..flat.len())
                .map(|k| {
                    let eval = |delta: f64| {
                        let mut f = flat.clone();
                        f[k] += delta;
                        let mut q = p.clone();
                        *q.head_mut(l, h) = AttentionParams::from_flat(d, &f).unwrap();
                        risk(&q, data).unwrap()
                    };
                    (eval(step) - eval(-step)) / (2.0 * step)
                })
                .collect();
            layer.push(g);
        }
        out.push(layer);
    }
    out
}
