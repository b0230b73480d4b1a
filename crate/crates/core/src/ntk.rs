//! Attention tangent kernels at each depth slice.
//!
//! Tokens of all samples are stacked sample-major, query first, giving
//! `n_total = Σⱼ (nⱼ + 1)` rows. Adjoints are normalized by the plain
//! Euclidean norm of the stacked vectors, regardless of cloud weights.
//!
//! * `K¹` (`n_total × n_total`): `(1/H) Σₕ ⟨Mʲₕ(xᵢ), Mʲ'ₕ(xᵢ')⟩`, where `M` is
//!   the softmax mean of the pushed context. The `V`-part of the NTK acting on
//!   `d`-dimensional adjoints equals `K¹ ⊗ I_d`, so it shares its spectrum.
//! * `K` (`n_total·d` square): Gram matrix of the full parameter adjoints
//!   `m ↦ D_θφ* m`, token-major with the coordinate as the fast index.

use nalgebra::SymmetricEigen;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attention::{d_theta_attention, AttentionParams, Matrix, Tilted, Vector};
use crate::error::{Error, Result};
use crate::flow::{cot_distance, forward_trajectory, DepthParameterization, Sample, Trajectory};

pub const DEFAULT_SIZE_GATE: usize = 512;

/// Softmax mean of the layer's context at token `token_index`, tilted by
/// `Q xᵢ + q`. `Φ = V · feature`, so this is the `V`-linear feature.
pub fn v_feature(head: &AttentionParams, traj: &Trajectory, layer_index: usize, token_index: usize) -> Result<Vector> {
    let state = traj.states.get(layer_index).ok_or(Error::OutOfRange {
        what: "layer_index",
        index: layer_index,
        len: traj.states.len(),
    })?;
    if token_index >= state.token_count() {
        return Err(Error::OutOfRange {
            what: "token_index",
            index: token_index,
            len: state.token_count(),
        });
    }
    let xi = &head.query * state.token(token_index) + &head.bias;
    Ok(Tilted::new(&xi, &state.context).mean)
}

fn check_trajectories(rho: &DepthParameterization, trajectories: &[Trajectory], layer_index: usize) -> Result<()> {
    if trajectories.is_empty() {
        return Err(Error::Invalid("no trajectories".into()));
    }
    if layer_index >= rho.layer_count() {
        return Err(Error::OutOfRange {
            what: "layer_index",
            index: layer_index,
            len: rho.layer_count(),
        });
    }
    for t in trajectories {
        if t.states.len() != rho.layer_count() + 1 {
            return Err(Error::Invalid("trajectory depth does not match the parameterization".into()));
        }
        if t.states[0].dim() != rho.dim() {
            return Err(Error::DimensionMismatch {
                context: "trajectory dimension",
                expected: rho.dim(),
                found: t.states[0].dim(),
            });
        }
    }
    Ok(())
}

pub fn total_tokens(trajectories: &[Trajectory]) -> usize {
    trajectories.iter().map(|t| t.states[0].token_count()).sum()
}

/// `n_total × d` matrix of one head's features, one row per token.
fn head_features(head: &AttentionParams, trajectories: &[Trajectory], layer_index: usize) -> Result<Matrix> {
    let n = total_tokens(trajectories);
    let d = head.dim();
    let mut f = Matrix::zeros(n, d);
    let mut row = 0;
    for traj in trajectories {
        for i in 0..traj.states[layer_index].token_count() {
            let feat = v_feature(head, traj, layer_index, i)?;
            f.row_mut(row).copy_from(&feat.transpose());
            row += 1;
        }
    }
    Ok(f)
}

pub fn ntk_v_matrix(rho: &DepthParameterization, trajectories: &[Trajectory], layer_index: usize) -> Result<Matrix> {
    check_trajectories(rho, trajectories, layer_index)?;
    let n = total_tokens(trajectories);
    let layer = &rho.layers()[layer_index];
    let mut k = Matrix::zeros(n, n);
    for (head, w) in layer.heads().iter().zip(layer.weights()) {
        let f = head_features(head, trajectories, layer_index)?;
        k.gemm(*w, &f, &f.transpose(), 1.0);
    }
    Ok(symmetrized(k))
}

pub fn ntk_full_matrix(
    rho: &DepthParameterization,
    trajectories: &[Trajectory],
    layer_index: usize,
    size_gate: usize,
) -> Result<Matrix> {
    check_trajectories(rho, trajectories, layer_index)?;
    let d = rho.dim();
    let n = total_tokens(trajectories) * d;
    if n > size_gate {
        return Err(Error::SizeGate { size: n, gate: size_gate });
    }
    let p = AttentionParams::param_count(d);
    let layer = &rho.layers()[layer_index];
    let mut k = Matrix::zeros(n, n);
    for (head, w) in layer.heads().iter().zip(layer.weights()) {
        let mut phi = Matrix::zeros(n, p);
        let mut row = 0;
        for traj in trajectories {
            let state = &traj.states[layer_index];
            for x in state.tokens() {
                let der = d_theta_attention(head, &state.context, x)?;
                for a in 0..d {
                    let mut e = Vector::zeros(d);
                    e[a] = 1.0;
                    let g = der.adjoint(&e)?.to_flat();
                    phi.row_mut(row).copy_from_slice(&g);
                    row += 1;
                }
            }
        }
        k.gemm(*w, &phi, &phi.transpose(), 1.0);
    }
    Ok(symmetrized(k))
}

fn symmetrized(k: Matrix) -> Matrix {
    (&k + k.transpose()) * 0.5
}

/// Extreme eigenvalues of a symmetric matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `λ_max / λ_min`; `None` when `λ_min ≤ 0`.
    pub condition: Option<f64>,
}

pub fn spectrum(k: &Matrix) -> Result<Spectrum> {
    if k.nrows() == 0 {
        return Err(Error::Eigen("empty matrix".into()));
    }
    if !k.iter().all(|v| v.is_finite()) {
        return Err(Error::Eigen("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::try_new(k.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let lambda_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lambda_min.is_finite() || !lambda_max.is_finite() {
        return Err(Error::Eigen("non-finite eigenvalues".into()));
    }
    let condition = (lambda_min > 0.0).then(|| lambda_max / lambda_min);
    Ok(Spectrum {
        lambda_min,
        lambda_max,
        condition,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NtkOptions {
    /// Also assemble the full kernel `K` when `n_total·d` is within the gate.
    pub full: bool,
    pub size_gate: usize,
}

impl Default for NtkOptions {
    fn default() -> Self {
        Self {
            full: false,
            size_gate: DEFAULT_SIZE_GATE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerKernels {
    pub depth: f64,
    pub k1: Matrix,
    pub k1_spectrum: Spectrum,
    pub full: Option<Matrix>,
    pub full_spectrum: Option<Spectrum>,
}

#[derive(Clone, Debug)]
pub struct NtkReport {
    pub layers: Vec<LayerKernels>,
    /// Depth average of `λ_min(K¹)`.
    pub lambda0: f64,
    /// Depth average of `λ_min(K)` when the full kernels were assembled.
    pub lambda0_full: Option<f64>,
}

impl NtkReport {
    pub fn lambda_min_profile(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.k1_spectrum.lambda_min).collect()
    }
}

pub fn lambda_min_profile(rho: &DepthParameterization, trajectories: &[Trajectory], options: NtkOptions) -> Result<NtkReport> {
    let depths = rho.depth_grid();
    let want_full = options.full && total_tokens(trajectories) * rho.dim() <= options.size_gate;
    let layers = (0..rho.layer_count())
        .map(|l| {
            let k1 = ntk_v_matrix(rho, trajectories, l)?;
            let k1_spectrum = spectrum(&k1)?;
            let (full, full_spectrum) = if want_full {
                let k = ntk_full_matrix(rho, trajectories, l, options.size_gate)?;
                let s = spectrum(&k)?;
                (Some(k), Some(s))
            } else {
                (None, None)
            };
            Ok(LayerKernels {
                depth: depths[l],
                k1,
                k1_spectrum,
                full,
                full_spectrum,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let count = layers.len() as f64;
    let lambda0 = layers.iter().map(|l| l.k1_spectrum.lambda_min).sum::<f64>() / count;
    let lambda0_full = want_full.then(|| {
        layers
            .iter()
            .map(|l| l.full_spectrum.map_or(0.0, |s| s.lambda_min))
            .sum::<f64>()
            / count
    });
    Ok(NtkReport {
        layers,
        lambda0,
        lambda0_full,
    })
}

pub fn trajectories(rho: &DepthParameterization, dataset: &[Sample]) -> Result<Vec<Trajectory>> {
    dataset.iter().map(|s| forward_trajectory(rho, s)).collect()
}

/// Runs the forward pass and assembles the kernel report.
pub fn ntk_report(rho: &DepthParameterization, dataset: &[Sample], options: NtkOptions) -> Result<NtkReport> {
    lambda_min_profile(rho, &trajectories(rho, dataset)?, options)
}

/// `λ₀` only, from the `K¹` kernels.
pub fn lambda0(rho: &DepthParameterization, dataset: &[Sample]) -> Result<f64> {
    Ok(ntk_report(rho, dataset, NtkOptions::default())?.lambda0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PerturbationProbe {
    pub delta: f64,
    pub lambda0_base: f64,
    pub lambda0_perturbed: f64,
    pub delta_lambda0: f64,
    pub cot_distance: f64,
    /// `|Δλ₀| / cot_distance`; zero when the perturbation vanishes.
    pub ratio: f64,
}

/// Perturbs every head by `delta · ξ`, with one seeded Gaussian direction `ξ`
/// shared by all scales, and reports the change in `λ₀` per unit distance.
pub fn ntk_perturbation_test(
    rho: &DepthParameterization,
    dataset: &[Sample],
    deltas: &[f64],
    seed: u64,
) -> Result<Vec<PerturbationProbe>> {
    let base = lambda0(rho, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rho.dim();
    let direction: Vec<AttentionParams> = rho
        .heads()
        .map(|_| {
            let flat: Vec<f64> = (0..AttentionParams::param_count(d))
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            AttentionParams::from_flat(d, &flat)
        })
        .collect::<Result<_>>()?;
    deltas
        .iter()
        .map(|&delta| {
            if !(delta >= 0.0) {
                return Err(Error::Invalid(format!("perturbation scale must be nonnegative, got {delta}")));
            }
            let mut moved = rho.clone();
            let h = rho.head_count();
            for (k, xi) in direction.iter().enumerate() {
                moved.head_mut(k / h, k % h).axpy(delta, xi);
            }
            let perturbed = lambda0(&moved, dataset)?;
            let dist = cot_distance(rho, &moved)?;
            let change = perturbed - base;
            Ok(PerturbationProbe {
                delta,
                lambda0_base: base,
                lambda0_perturbed: perturbed,
                delta_lambda0: change,
                cot_distance: dist,
                ratio: if dist > 0.0 { change.abs() / dist } else { 0.0 },
            })
        })
        .collect()
}
