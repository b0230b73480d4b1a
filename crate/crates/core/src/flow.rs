//! Depth-discretized token flow: the residual stack `x ← x + h Φ_l[μ](x)`
//! over `L` layers of equal-weight head ensembles.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{coupled_field, AttentionParams, CoupledState, HeadEnsemble, TokenCloud, Vector};
use crate::error::{ensure_dim, Error, Result};

/// `L` layers of `H` equal-weight heads: the particle discretization of a
/// parameter distribution with uniform depth marginal.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthParameterization {
    layers: Vec<HeadEnsemble>,
}

impl DepthParameterization {
    pub fn new(layers: Vec<Vec<AttentionParams>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("parameterization needs at least one layer".into()));
        }
        let h = layers[0].len();
        if h == 0 {
            return Err(Error::Invalid("layers need at least one head".into()));
        }
        let d = layers[0][0].dim();
        let mut ensembles = Vec::with_capacity(layers.len());
        for heads in layers {
            ensure_dim("heads per layer", h, heads.len())?;
            for head in &heads {
                ensure_dim("head dimension", d, head.dim())?;
            }
            ensembles.push(HeadEnsemble::uniform(heads)?);
        }
        Ok(Self { layers: ensembles })
    }

    pub fn layers(&self) -> &[HeadEnsemble] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn head_count(&self) -> usize {
        self.layers[0].len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn head(&self, layer: usize, head: usize) -> &AttentionParams {
        &self.layers[layer].heads()[head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut AttentionParams {
        &mut self.layers[layer].heads_mut()[head]
    }

    /// Layer midpoints `s_l = (l + ½)/L`.
    pub fn depth_grid(&self) -> Vec<f64> {
        let l = self.layer_count() as f64;
        (0..self.layer_count()).map(|i| (i as f64 + 0.5) / l).collect()
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.layer_count() as f64
    }

    /// Each layer repeated `factor` times: the same piecewise-constant depth
    /// field resolved on a finer grid.
    pub fn refined(&self, factor: usize) -> Self {
        let layers = self
            .layers
            .iter()
            .flat_map(|l| std::iter::repeat_n(l.clone(), factor.max(1)))
            .collect();
        Self { layers }
    }

    pub fn heads(&self) -> impl Iterator<Item = (usize, usize, &AttentionParams)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, ens)| ens.heads().iter().enumerate().map(move |(h, p)| (l, h, p)))
    }

    pub fn is_finite(&self) -> bool {
        self.heads().all(|(_, _, p)| p.is_finite())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        ensure_dim("layer count", self.layer_count(), other.layer_count())?;
        ensure_dim("head count", self.head_count(), other.head_count())?;
        ensure_dim("parameter dimension", self.dim(), other.dim())
    }
}

/// One training pair: token cloud, input token and quadratic-loss target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud: TokenCloud,
    pub input: Vector,
    pub target: Vector,
}

impl Sample {
    pub fn new(cloud: TokenCloud, input: Vector, target: Vector) -> Result<Self> {
        ensure_dim("sample input", cloud.dim(), input.len())?;
        ensure_dim("sample target", cloud.dim(), target.len())?;
        if !input.iter().chain(target.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sample input/target".into()));
        }
        Ok(Self { cloud, input, target })
    }

    pub fn initial_state(&self) -> CoupledState {
        CoupledState {
            query: self.input.clone(),
            context: self.cloud.clone(),
        }
    }
}

/// Token positions at the `L + 1` depth nodes `0, 1/L, …, 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<CoupledState>,
}

impl Trajectory {
    pub fn terminal(&self) -> &CoupledState {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn output(&self) -> &Vector {
        &self.terminal().query
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    /// The residual architecture itself.
    #[default]
    Euler,
    /// Validation only; not differentiated by the adjoint.
    Rk4,
}

fn shifted(state: &CoupledState, field: &[Vector], h: f64) -> CoupledState {
    let tokens = state.tokens().zip(field).map(|(x, f)| x + f * h).collect();
    state.from_tokens(tokens)
}

/// Advances every token (query and context) by one step of size `h`.
pub fn forward_step(ensemble: &HeadEnsemble, state: &CoupledState, h: f64, integrator: Integrator) -> Result<CoupledState> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Invalid(format!("step size must be positive, got {h}")));
    }
    let next = match integrator {
        Integrator::Euler => shifted(state, &coupled_field(ensemble, state)?, h),
        Integrator::Rk4 => {
            let k1 = coupled_field(ensemble, state)?;
            let k2 = coupled_field(ensemble, &shifted(state, &k1, h / 2.0))?;
            let k3 = coupled_field(ensemble, &shifted(state, &k2, h / 2.0))?;
            let k4 = coupled_field(ensemble, &shifted(state, &k3, h))?;
            let combined: Vec<Vector> = (0..k1.len())
                .map(|i| (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) / 6.0)
                .collect();
            shifted(state, &combined, h)
        }
    };
    if !next.is_finite() {
        return Err(Error::Divergence {
            stage: "forward step".into(),
        });
    }
    Ok(next)
}

pub fn forward_trajectory(rho: &DepthParameterization, sample: &Sample) -> Result<Trajectory> {
    forward_trajectory_with(rho, sample, Integrator::Euler)
}

pub fn forward_trajectory_with(rho: &DepthParameterization, sample: &Sample, integrator: Integrator) -> Result<Trajectory> {
    ensure_dim("sample dimension", rho.dim(), sample.input.len())?;
    let h = rho.step_size();
    let mut states = Vec::with_capacity(rho.layer_count() + 1);
    states.push(sample.initial_state());
    for layer in rho.layers() {
        let next = forward_step(layer, states.last().unwrap(), h, integrator)?;
        states.push(next);
    }
    Ok(Trajectory { states })
}

/// Matched-particle upper bound on the conditional `W₂` distance:
/// `sqrt((1/L) Σₗ (1/H) Σₕ ‖θₗₕ − θ'ₗₕ‖²)`.
pub fn cot_distance(rho: &DepthParameterization, other: &DepthParameterization) -> Result<f64> {
    rho.check_same_shape(other)?;
    let total: f64 = rho
        .heads()
        .zip(other.heads())
        .map(|((_, _, a), (_, _, b))| a.distance_squared(b))
        .sum();
    Ok((total / (rho.layer_count() * rho.head_count()) as f64).sqrt())
}

/// `(1/L) Σₗ (1/H) Σₕ ‖θₗₕ‖²`
pub fn second_moment(rho: &DepthParameterization) -> f64 {
    let total: f64 = rho.heads().map(|(_, _, p)| p.norm_squared()).sum();
    total / (rho.layer_count() * rho.head_count()) as f64
}

/// Writes trajectories as `sample,depth_index,token_index,coordinate_index,value`.
pub fn write_trajectory_csv<W: Write>(out: W, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample", "depth_index", "token_index", "coordinate_index", "value"])?;
    for (j, traj) in trajectories.iter().enumerate() {
        for (s, state) in traj.states.iter().enumerate() {
            for (i, tok) in state.tokens().enumerate() {
                for (a, val) in tok.iter().enumerate() {
                    if !val.is_finite() {
                        return Err(Error::NonFinite("trajectory dump".into()));
                    }
                    w.write_record(&[
                        j.to_string(),
                        s.to_string(),
                        i.to_string(),
                        a.to_string(),
                        crate::fmt_f64(*val),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
