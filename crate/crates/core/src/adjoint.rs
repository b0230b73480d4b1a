//! Discrete adjoint of the Euler forward stack and the risk gradient field.
//!
//! With `x_{l+1} = x_l + h F_l(x_l)` and `h = 1/L`, the adjoint recursion is
//! `m_l = m_{l+1} + h J_l(x_l)ᵀ m_{l+1}` started from the loss gradient on the
//! query token. The gradient field of a head is then
//!
//! ```text
//! g_{lh} = (1/N) Σⱼ Σᵢ D_θφ_{θ_{lh}}(x^j_{l,i})* m^j_{l+1,i}
//! ```
//!
//! which is the velocity of head `(l, h)` under the gradient flow. It relates
//! to the plain partial derivative of the discrete risk by
//! `∂R/∂θ_{lh} = g_{lh} / (L·H)`: the `1/L` is the step size and the `1/H`
//! the ensemble weight. With this scaling `‖g‖²` in `L²(ρ)` is exactly the
//! dissipation rate `−dR/dt` of the particle flow `θ̇ = −g`.

use std::io::Write;

use rayon::prelude::*;

use crate::attention::{d_theta_attention, token_jacobian, AttentionParams, ParamComponent, Vector};
use crate::error::{ensure_dim, Error, Result};
use crate::flow::{forward_trajectory, DepthParameterization, Sample, Trajectory};

/// Per-token adjoint vectors at every depth node `0..=L` of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointState {
    pub nodes: Vec<Vec<Vector>>,
}

impl AdjointState {
    pub fn initial(&self) -> &[Vector] {
        &self.nodes[0]
    }
}

/// Velocity of every head particle, shaped like the parameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub layers: Vec<Vec<AttentionParams>>,
}

impl GradientField {
    pub fn zeros_like(rho: &DepthParameterization) -> Self {
        Self {
            layers: vec![vec![AttentionParams::zeros(rho.dim()); rho.head_count()]; rho.layer_count()],
        }
    }

    pub fn get(&self, layer: usize, head: usize) -> &AttentionParams {
        &self.layers[layer][head]
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn head_count(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(AttentionParams::is_finite)
    }

    /// Moves every head by `−eta · g`.
    pub fn descend(&self, rho: &DepthParameterization, eta: f64) -> DepthParameterization {
        let mut next = rho.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, g) in layer.iter().enumerate() {
                next.head_mut(l, h).axpy(-eta, g);
            }
        }
        next
    }
}

/// Quadratic loss `½‖x − y‖²` of one sample.
pub fn sample_loss(sample: &Sample, traj: &Trajectory) -> f64 {
    0.5 * (traj.output() - &sample.target).norm_squared()
}

fn check_dataset(rho: &DepthParameterization, dataset: &[Sample]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Invalid("dataset is empty".into()));
    }
    for s in dataset {
        ensure_dim("sample dimension", rho.dim(), s.input.len())?;
    }
    Ok(())
}

/// `(1/N) Σⱼ ½‖xʲ(1) − yʲ‖²`
pub fn risk(rho: &DepthParameterization, dataset: &[Sample]) -> Result<f64> {
    check_dataset(rho, dataset)?;
    let losses = dataset
        .par_iter()
        .map(|s| forward_trajectory(rho, s).map(|t| sample_loss(s, &t)))
        .collect::<Result<Vec<f64>>>()?;
    let value = losses.iter().sum::<f64>() / dataset.len() as f64;
    if !value.is_finite() {
        return Err(Error::Divergence { stage: "risk".into() });
    }
    Ok(value)
}

/// Loss gradient on the query token; context tokens start at zero.
pub fn terminal_adjoint(sample: &Sample, traj: &Trajectory) -> Vec<Vector> {
    let terminal = traj.terminal();
    let mut m = vec![Vector::zeros(terminal.dim()); terminal.token_count()];
    m[0] = &terminal.query - &sample.target;
    m
}

/// Runs the discrete adjoint recursion backward through the recorded states.
pub fn backward_adjoint(rho: &DepthParameterization, traj: &Trajectory, terminal: &[Vector]) -> Result<AdjointState> {
    let l = rho.layer_count();
    if traj.states.len() != l + 1 {
        return Err(Error::Invalid(format!(
            "trajectory has {} nodes, expected {}",
            traj.states.len(),
            l + 1
        )));
    }
    ensure_dim("terminal adjoint tokens", traj.terminal().token_count(), terminal.len())?;
    let h = rho.step_size();
    let mut nodes = vec![Vec::new(); l + 1];
    nodes[l] = terminal.to_vec();
    for layer in (0..l).rev() {
        let jac = token_jacobian(&rho.layers()[layer], &traj.states[layer])?;
        let next = &nodes[layer + 1];
        let pulled = jac.apply_transpose(next)?;
        let m: Vec<Vector> = next.iter().zip(&pulled).map(|(a, b)| a + b * h).collect();
        if m.iter().any(|x| !x.iter().all(|v| v.is_finite())) {
            return Err(Error::Divergence {
                stage: format!("adjoint layer {layer}"),
            });
        }
        nodes[layer] = m;
    }
    Ok(AdjointState { nodes })
}

/// Per-sample gradient contribution `Σᵢ D_θφ* m_{l+1,i}` for every head.
fn sample_field(rho: &DepthParameterization, traj: &Trajectory, adj: &AdjointState) -> Result<GradientField> {
    let mut field = GradientField::zeros_like(rho);
    for (l, layer) in rho.layers().iter().enumerate() {
        let state = &traj.states[l];
        let m = &adj.nodes[l + 1];
        for (h, head) in layer.heads().iter().enumerate() {
            let g = &mut field.layers[l][h];
            for (x, mi) in state.tokens().zip(m) {
                let der = d_theta_attention(head, &state.context, x)?;
                g.axpy(1.0, &der.adjoint(mi)?);
            }
        }
    }
    Ok(field)
}

/// Risk together with the gradient field.
pub fn risk_and_gradient(rho: &DepthParameterization, dataset: &[Sample]) -> Result<(f64, GradientField)> {
    check_dataset(rho, dataset)?;
    let per_sample = dataset
        .par_iter()
        .map(|s| {
            let traj = forward_trajectory(rho, s)?;
            let adj = backward_adjoint(rho, &traj, &terminal_adjoint(s, &traj))?;
            Ok((sample_loss(s, &traj), sample_field(rho, &traj, &adj)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = dataset.len() as f64;
    let mut field = GradientField::zeros_like(rho);
    let mut loss = 0.0;
    // fixed sample order for a deterministic reduction
    for (lj, fj) in &per_sample {
        loss += lj;
        for (acc, part) in field.layers.iter_mut().flatten().zip(fj.layers.iter().flatten()) {
            acc.axpy(1.0 / n, part);
        }
    }
    loss /= n;
    if !loss.is_finite() || !field.is_finite() {
        return Err(Error::Divergence {
            stage: "gradient field".into(),
        });
    }
    Ok((loss, field))
}

pub fn param_gradient(rho: &DepthParameterization, dataset: &[Sample]) -> Result<GradientField> {
    risk_and_gradient(rho, dataset).map(|(_, g)| g)
}

/// `sqrt((1/L) Σₗ (1/H) Σₕ ‖g_{lh}‖²)`
pub fn upper_gradient_norm(field: &GradientField) -> f64 {
    mean_head_norm(field, AttentionParams::norm_squared)
}

/// Same norm restricted to the `V` blocks.
pub fn upper_gradient_norm_v_only(field: &GradientField) -> f64 {
    mean_head_norm(field, AttentionParams::value_norm_squared)
}

fn mean_head_norm(field: &GradientField, f: impl Fn(&AttentionParams) -> f64) -> f64 {
    let count = field.layer_count() * field.head_count();
    if count == 0 {
        return 0.0;
    }
    let total: f64 = field.layers.iter().flatten().map(f).sum();
    (total / count as f64).sqrt()
}

/// Writes `layer,head,component,row,col,value`.
pub fn write_gradient_csv<W: Write>(out: W, field: &GradientField) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "head", "component", "row", "col", "value"])?;
    for (l, layer) in field.layers.iter().enumerate() {
        for (h, g) in layer.iter().enumerate() {
            let d = g.dim();
            for (k, val) in g.to_flat().iter().enumerate() {
                if !val.is_finite() {
                    return Err(Error::NonFinite("gradient dump".into()));
                }
                let (comp, row, col) = AttentionParams::locate(d, k);
                w.write_record(&[
                    l.to_string(),
                    h.to_string(),
                    comp.label().to_string(),
                    row.to_string(),
                    col.to_string(),
                    crate::fmt_f64(*val),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Component label helper for external consumers of the gradient dump.
pub fn component_of(dim: usize, flat_index: usize) -> ParamComponent {
    AttentionParams::locate(dim, flat_index).0
}
