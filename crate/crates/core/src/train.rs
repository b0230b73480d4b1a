//! Particle gradient-flow training: every head moves along `−g` with an
//! explicit Euler step in flow time.

use std::io::Write;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adjoint::{risk_and_gradient, upper_gradient_norm, upper_gradient_norm_v_only, GradientField};
use crate::attention::{smooth_value_clamp, AttentionParams, Matrix, Vector};
use crate::error::{Error, Result};
use crate::flow::{cot_distance, DepthParameterization, Sample};
use crate::ntk;

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

fn default_init_scale() -> f64 {
    1.0
}

fn default_max_halvings() -> u32 {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    /// Start from `V = 0` (plus `v_perturbation` noise).
    #[serde(default = "default_true")]
    pub fixup: bool,
    /// Standard deviation of the Gaussian `(Q, q)` entries, and of `V` when
    /// `fixup` is off.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Radius of the smooth `V` clamp applied after every step.
    #[serde(default)]
    pub v_clamp: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_one")]
    pub log_every: usize,
    /// Standard deviation of the `V` entries under `fixup`.
    #[serde(default)]
    pub v_perturbation: f64,
    /// Record `λ₀` of the `V`-kernel at every log point.
    #[serde(default)]
    pub track_lambda_min: bool,
    #[serde(default = "default_max_halvings")]
    pub max_halvings: u32,
}

impl TrainConfig {
    pub fn new(eta: f64, steps: usize) -> Self {
        Self {
            eta,
            steps,
            fixup: true,
            init_scale: 1.0,
            v_clamp: None,
            seed: 0,
            log_every: 1,
            v_perturbation: 0.0,
            track_lambda_min: false,
            max_halvings: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Invalid(format!("eta must be finite and nonnegative, got {}", self.eta)));
        }
        if self.steps == 0 {
            return Err(Error::Invalid("steps must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Invalid("log_every must be at least 1".into()));
        }
        if !(self.init_scale >= 0.0) || !(self.v_perturbation >= 0.0) {
            return Err(Error::Invalid("initialization scales must be nonnegative".into()));
        }
        if let Some(r) = self.v_clamp {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::Invalid(format!("v_clamp radius must be positive, got {r}")));
            }
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Matrix {
    Matrix::from_fn(d, d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Seeded Gaussian heads. The draw order is fixed (layer, head, then `Q`,
/// `q`, `V`), so `fixup` only changes the `V` scale and leaves `(Q, q)`
/// identical for the same seed.
pub fn init_parameterization(layers: usize, heads: usize, dim: usize, config: &TrainConfig) -> Result<DepthParameterization> {
    if layers == 0 || heads == 0 || dim == 0 {
        return Err(Error::Invalid("layers, heads and dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let v_scale = if config.fixup {
        config.v_perturbation
    } else {
        config.init_scale
    };
    let params = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| {
                    let query = gaussian_matrix(&mut rng, dim, config.init_scale);
                    let bias = Vector::from_fn(dim, |_, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        config.init_scale * z
                    });
                    let value = gaussian_matrix(&mut rng, dim, v_scale);
                    AttentionParams { query, bias, value }
                })
                .collect()
        })
        .collect();
    DepthParameterization::new(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    /// A step increased the loss after all allowed halvings.
    HalvingsExhausted,
    Diverged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub rate: f64,
    pub r_squared: f64,
    pub points: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub loss: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub v_grad_norm: Vec<f64>,
    pub lambda_min: Option<Vec<f64>>,
    /// Matched-particle distance between the initial and final heads.
    pub displacement: f64,
    /// `Σ eta·‖g‖` over accepted steps.
    pub path_length: f64,
    pub halvings: u32,
    pub final_eta: f64,
    pub steps_taken: usize,
    pub stop: StopReason,
    pub rate: Option<RateFit>,
    #[serde(skip)]
    pub terminal: DepthParameterization,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss.last().unwrap()
    }

    pub fn is_monotone(&self) -> bool {
        self.loss.windows(2).all(|w| w[1] <= w[0])
    }

    /// Writes `step,time,loss,grad_norm,v_grad_norm,lambda_min`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "time", "loss", "grad_norm", "v_grad_norm", "lambda_min"])?;
        for k in 0..self.loss.len() {
            let lam = self
                .lambda_min
                .as_ref()
                .map_or(String::new(), |l| crate::fmt_f64(l[k]));
            w.write_record(&[
                self.steps[k].to_string(),
                crate::fmt_f64(self.times[k]),
                crate::fmt_f64(self.loss[k]),
                crate::fmt_f64(self.grad_norm[k]),
                crate::fmt_f64(self.v_grad_norm[k]),
                lam,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Logger {
    report_steps: Vec<usize>,
    times: Vec<f64>,
    loss: Vec<f64>,
    grad_norm: Vec<f64>,
    v_grad_norm: Vec<f64>,
    lambda_min: Option<Vec<f64>>,
}

impl Logger {
    fn record(&mut self, step: usize, time: f64, loss: f64, field: &GradientField, rho: &DepthParameterization, dataset: &[Sample]) -> Result<()> {
        self.report_steps.push(step);
        self.times.push(time);
        self.loss.push(loss);
        self.grad_norm.push(upper_gradient_norm(field));
        self.v_grad_norm.push(upper_gradient_norm_v_only(field));
        if let Some(trace) = &mut self.lambda_min {
            trace.push(ntk::lambda0(rho, dataset)?);
        }
        Ok(())
    }
}

fn clamp_values(rho: &mut DepthParameterization, radius: f64) {
    for l in 0..rho.layer_count() {
        for h in 0..rho.head_count() {
            let head = rho.head_mut(l, h);
            head.value = smooth_value_clamp(&head.value, radius);
        }
    }
}

/// Runs the explicit gradient flow. A step that raises the loss is rejected
/// and retried with half the step size; the reduced step size is kept. After
/// `max_halvings` reductions a further increase ends the run, as does a
/// non-finite forward pass. Either way the partial report is returned.
pub fn train(rho0: &DepthParameterization, dataset: &[Sample], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let mut rho = rho0.clone();
    if let Some(r) = config.v_clamp {
        clamp_values(&mut rho, r);
    }
    let (mut loss, mut field) = risk_and_gradient(&rho, dataset)?;
    let mut log = Logger {
        report_steps: Vec::new(),
        times: Vec::new(),
        loss: Vec::new(),
        grad_norm: Vec::new(),
        v_grad_norm: Vec::new(),
        lambda_min: config.track_lambda_min.then(Vec::new),
    };
    log.record(0, 0.0, loss, &field, &rho, dataset)?;

    let mut eta = config.eta;
    let mut halvings = 0;
    let mut time = 0.0;
    let mut path_length = 0.0;
    let mut stop = StopReason::Completed;
    let mut taken = 0;

    'steps: for step in 1..=config.steps {
        let speed = upper_gradient_norm(&field);
        let (next, next_loss, next_field) = loop {
            let mut candidate = field.descend(&rho, eta);
            if let Some(r) = config.v_clamp {
                clamp_values(&mut candidate, r);
            }
            let (l, g) = match risk_and_gradient(&candidate, dataset) {
                Ok(v) => v,
                Err(Error::Divergence { stage }) => {
                    warn!("step {step}: divergence in {stage}");
                    stop = StopReason::Diverged;
                    break 'steps;
                }
                Err(e) => return Err(e),
            };
            if l <= loss {
                break (candidate, l, g);
            }
            if halvings == config.max_halvings {
                warn!("step {step}: loss increased after {halvings} halvings");
                stop = StopReason::HalvingsExhausted;
                break 'steps;
            }
            halvings += 1;
            eta *= 0.5;
            debug!("step {step}: loss increased, eta halved to {eta:e}");
        };
        rho = next;
        loss = next_loss;
        field = next_field;
        time += eta;
        path_length += eta * speed;
        taken = step;
        if step % config.log_every == 0 || step == config.steps {
            log.record(step, time, loss, &field, &rho, dataset)?;
        }
    }
    if taken != *log.report_steps.last().unwrap() {
        log.record(taken, time, loss, &field, &rho, dataset)?;
    }
    info!("trained {taken} steps: loss {:e} -> {loss:e}", log.loss[0]);

    let rate = pre_saturation_window(&log.loss, DEFAULT_SATURATION_RATIO)
        .filter(|&end| end >= 3)
        .and_then(|end| fit_linear_rate(&log.times[..end], &log.loss[..end]).ok());
    Ok(TrainReport {
        steps: log.report_steps,
        times: log.times,
        loss: log.loss,
        grad_norm: log.grad_norm,
        v_grad_norm: log.v_grad_norm,
        lambda_min: log.lambda_min,
        displacement: cot_distance(rho0, &rho)?,
        path_length,
        halvings,
        final_eta: eta,
        steps_taken: taken,
        stop,
        rate,
        terminal: rho,
    })
}

/// Losses below this fraction of the initial value sit at round-off level.
pub const DEFAULT_SATURATION_RATIO: f64 = 1e-12;

/// Length of the leading stretch of the trace that is still above
/// `ratio · loss[0]` and still strictly decreasing. `None` for an empty or
/// nonpositive start.
pub fn pre_saturation_window(losses: &[f64], ratio: f64) -> Option<usize> {
    let first = *losses.first()?;
    if !(first > 0.0) {
        return None;
    }
    let floor = ratio * first;
    let mut end = 1;
    while end < losses.len() && losses[end] > floor && losses[end] < losses[end - 1] {
        end += 1;
    }
    Some(end)
}

/// Least-squares fit `log loss ≈ a − rate·t`.
pub fn fit_linear_rate(times: &[f64], losses: &[f64]) -> Result<RateFit> {
    if times.len() != losses.len() {
        return Err(Error::DimensionMismatch {
            context: "rate fit",
            expected: times.len(),
            found: losses.len(),
        });
    }
    if times.len() < 2 {
        return Err(Error::Invalid("rate fit needs at least two points".into()));
    }
    if let Some(k) = losses.iter().position(|&l| !(l > 0.0)) {
        return Err(Error::Saturated(k));
    }
    let n = times.len() as f64;
    let logs: Vec<f64> = losses.iter().map(|l| l.ln()).collect();
    let tm = times.iter().sum::<f64>() / n;
    let ym = logs.iter().sum::<f64>() / n;
    let sxx: f64 = times.iter().map(|t| (t - tm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("rate fit needs distinct times".into()));
    }
    let sxy: f64 = times.iter().zip(&logs).map(|(t, y)| (t - tm) * (y - ym)).sum();
    let syy: f64 = logs.iter().map(|y| (y - ym).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(RateFit {
        rate: -slope,
        r_squared,
        points: times.len(),
    })
}
