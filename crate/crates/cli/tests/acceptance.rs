//! Acceptance run: one line per criterion, nonzero exit on any failure.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::*;
use mflab::adjoint::param_gradient;
use mflab::attention::*;
use mflab::experiments::{build_dataset, DatasetSpec, MANIFEST_FILE};
use mflab::flow::*;
use mflab::injectivity::*;
use mflab::ntk::*;
use mflab::train::*;
use nalgebra::SymmetricEigen;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn adjoint_gradient() -> Outcome {
    let started = Instant::now();
    let mut r = rng(1001);
    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut failures = 0;
    let mut components = 0;
    for k in 0..50 {
        let d = 1 + k % 3;
        let n = 1 + k % 4;
        let layers = 1 + (k / 3) % 4;
        let heads = 1 + (k / 2) % 3;
        let p = rho(&mut r, layers, heads, d, 0.7);
        let data = dataset(&mut r, 1 + k % 2, n, d);
        let g = param_gradient(&p, &data).unwrap();
        let fd = fd_gradient(&p, &data, 1e-5);
        let scale = (layers * heads) as f64;
        for l in 0..layers {
            for h in 0..heads {
                for (a, b) in g.get(l, h).to_flat().iter().zip(&fd[l][h]) {
                    let a = a / scale;
                    components += 1;
                    if !component_ok(a, *b, 1e-5, 1e-10) {
                        failures += 1;
                    }
                    let err = (a - b).abs();
                    if err > 1e-10 {
                        worst_rel = worst_rel.max(err / b.abs().max(a.abs()));
                    } else {
                        worst_abs = worst_abs.max(err);
                    }
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 30.0,
        format!("{components} components, {failures} outside tolerance, worst rel {worst_rel:.2e}, worst abs below floor {worst_abs:.2e}, {secs:.1}s"),
    )
}

fn derivative_formulas() -> Outcome {
    let mut r = rng(1002);
    let (mut jac, mut par, mut cov) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..100 {
        let d = 1 + k % 3;
        let s = state(&mut r, 1 + k % 4, d);
        let ens = HeadEnsemble::uniform((0..1 + k % 3).map(|_| head(&mut r, d, 0.8)).collect()).unwrap();
        let exact = token_jacobian(&ens, &s).unwrap().to_dense().unwrap();
        let fd = fd_token_jacobian(&ens, &s, 1e-6);
        jac = jac.max((&exact - &fd).norm() / exact.norm().max(1e-12));

        let h = head(&mut r, d, 0.8);
        let (exact, fd) = param_jacobians(&h, &s.context, &s.query, 1e-6);
        par = par.max((&exact - &fd).norm() / exact.norm().max(1e-12));

        let der = d_theta_attention(&h, &s.context, &s.query).unwrap();
        let p = softmax_weights(&h.query, &h.bias, &s.context, &s.query).unwrap();
        let oracle = double_sum_covariance(&p, s.context.points());
        if oracle.norm() > 0.0 {
            cov = cov.max((der.covariance() - &oracle).norm() / oracle.norm());
        } else {
            cov = cov.max(der.covariance().norm());
        }
    }
    outcome(
        jac <= 1e-6 && par <= 1e-6 && cov <= 1e-12,
        format!("100 instances, token jacobian {jac:.2e}, parameter jacobian {par:.2e}, covariance {cov:.2e}"),
    )
}

fn stacked_output(p: &DepthParameterization, s: &Sample, integrator: Integrator) -> Vector {
    let t = forward_trajectory_with(p, s, integrator).unwrap();
    stack(&t.terminal().tokens().cloned().collect::<Vec<_>>())
}

fn forward_bounds() -> Outcome {
    let mut r = rng(1003);
    let mut violations = 0;
    for k in 0..100 {
        let p = rho(&mut r, 1 + k % 4, 1 + k % 3, 2, 1.5);
        let s = Sample::new(cloud(&mut r, 3, 2), gvec(&mut r, 2, 1.0), gvec(&mut r, 2, 1.0)).unwrap();
        let t = forward_trajectory(&p, &s).unwrap();
        let factor: f64 = p
            .layers()
            .iter()
            .map(|l| 1.0 + p.step_size() * l.heads().iter().map(|h| h.value_op_norm()).sum::<f64>() / l.len() as f64)
            .product();
        if t.terminal().max_norm() > t.states[0].max_norm() * factor * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    let p = rho(&mut r, 4, 2, 2, 1.0).refined(4);
    let s = Sample::new(cloud(&mut r, 3, 2), gvec(&mut r, 2, 1.0), gvec(&mut r, 2, 1.0)).unwrap();
    let ratio = |integrator| {
        let a = stacked_output(&p, &s, integrator);
        let b = stacked_output(&p.refined(2), &s, integrator);
        let c = stacked_output(&p.refined(4), &s, integrator);
        (&a - &b).norm() / (&b - &c).norm()
    };
    let euler = ratio(Integrator::Euler);
    let rk4 = ratio(Integrator::Rk4);
    outcome(
        violations == 0 && (1.5..=2.5).contains(&euler) && (12.0..=20.0).contains(&rk4),
        format!("gronwall violations {violations}/100, euler ratio {euler:.3} (L={}), rk4 ratio {rk4:.3}", p.layer_count()),
    )
}

fn kron_identity(k1: &Matrix, d: usize) -> Matrix {
    let n = k1.nrows();
    Matrix::from_fn(n * d, n * d, |i, j| if i % d == j % d { k1[(i / d, j / d)] } else { 0.0 })
}

fn quad(k: &Matrix, m: &Vector) -> f64 {
    m.dot(&(k * m))
}

/// `(1/H) Σₕ ‖Σᵢ D_θφ* mᵢ‖²` and `(1/H) Σₕ ‖Σᵢ cᵢ ȳₕ(xᵢ)‖²` assembled head by head.
fn quadratic_forms(p: &DepthParameterization, ts: &[Trajectory], l: usize, m: &Vector, c: &Vector) -> (f64, f64) {
    let d = p.dim();
    let heads = p.layers()[l].heads();
    let (mut full, mut v) = (0.0, 0.0);
    for h in heads {
        let mut acc = AttentionParams::zeros(d);
        let mut feat = Vector::zeros(d);
        let mut row = 0;
        for t in ts {
            let st = &t.states[l];
            for x in st.tokens() {
                let der = d_theta_attention(h, &st.context, x).unwrap();
                acc.axpy(1.0, &der.adjoint(&m.rows(row * d, d).into_owned()).unwrap());
                let w = softmax_weights(&h.query, &h.bias, &st.context, x).unwrap();
                let mean = w.iter().zip(st.context.points()).fold(Vector::zeros(d), |a, (wi, y)| a + y * *wi);
                feat += mean * c[row];
                row += 1;
            }
        }
        full += acc.norm_squared();
        v += feat.norm_squared();
    }
    (full / heads.len() as f64, v / heads.len() as f64)
}

fn ntk_structure() -> Outcome {
    let mut r = rng(1004);
    let (mut psd, mut dominance, mut gram) = (f64::INFINITY, f64::INFINITY, 0.0f64);
    for k in 0..20 {
        let d = 1 + k % 3;
        let p = rho(&mut r, 2, 1 + k % 4, d, 1.0);
        let data = dataset(&mut r, 2, 2 + k % 3, d);
        let ts = trajectories(&p, &data).unwrap();
        let n = total_tokens(&ts);
        for l in 0..2 {
            let k1 = ntk_v_matrix(&p, &ts, l).unwrap();
            let kf = ntk_full_matrix(&p, &ts, l, 64).unwrap();
            let s1 = spectrum(&k1).unwrap();
            let sf = spectrum(&kf).unwrap();
            psd = psd.min(s1.lambda_min / s1.lambda_max).min(sf.lambda_min / sf.lambda_max);
            let gap = SymmetricEigen::new(&kf - kron_identity(&k1, d)).eigenvalues.min();
            dominance = dominance.min(gap / sf.lambda_max);
            let m = gvec(&mut r, n * d, 1.0);
            let c = gvec(&mut r, n, 1.0);
            let (qf, q1) = quadratic_forms(&p, &ts, l, &m, &c);
            gram = gram.max(rel_err(quad(&kf, &m), qf, 1e-300)).max(rel_err(quad(&k1, &c), q1, 1e-300));
        }
    }
    // layer-constant FixUp: V = 0 and the same heads at every depth
    let layer: Vec<AttentionParams> = (0..4)
        .map(|_| {
            let mut h = head(&mut r, 2, 1.0);
            h.value.fill(0.0);
            h
        })
        .collect();
    let fixup = DepthParameterization::new(vec![layer; 4]).unwrap();
    let report = ntk_report(&fixup, &dataset(&mut r, 2, 3, 2), NtkOptions::default()).unwrap();
    let first = &report.layers[0].k1;
    let drift = report
        .layers
        .iter()
        .map(|l| (&l.k1 - first).norm() / first.norm())
        .fold(0.0, f64::max);
    outcome(
        psd >= -1e-10 && dominance >= -1e-10 && drift <= 1e-12 && gram <= 1e-12,
        format!("min λ_min/λ_max {psd:.2e}, min λ_min(K − K¹⊗I)/λ_max {dominance:.2e}, fixup depth drift {drift:.2e}, gram vs quadratic form {gram:.2e}"),
    )
}

fn sigma(measures: &[ProbeMeasure], mode: &IndependenceMode) -> f64 {
    let grid = match mode {
        IndependenceMode::Weak => ProbeGrid::weak_default(measures, 1).unwrap(),
        IndependenceMode::Strong { direction } => ProbeGrid::strong_default(measures, &Vector::from_column_slice(direction)).unwrap(),
    };
    independence_sigma_min(measures, mode, &grid, DEFAULT_THRESHOLD).unwrap().sigma_min
}

fn injectivity_separation() -> Outcome {
    let modes = [IndependenceMode::Weak, IndependenceMode::Strong { direction: vec![0.6, 0.8] }];
    let iso = ProbeMeasure::isotropic;
    let positive: Vec<(&str, Vec<ProbeMeasure>)> = vec![
        ("cubes", [1.0, 2.0].iter().map(|&a| ProbeMeasure::UniformCube { dim: 2, radius: a }).collect()),
        ("laplace", [0.5, 1.0, 1.5].iter().map(|&s| ProbeMeasure::Laplace { covariance: iso(2, s) }).collect()),
        (
            "mixtures",
            [1.0, 2.0]
                .iter()
                .map(|&a| ProbeMeasure::GaussianMixtureTwoPoint {
                    offset: vec![a, 0.0],
                    covariance: iso(2, 1.0),
                })
                .collect(),
        ),
    ];
    let base = ProbeMeasure::discrete(&TokenCloud::uniform(vec![v(&[0.0, 0.0]), v(&[1.0, 0.3]), v(&[-0.2, 0.8])]).unwrap());
    let other = ProbeMeasure::discrete(&TokenCloud::uniform(vec![v(&[0.5, -0.5]), v(&[-0.4, 0.9])]).unwrap());
    let negative: Vec<(&str, Vec<ProbeMeasure>)> = vec![
        ("dirac", vec![ProbeMeasure::dirac(&[0.3, -0.2]), ProbeMeasure::dirac(&[1.0, 0.4])]),
        ("translate", vec![base.clone(), ProbeMeasure::translate(base.clone(), vec![0.5, -1.0])]),
        ("convolution", vec![base.clone(), other.clone(), ProbeMeasure::convolve(base.clone(), other.clone())]),
        (
            "shared-gaussian",
            vec![
                ProbeMeasure::gaussian_smooth(ProbeMeasure::dirac(&[0.3, -0.2]), vec![vec![1.0, 0.2], vec![0.2, 0.5]]),
                ProbeMeasure::gaussian_smooth(ProbeMeasure::dirac(&[-1.0, 0.7]), vec![vec![1.0, 0.2], vec![0.2, 0.5]]),
            ],
        ),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, family) in &positive {
        let s: Vec<f64> = modes.iter().map(|m| sigma(family, m)).collect();
        ok &= s.iter().all(|&x| x >= 1e-4);
        parts.push(format!("{name} {:.1e}/{:.1e}", s[0], s[1]));
    }
    for (name, family) in &negative {
        let s: Vec<f64> = modes.iter().map(|m| sigma(family, m)).collect();
        ok &= s.iter().all(|&x| x <= 1e-10);
        parts.push(format!("{name} {:.1e}/{:.1e}", s[0], s[1]));
    }
    // cumulant identities against explicitly built measures
    let mut r = rng(1005);
    let mut identity = 0.0f64;
    for _ in 0..20 {
        let a = cloud(&mut r, 3, 2);
        let b = cloud(&mut r, 2, 2);
        let shift = gvec(&mut r, 2, 1.0);
        let mut pts = Vec::new();
        let mut ws = Vec::new();
        for (x, wx) in a.points().iter().zip(a.weights()) {
            for (y, wy) in b.points().iter().zip(b.weights()) {
                pts.push((x + y).as_slice().to_vec());
                ws.push(wx * wy);
            }
        }
        let product = ProbeMeasure::Discrete { points: pts, weights: Some(ws) };
        let conv = ProbeMeasure::convolve(ProbeMeasure::discrete(&a), ProbeMeasure::discrete(&b));
        let moved = ProbeMeasure::Discrete {
            points: a.points().iter().map(|x| (x - &shift).as_slice().to_vec()).collect(),
            weights: Some(a.weights().to_vec()),
        };
        let trans = ProbeMeasure::translate(ProbeMeasure::discrete(&a), shift.as_slice().to_vec());
        for _ in 0..5 {
            let q = gvec(&mut r, 2, 1.0);
            let c = conv.cumulant(&q).unwrap();
            let t = trans.cumulant(&q).unwrap();
            identity = identity
                .max((c - product.cumulant(&q).unwrap()).abs() / c.abs().max(1.0))
                .max((t - moved.cumulant(&q).unwrap()).abs() / t.abs().max(1.0));
        }
    }
    ok &= identity <= 1e-12;
    outcome(ok, format!("σ_min weak/strong: {}; identities {identity:.1e}", parts.join(", ")))
}

fn pairwise_distinctness() -> Outcome {
    let mut passed = 0;
    let mut smallest = f64::INFINITY;
    for seed in 0..100 {
        let mut r = rng(2000 + seed);
        let clouds: Vec<TokenCloud> = (0..3).map(|_| uniform_cloud(&mut r, 4, 2)).collect();
        let report = check_pairwise_difference_condition(&clouds, None).unwrap();
        smallest = smallest.min(report.min_gap);
        if report.passed && report.min_gap > 1e-6 {
            passed += 1;
        }
    }
    outcome(passed == 100, format!("{passed}/100 seeds, smallest gap {smallest:.2e}"))
}

/// FixUp initialization with `heads` Gaussian heads of spread `scale`.
fn spread_fixup(layers: usize, heads: usize, scale: f64, seed: u64) -> DepthParameterization {
    let mut cfg = TrainConfig::new(1.0, 1);
    cfg.seed = seed;
    cfg.init_scale = scale;
    init_parameterization(layers, heads, 2, &cfg).unwrap()
}

fn bridge() -> Outcome {
    // weak-independent side: two Gaussian clouds
    let mut r = rng(0);
    let positive: Vec<Sample> = (0..2)
        .map(|_| {
            let c = uniform_cloud(&mut r, 3, 2);
            let x = gvec(&mut r, 2, 1.0);
            Sample::new(c, x.clone(), x).unwrap()
        })
        .collect();
    let measures: Vec<ProbeMeasure> = positive.iter().map(|s| ProbeMeasure::discrete(&s.cloud)).collect();
    let weak = sigma(&measures, &IndependenceMode::Weak);
    let n_pos: usize = positive.iter().map(|s| s.cloud.len() + 1).sum();
    let p = spread_fixup(2, 4 * n_pos, 2.0, 11);
    let report = ntk_report(&p, &positive, NtkOptions::default()).unwrap();
    let pos_ratio = report
        .layers
        .iter()
        .map(|l| l.k1_spectrum.lambda_min / l.k1_spectrum.lambda_max)
        .fold(f64::INFINITY, f64::min);

    // convolution side: {0, b}, {0, d} and their sum set
    let (b, d, z, x1) = (v(&[1.0, 0.3]), v(&[-0.4, 0.9]), v(&[0.0, 0.0]), v(&[0.5, -0.7]));
    let negative: Vec<Sample> = [
        vec![z.clone(), b.clone()],
        vec![z.clone(), d.clone()],
        vec![z.clone(), b.clone(), d.clone(), &b + &d],
    ]
    .into_iter()
    .map(|pts| Sample::new(TokenCloud::uniform(pts).unwrap(), x1.clone(), x1.clone()).unwrap())
    .collect();
    let n_neg: usize = negative.iter().map(|s| s.cloud.len() + 1).sum();
    let q = spread_fixup(2, 4 * n_neg, 2.0, 11);
    let report = ntk_report(&q, &negative, NtkOptions::default()).unwrap();
    let neg_ratio = report
        .layers
        .iter()
        .map(|l| l.k1_spectrum.lambda_min / l.k1_spectrum.lambda_max)
        .fold(0.0, f64::max);
    let probes: Vec<AttentionParams> = q.heads().map(|(_, _, h)| h.clone()).collect();
    let witness = null_direction_witness(&negative, &x1, &z, &[1.0, 1.0, -1.0], &probes).unwrap();
    // the witness is also a near-null vector of every layer kernel
    let m = witness.stacked();
    let rayleigh = report
        .layers
        .iter()
        .map(|l| quad(&l.k1, &m) / m.norm_squared() / l.k1_spectrum.lambda_max)
        .fold(0.0, f64::max);
    outcome(
        weak >= DEFAULT_THRESHOLD && pos_ratio >= 1e-6 && neg_ratio <= 1e-8 && witness.residual <= 1e-8,
        format!(
            "positive (H={}, weak σ_min {weak:.2e}) λ_min/λ_max {pos_ratio:.2e}; convolution (H={}) {neg_ratio:.2e}, witness residual {:.2e}, rayleigh {rayleigh:.2e}",
            4 * n_pos,
            4 * n_neg,
            witness.residual
        ),
    )
}

fn local_convergence() -> Outcome {
    let started = Instant::now();
    let mut cfg = TrainConfig::new(1.0, 2000);
    cfg.seed = 3;
    cfg.v_perturbation = 1e-3;
    let p = init_parameterization(4, 8, 2, &cfg).unwrap();
    let spec = DatasetSpec::GaussianIid {
        samples: 2,
        tokens: 3,
        seed: 7,
        scale: 1.0,
        target_offset: 1e-2,
        duplicate_last: false,
    };
    let data = build_dataset(&spec, 2, &p, Integrator::Euler).unwrap();
    let lambda0 = lambda0(&p, &data).unwrap();
    let report = train(&p, &data, &cfg).unwrap();
    let ratio = report.final_loss() / report.initial_loss();
    let fit = report.rate;
    let r2 = fit.map_or(f64::NAN, |f| f.r_squared);
    let secs = started.elapsed().as_secs_f64();
    outcome(
        lambda0 > 0.0 && ratio <= 1e-6 && report.is_monotone() && report.halvings <= 3 && r2 >= 0.95 && secs < 60.0,
        format!(
            "λ₀ {lambda0:.2e}, final/initial {ratio:.2e}, monotone {}, halvings {}, R² {r2:.5} over {} points, rate {:.3}, {secs:.1}s",
            report.is_monotone(),
            report.halvings,
            fit.map_or(0, |f| f.points),
            fit.map_or(f64::NAN, |f| f.rate),
        ),
    )
}

fn softmax_max_limit() -> Outcome {
    let mut worst = 0.0f64;
    let mut separation = f64::INFINITY;
    let mut monotone = true;
    for k in 0..20 {
        let mut r = rng(1000 + k);
        let c = uniform_cloud(&mut r, 5, 2);
        let e = gvec(&mut r, 2, 1.0).normalize();
        let gaps: Vec<f64> = [5.0, 10.0, 50.0, 200.0].iter().map(|&s| softmax_max_gap(&c, &e, s).unwrap()).collect();
        monotone &= gaps.windows(2).all(|w| w[1] <= w[0]);
        worst = worst.max(gaps[3] / c.max_norm());
        let mut scores: Vec<f64> = c.points().iter().map(|y| e.dot(y)).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        separation = separation.min(scores[0] - scores[1]);
    }
    outcome(
        monotone && worst <= 1e-6,
        format!("20 clouds, max gap(200)/scale {worst:.2e}, monotone {monotone}, smallest top-two score gap {separation:.3}"),
    )
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != MANIFEST_FILE)
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    let mut configs: Vec<PathBuf> = fs::read_dir(workspace_root().join("configs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    configs.sort();
    let tmp = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    let mut files = 0;
    for cfg in &configs {
        let stem = cfg.file_stem().unwrap().to_string_lossy().into_owned();
        let runs: Vec<PathBuf> = (0..2)
            .map(|k| {
                let out = tmp.path().join(format!("{stem}-{k}"));
                let status = Command::new(env!("CARGO_BIN_EXE_mflab"))
                    .arg("run")
                    .arg(cfg)
                    .arg("--out")
                    .arg(&out)
                    .arg("--workers")
                    .arg(if k == 0 { "1" } else { "4" })
                    .output()
                    .unwrap()
                    .status;
                assert!(status.success(), "{stem} exited with {status}");
                out
            })
            .collect();
        let (a, b) = (artifacts(&runs[0]), artifacts(&runs[1]));
        files += a.len();
        if a != b || a.is_empty() {
            mismatched.push(stem);
        }
    }
    outcome(
        mismatched.is_empty() && !configs.is_empty(),
        format!("{} configs, {files} files compared, mismatched {mismatched:?}", configs.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("adjoint gradient exactness", adjoint_gradient),
        ("derivative formulas", derivative_formulas),
        ("forward bounds and order", forward_bounds),
        ("ntk structure", ntk_structure),
        ("injectivity separation", injectivity_separation),
        ("pairwise distinctness", pairwise_distinctness),
        ("kernel/injectivity bridge", bridge),
        ("local convergence", local_convergence),
        ("softmax-max limit", softmax_max_limit),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let o = check();
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2} {name}: {} [{:.1}s]", k + 1, o.detail, started.elapsed().as_secs_f64());
        if !o.passed {
            failed += 1;
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
