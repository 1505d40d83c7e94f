//! End-to-end acceptance criteria. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line. Pass criterion ids
//! (`c4`, `c6`, ...) as arguments to run a subset.

use std::error::Error;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use nfem_autodiff::{softplus_inverse, Tape, Tensor, Var};
use nfem_cli::manifest::read_artifacts;
use nfem_cli::{run, Command, RunConfig};
use nfem_core::dataset::{generate_dataset, generate_load_case, inject_noise, split_dataset, OrderingStrategy, SampleSet};
use nfem_core::inference::{force_sweep, predict_mc_batch, Prediction};
use nfem_core::metrics::{aggregate, ablation_ordering, coverage_fraction, evaluate_model};
use nfem_core::problem::{Problem, ProblemKind};
use nfem_core::substream;
use nfem_core::training::{analytic_kl, evaluate, train, Batch, Objective, Phase, TrainConfig};
use nfem_core::unet::{ModelMode, UNet, UNetConfig};
use nfem_fem::{
    assemble_system, newton_solve, pk1_stress, strain_energy, total_potential_energy, DeformationState,
    GridMesh, LinearBaseline, Material, SolverOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<Outcome, Box<dyn Error>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome, Box<dyn Error>> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

const CRITERIA: [(&str, &str, Check); 11] = [
    ("C1", "FEM stress and residual consistency", c1_fem),
    ("C2", "Newton solver behavior", c2_newton),
    ("C3", "autodiff gradient checks", c3_autodiff),
    ("C4", "desk-scale deterministic surrogate", c4_surrogate),
    ("C5", "single-sample memorization", c5_memorization),
    ("C6", "VB uncertainty grows under extrapolation", c6_vb_extrapolation),
    ("C7", "MLE captures data noise", c7_mle_noise),
    ("C8", "DOF ordering ablation", c8_ordering),
    ("C9", "KL identity", c9_kl),
    ("C10", "manifest re-runs are bitwise identical", c10_determinism),
    ("C11", "error metrics and 2-sigma coverage", c11_metrics),
];

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_lowercase())
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| *f == id.to_lowercase()) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{id:<4} {:<4} {name}: {detail} [{secs:.1} s]",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn beam() -> Problem {
    Problem::standard(ProblemKind::Beam2d).expect("standard beam")
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

// ---------------------------------------------------------------- C1

fn c1_fem() -> Result<Outcome, Box<dyn Error>> {
    let start = Instant::now();
    let mat = Material::new(500.0, 0.4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-6;
    let mut worst_stress = 0.0f64;
    let mut states = 0;
    while states < 50 {
        let mut f = [[0.0; 3]; 3];
        for (i, row) in f.iter_mut().enumerate() {
            for (a, v) in row.iter_mut().enumerate() {
                *v = f64::from(u8::from(i == a)) + rng.random_range(-0.4..0.4);
            }
        }
        let s = DeformationState::from_gradient(f);
        if s.j <= 0.2 {
            continue;
        }
        states += 1;
        let p = pk1_stress(&s, &mat)?;
        let scale = p.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..3 {
            for a in 0..3 {
                let mut fp = f;
                let mut fm = f;
                fp[i][a] += h;
                fm[i][a] -= h;
                let fd = (strain_energy(&DeformationState::from_gradient(fp), &mat)?
                    - strain_energy(&DeformationState::from_gradient(fm), &mat)?)
                    / (2.0 * h);
                worst_stress = worst_stress.max((p[i][a] - fd).abs() / scale);
            }
        }
    }

    let mesh = GridMesh::beam(&[16, 4], &[4.0, 1.0])?;
    let n = mesh.dof_count();
    let free: Vec<usize> = mesh
        .free_dof_mask()
        .iter()
        .enumerate()
        .filter_map(|(d, &fr)| fr.then_some(d))
        .collect();
    let mut worst_residual = 0.0f64;
    for _ in 0..50 {
        let mut u = vec![0.0; n];
        let mut f = vec![0.0; n];
        for &d in &free {
            u[d] = rng.random_range(-0.05..0.05);
            f[d] = rng.random_range(-1.0..1.0);
        }
        let (r, _) = assemble_system(&mesh, &u, &mat, &f)?;
        for _ in 0..5 {
            let d = free[rng.random_range(0..free.len())];
            let mut up = u.clone();
            let mut um = u.clone();
            up[d] += h;
            um[d] -= h;
            let fd = (total_potential_energy(&mesh, &up, &mat, &f)?
                - total_potential_energy(&mesh, &um, &mat, &f)?)
                / (2.0 * h);
            worst_residual = worst_residual.max((r[d] - fd).abs() / r[d].abs().max(1.0));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_stress < 1e-6 && worst_residual < 1e-5 && secs < 60.0,
        format!(
            "stress rel err {worst_stress:.2e} (< 1e-6), residual rel err {worst_residual:.2e} (< 1e-5), 50 states each, {secs:.1} s (< 60 s)"
        ),
    )
}

// ---------------------------------------------------------------- C2

fn c2_newton() -> Result<Outcome, Box<dyn Error>> {
    let mesh = GridMesh::beam(&[16, 4], &[4.0, 1.0])?;
    let mat = Material::new(500.0, 0.4)?;
    let n = mesh.dof_count();
    let tip = mesh.compact_index(mesh.node_index(&[15, 3])).ok_or("tip node inactive")?;
    let load = |fx: f64, fy: f64| {
        let mut f = vec![0.0; n];
        f[2 * tip] = fx;
        f[2 * tip + 1] = fy;
        f
    };
    let opts = SolverOptions::default();
    let zero = newton_solve(&mesh, &mat, &vec![0.0; n], &opts)?;
    let zero_ok = zero.u.iter().all(|&v| v == 0.0) && zero.newton_iterations == 1;

    let small = load(0.0, -1e-3);
    let sol = newton_solve(&mesh, &mat, &small, &opts)?;
    let lin = LinearBaseline::new(&mesh, &mat)?.apply(&small)?;
    let small_err = rel_l2(&sol.u, &lin);

    let big = load(1.0, -2.0);
    let one = newton_solve(&mesh, &mat, &big, &opts)?;
    let four = newton_solve(
        &mesh,
        &mat,
        &big,
        &SolverOptions {
            fixed_steps: Some(4),
            ..opts
        },
    )?;
    let path = rel_l2(&four.u, &one.u);
    outcome(
        zero_ok && small_err < 0.01 && path < 1e-8 && four.load_steps >= 4,
        format!(
            "zero load: {} iteration(s), u = 0: {}; small load vs linear {small_err:.2e} (< 1e-2); 4-step vs 1-step {path:.2e} (< 1e-8)",
            zero.newton_iterations,
            zero.u.iter().all(|&v| v == 0.0)
        ),
    )
}

// ---------------------------------------------------------------- C3

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn square_sum(tape: &mut Tape, y: Var) -> Var {
    let sq = tape.mul(y, y).expect("mul");
    tape.sum(sq).expect("sum")
}

type Graph<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;

/// Worst norm-wise relative error between reverse-mode and central
/// difference gradients over all inputs.
fn fd_error(inputs: &[Tensor], build: Graph<'_>) -> f64 {
    let h = 1e-6;
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true).expect("leaf")).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).expect("value").item().expect("scalar")
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true).expect("leaf")).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).expect("backward");
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = tape.grad_or_zeros(vars[which]).expect("grad");
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            minus[which].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            num += (analytic[i] - fd).powi(2);
            den += fd * fd;
        }
        worst = worst.max(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() });
    }
    worst
}

fn model_fd_error(model: &UNet, batch: &Batch, objective: &Objective, noise: Option<u64>) -> Result<f64, Box<dyn Error>> {
    let rng = |s: Option<u64>| s.map(|s| substream(s, 0));
    let mut r = rng(noise);
    let eval = evaluate(model, batch, objective, Phase::Train, r.as_mut(), true)?;
    let trainable: Vec<usize> = (0..model.params().len()).filter(|&i| model.params()[i].trainable).collect();
    let mut pick = substream(404, 0);
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..10 {
        let pi = trainable[pick.random_range(0..trainable.len())];
        let k = pick.random_range(0..model.params()[pi].value.len());
        let h = 1e-6;
        let at = |delta: f64| -> Result<f64, Box<dyn Error>> {
            let mut m = model.clone();
            m.params_mut()[pi].value.data_mut()[k] += delta;
            let mut r = rng(noise);
            Ok(evaluate(&m, batch, objective, Phase::Train, r.as_mut(), false)?.value.total)
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        num += (fd - eval.grads[pi][k]).powi(2);
        den += eval.grads[pi][k].powi(2);
    }
    Ok((num / den).sqrt())
}

fn c3_autodiff() -> Result<Outcome, Box<dyn Error>> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut results: Vec<(&str, f64, f64)> = Vec::new();

    let x = random(&[2, 5, 4, 2], &mut rng);
    let k = random(&[3, 3, 2, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let conv = |t: &mut Tape, v: &[Var]| {
        let y = t.conv3x3(v[0], v[1], v[2]).expect("conv3x3");
        square_sum(t, y)
    };
    results.push(("conv3x3 2d", fd_error(&[x, k, b], &conv), 1e-6));
    let x = random(&[2, 3, 2, 4, 2], &mut rng);
    let k = random(&[3, 3, 3, 2, 2], &mut rng);
    let b = random(&[2], &mut rng);
    results.push(("conv3x3 3d", fd_error(&[x, k, b], &conv), 1e-6));

    let mut x = random(&[2, 4, 4, 2], &mut rng);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += (i as f64 * 0.37).sin() * 10.0;
    }
    let pool = |t: &mut Tape, v: &[Var]| {
        let y = t.maxpool2(v[0]).expect("maxpool");
        square_sum(t, y)
    };
    results.push(("maxpool", fd_error(&[x], &pool), 1e-6));

    let coarse = random(&[2, 2, 2, 3], &mut rng);
    let skip = random(&[2, 4, 4, 2], &mut rng);
    let w = random(&[2, 4, 4, 5], &mut rng);
    let up = |t: &mut Tape, v: &[Var]| {
        let y = t.upsample_concat(v[0], v[1]).expect("upsample");
        let c = t.constant(w.clone()).expect("constant");
        let yw = t.mul(y, c).expect("mul");
        square_sum(t, yw)
    };
    results.push(("upsample_concat", fd_error(&[coarse, skip], &up), 1e-6));

    let x = random(&[2, 3, 2, 4], &mut rng);
    let k = random(&[4, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let c1 = |t: &mut Tape, v: &[Var]| {
        let y = t.conv1x1(v[0], v[1], v[2]).expect("conv1x1");
        square_sum(t, y)
    };
    results.push(("conv1x1", fd_error(&[x, k, b], &c1), 1e-6));

    let mut x = random(&[9], &mut rng);
    x.data_mut().iter_mut().for_each(|v| *v *= 5.0);
    let sp = |t: &mut Tape, v: &[Var]| {
        let y = t.softplus(v[0]).expect("softplus");
        square_sum(t, y)
    };
    results.push(("softplus", fd_error(std::slice::from_ref(&x), &sp), 1e-6));
    let mut shifted = x.clone();
    shifted.data_mut().iter_mut().for_each(|v| *v += 0.013);
    let relu = |t: &mut Tape, v: &[Var]| {
        let y = t.relu(v[0]).expect("relu");
        square_sum(t, y)
    };
    results.push(("relu", fd_error(&[shifted], &relu), 1e-6));

    let x = random(&[2, 4, 2, 3], &mut rng);
    let pc = |t: &mut Tape, v: &[Var]| {
        let p = t.pad(v[0], &[(1, 2), (2, 0)]).expect("pad");
        let s = t.slice_channels(p, 1, 2).expect("slice");
        let c = t.crop(s, &[(1, 0), (0, 1)]).expect("crop");
        let sc = t.scale(c, 0.7).expect("scale");
        square_sum(t, sc)
    };
    results.push(("pad/slice/crop/scale", fd_error(&[x], &pc), 1e-6));

    let x = random(&[3, 2, 2, 3], &mut rng);
    let g = random(&[3], &mut rng);
    let be = random(&[3], &mut rng);
    let w = random(&[3, 2, 2, 3], &mut rng);
    for train in [true, false] {
        let bn = |t: &mut Tape, v: &[Var]| {
            let y = if train {
                t.batchnorm_train(v[0], v[1], v[2], 1e-3).expect("bn").0
            } else {
                t.batchnorm_infer(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-3)
                    .expect("bn")
            };
            let r = t.relu(y).expect("relu");
            let c = t.constant(w.clone()).expect("constant");
            let rw = t.mul(r, c).expect("mul");
            t.sum(rw).expect("sum")
        };
        let name = if train { "batchnorm+relu (train)" } else { "batchnorm+relu (infer)" };
        results.push((name, fd_error(&[x.clone(), g.clone(), be.clone()], &bn), 1e-5));
    }

    let target = random(&[2, 3, 2, 2], &mut rng);
    let mu = random(&[2, 3, 2, 2], &mut rng);
    let rho = random(&[2, 3, 2, 2], &mut rng);
    let mse = |t: &mut Tape, v: &[Var]| t.mse_loss(v[0], &target).expect("mse");
    results.push(("mse", fd_error(std::slice::from_ref(&mu), &mse), 1e-6));
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    let nll = |t: &mut Tape, v: &[Var]| t.gaussian_nll(v[0], v[1], &target, Some(&mask)).expect("nll");
    results.push(("gaussian nll", fd_error(&[mu, rho], &nll), 1e-6));
    let eps = random(&[4, 3], &mut rng);
    let kl = |t: &mut Tape, v: &[Var]| {
        let w = t.reparameterize(v[0], v[1], &eps).expect("reparameterize");
        let kl = t.kl_sample(w, v[0], v[1], v[2], 0.1).expect("kl");
        let s = square_sum(t, w);
        t.add(kl, s).expect("add")
    };
    let params = [random(&[4, 3], &mut rng), random(&[4, 3], &mut rng), random(&[1], &mut rng)];
    results.push(("reparameterize+kl", fd_error(&params, &kl), 1e-6));
    let arith = |t: &mut Tape, v: &[Var]| {
        let s = t.sub(v[0], v[1]).expect("sub");
        let a = t.add(s, v[1]).expect("add");
        let m = t.mul(a, v[1]).expect("mul");
        square_sum(t, m)
    };
    results.push(("add/sub/mul", fd_error(&[random(&[5], &mut rng), random(&[5], &mut rng)], &arith), 1e-6));

    let problem = beam();
    let (set, _) = generate_dataset(&problem, 3, (-2.5, 2.5), 31)?;
    let mask = problem.free_mask();
    let batch = Batch::from_samples(&set, &[0, 1, 2], Some(&mask))?;
    for (mode, seed) in [(ModelMode::Deterministic, 1), (ModelMode::Mle, 2), (ModelMode::Vb, 3)] {
        let mut cfg = UNetConfig::new(&[16, 4], mode);
        cfg.base_channels = 2;
        let model = UNet::build(cfg, seed)?;
        let (objective, noise) = match mode {
            ModelMode::Vb => (
                Objective {
                    kl_scale: 0.3,
                    mc_samples: 2,
                },
                Some(17),
            ),
            _ => (Objective::default(), None),
        };
        let err = model_fd_error(&model, &batch, &objective, noise)?;
        let name = match mode {
            ModelMode::Deterministic => "U-Net + mse",
            ModelMode::Mle => "U-Net + nll",
            ModelMode::Vb => "U-Net + kl + nll",
        };
        results.push((name, err, 1e-5));
    }

    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, e, tol)| !(e < tol))
        .map(|(n, e, tol)| format!("{n} {e:.1e} >= {tol:.0e}"))
        .collect();
    let worst = results.iter().map(|r| r.1).fold(0.0f64, f64::max);
    let detail = if failing.is_empty() {
        format!("{} checks, worst rel err {worst:.1e}, {secs:.1} s (< 120 s)", results.len())
    } else {
        format!("failing: {}; {secs:.1} s", failing.join(", "))
    };
    outcome(failing.is_empty() && secs < 120.0, detail)
}

// ---------------------------------------------------------------- C4

fn c4_surrogate() -> Result<Outcome, Box<dyn Error>> {
    let start = Instant::now();
    let problem = beam();
    let (set, _) = generate_dataset(&problem, 1000, (-2.5, 2.5), 4)?;
    let (train_set, test) = split_dataset(&set, 0.05, 4)?;
    let cfg = UNetConfig::new(&[16, 4], ModelMode::Deterministic);
    let mut model = UNet::build(cfg, 4)?;
    let tc = TrainConfig {
        epochs: 200,
        ..TrainConfig::for_dim(2)
    };
    let history = train(&mut model, &train_set, None, &tc)?;
    let eval = evaluate_model(&model, &test, &problem.active_mask(), 2, 0)?;
    let rel = eval.mean_relative_l2().ok_or("no relative error available")?;
    let slope = eval.slope.ok_or("no sensitivity slope")?;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        rel < 0.05 && slope < 0.02 && secs < 1800.0,
        format!(
            "N = 1000, c = 32, 200 epochs: mean rel l2 {:.2}% (< 5%), slope {slope:.4} (< 0.02), e_bar {:.3e} m, loss drop {:.0}x, {:.0} s (< 1800 s)",
            100.0 * rel,
            eval.report.e_bar,
            history.decrease_factor().unwrap_or(0.0),
            secs
        ),
    )
}

// ---------------------------------------------------------------- C5

fn c5_memorization() -> Result<Outcome, Box<dyn Error>> {
    let problem = beam();
    let (set, _) = generate_dataset(&problem, 1, (-2.5, 2.5), 5)?;
    let mut cfg = UNetConfig::new(&[16, 4], ModelMode::Deterministic);
    cfg.base_channels = MEMO_CHANNELS;
    let mut model = UNet::build(cfg, 5)?;
    let tc = TrainConfig {
        epochs: 2000,
        lr: MEMO_LR,
        ..TrainConfig::for_dim(2)
    };
    let batch = Batch::from_samples(&set, &[0, 0], None)?;
    let loss = |m: &UNet| -> Result<f64, Box<dyn Error>> {
        Ok(evaluate(m, &batch, &Objective::default(), Phase::Train, None, false)?.value.total)
    };
    let initial = loss(&model)?;
    train(&mut model, &set, None, &tc)?;
    let last = loss(&model)?;
    let ratio = last / initial;
    outcome(
        ratio < 1e-6,
        format!("2000 steps, c = {MEMO_CHANNELS}, lr {MEMO_LR:e}: loss {initial:.3e} -> {last:.3e}, ratio {ratio:.2e} (< 1e-6)"),
    )
}

const MEMO_CHANNELS: usize = 32;
const MEMO_LR: f64 = 1e-4;

// ---------------------------------------------------------------- C6 and C11

const VB_COUNT: usize = 400;
const VB_CHANNELS: usize = 16;
const VB_EPOCHS: usize = 60;
const VB_LR: f64 = 1e-3;
const PASSES: usize = 300;

struct VbRun {
    problem: Problem,
    model: UNet,
    test: SampleSet,
}

fn vb_run() -> Result<&'static VbRun, Box<dyn Error>> {
    static RUN: OnceLock<Result<VbRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let go = || -> Result<VbRun, Box<dyn Error>> {
            let problem = beam();
            let (set, _) = generate_dataset(&problem, VB_COUNT, (-2.5, 2.5), 6)?;
            let (train_set, test) = split_dataset(&set, 0.1, 6)?;
            let mut cfg = UNetConfig::new(&[16, 4], ModelMode::Vb);
            cfg.base_channels = VB_CHANNELS;
            let mut model = UNet::build(cfg, 6)?;
            let tc = TrainConfig {
                epochs: VB_EPOCHS,
                lr: VB_LR,
                ..TrainConfig::for_dim(2)
            };
            train(&mut model, &train_set, Some(&problem.free_mask()), &tc)?;
            Ok(VbRun { problem, model, test })
        };
        go().map_err(|e| e.to_string())
    })
    .as_ref()
    .map_err(|e| e.clone().into())
}

fn c6_vb_extrapolation() -> Result<Outcome, Box<dyn Error>> {
    let run = vb_run()?;
    let node = run.problem.monitored_node();
    let mags = [1.0, 3.0, 4.0, 5.0, 6.0];
    let rows = force_sweep(&run.model, &run.problem, node, &[0.0, -1.0], &mags, PASSES, 6)?;
    let std: Vec<f64> = rows.iter().map(|r| r.std_total).collect();
    let grows = std[3] > std[0];
    let inversions = std[1..].windows(2).filter(|w| w[1] < w[0]).count();
    let at4 = &rows[2];
    let reference = at4.fem_reference.ok_or("no FEM reference at 4 N")?;
    let covered = (at4.mean - reference).abs() <= 2.0 * at4.std_total;
    outcome(
        grows && inversions <= 1 && covered,
        format!(
            "std at |F| = 1,3,4,5,6 N: {}; inversions over 3..6 N: {inversions} (<= 1); at 4 N |mean - FEM| = {:.3e} vs 2 std = {:.3e}",
            std.iter().map(|s| format!("{s:.3e}")).collect::<Vec<_>>().join(", "),
            (at4.mean - reference).abs(),
            2.0 * at4.std_total
        ),
    )
}

fn c11_metrics() -> Result<Outcome, Box<dyn Error>> {
    let r = aggregate(&[0.0, 2.0], 1)?;
    let hand = (r.e_bar - 1.0).abs() < 1e-15 && (r.sigma_e - 2f64.sqrt()).abs() < 1e-15;
    let run = vb_run()?;
    let active = run.problem.active_mask();
    let forces: Vec<Vec<f64>> = run.test.samples.iter().map(|s| s.f.clone()).collect();
    let preds: Vec<Prediction> = predict_mc_batch(&run.model, &forces, PASSES, 11)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(&run.test.samples) {
        total += coverage_fraction(&p.mean, &p.std, &s.u, Some(&active))?;
    }
    let coverage = total / preds.len() as f64;
    outcome(
        hand && coverage >= 0.8,
        format!(
            "aggregate({{0, 2}}) = ({}, {:.6}); VB 2-sigma coverage over {} test samples {:.3} (>= 0.8)",
            r.e_bar,
            r.sigma_e,
            preds.len(),
            coverage
        ),
    )
}

// ---------------------------------------------------------------- C7

const MLE_COUNT: usize = 1000;
const MLE_CHANNELS: usize = 16;
const MLE_EPOCHS: usize = 200;
const MLE_RANGE: f64 = 1.0;
const MLE_LR: f64 = 1e-3;
const MLE_PROBES: usize = 2000;

fn c7_mle_noise() -> Result<Outcome, Box<dyn Error>> {
    let problem = beam();
    let (clean, _) = generate_dataset(&problem, MLE_COUNT, (-MLE_RANGE, MLE_RANGE), 7)?;
    let noisy = inject_noise(&clean, 0.7, 0.2, 7)?;
    let (train_set, _) = split_dataset(&noisy, 0.05, 7)?;
    let mut cfg = UNetConfig::new(&[16, 4], ModelMode::Mle);
    cfg.base_channels = MLE_CHANNELS;
    let mut model = UNet::build(cfg, 7)?;
    let tc = TrainConfig {
        epochs: MLE_EPOCHS,
        lr: MLE_LR,
        ..TrainConfig::for_dim(2)
    };
    let free = problem.free_mask();
    train(&mut model, &train_set, Some(&free), &tc)?;

    // Aleatoric std depends only on the input, so fresh load cases serve as
    // test inputs for both regimes.
    let mut rng = substream(77, 0);
    let forces = (0..MLE_PROBES)
        .map(|_| problem.embed(&generate_load_case(problem.mesh(), (-MLE_RANGE, MLE_RANGE), &mut rng)?))
        .collect::<Result<Vec<_>, _>>()?;
    let preds = predict_mc_batch(&model, &forces, 2, 7)?;
    let (mut noisy_std, mut clean_std) = (Vec::new(), Vec::new());
    for (p, f) in preds.iter().zip(&forces) {
        let free_std: Vec<f64> = p.aleatoric_std.iter().zip(&free).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
        let mean = free_std.iter().sum::<f64>() / free_std.len() as f64;
        if f.iter().all(|v| v.abs() <= 0.7) {
            noisy_std.push(mean);
        } else {
            clean_std.push(mean);
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ratio = avg(&noisy_std) / avg(&clean_std);

    let mut mags: Vec<f64> = (1..=4).map(|i| 0.25 * i as f64).collect();
    mags.push(5.0);
    let rows = force_sweep(&model, &problem, problem.monitored_node(), &[0.0, -1.0], &mags, 2, 7)?;
    let in_range = rows[..4].iter().map(|r| r.std_total).fold(0.0f64, f64::max);
    let out = rows[4].std_total;
    outcome(
        ratio >= 2.0 && out <= 1.5 * in_range,
        format!(
            "aleatoric std noisy/clean {ratio:.2} (>= 2, {} vs {} inputs); monitored std at 5 N {out:.3e} vs max over 0.25..1 N {in_range:.3e}, ratio {:.2} (<= 1.5)",
            noisy_std.len(),
            clean_std.len(),
            out / in_range
        ),
    )
}

// ---------------------------------------------------------------- C8

const ORDER_COUNT: usize = 300;
const ORDER_CHANNELS: usize = 8;
const ORDER_EPOCHS: usize = 160;
const ORDER_LR: f64 = 1e-3;
const ORDER_SEEDS: [u64; 3] = [1, 2, 3];

fn c8_ordering() -> Result<Outcome, Box<dyn Error>> {
    let problem = beam();
    let (set, _) = generate_dataset(&problem, ORDER_COUNT, (-2.5, 2.5), 8)?;
    let mut cfg = UNetConfig::new(&[16, 4], ModelMode::Deterministic);
    cfg.base_channels = ORDER_CHANNELS;
    let tc = TrainConfig {
        epochs: ORDER_EPOCHS,
        lr: ORDER_LR,
        ..TrainConfig::for_dim(2)
    };
    let (mut preferred, mut random) = (0.0, 0.0);
    let mut ratios = Vec::new();
    for seed in ORDER_SEEDS {
        let results = ablation_ordering(
            &set,
            &problem.active_mask(),
            &[OrderingStrategy::Preferred, OrderingStrategy::Random(8)],
            &cfg,
            seed,
            &tc,
            0.1,
            8,
        )?;
        preferred += results[0].report.e_bar / ORDER_SEEDS.len() as f64;
        random += results[1].report.e_bar / ORDER_SEEDS.len() as f64;
        ratios.push(format!("{:.2}", results[1].report.e_bar / results[0].report.e_bar));
    }
    let ratio = random / preferred;
    outcome(
        ratio >= 2.0,
        format!(
            "mean e_bar over model seeds {ORDER_SEEDS:?}: preferred {preferred:.3e} m, random {random:.3e} m, ratio {ratio:.2} (>= 2); per seed {}",
            ratios.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- C9

fn c9_kl() -> Result<Outcome, Box<dyn Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(1..6);
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rho: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..2.0)).collect();
        let mu_p = [rng.random_range(-1.0..1.0)];
        let sigma_p = rng.random_range(0.01..2.0);
        min_kl = min_kl.min(analytic_kl(&mu, &rho, &mu_p, sigma_p)?);
    }
    let sp = 0.1;
    let at_prior = analytic_kl(&[0.3, 0.3], &[softplus_inverse(sp); 2], &[0.3], sp)?;
    let off_mean = analytic_kl(&[0.3, 0.31], &[softplus_inverse(sp); 2], &[0.3], sp)?;
    let off_std = analytic_kl(&[0.3, 0.3], &[softplus_inverse(sp), softplus_inverse(0.11)], &[0.3], sp)?;
    let zero_iff = at_prior.abs() < 1e-14 && off_mean > 0.0 && off_std > 0.0;

    let (mu, sigma) = (0.3, 0.05);
    let analytic = analytic_kl(&[mu], &[softplus_inverse(sigma)], &[mu], sp)?;
    let n = 100_000;
    let mut draws = substream(909, 0);
    let eps: Vec<f64> = (0..n).map(|_| draws.sample(rand_distr::StandardNormal)).collect();
    let mut tape = Tape::new();
    let m = tape.leaf(Tensor::filled(&[n], mu), false)?;
    let r = tape.leaf(Tensor::filled(&[n], softplus_inverse(sigma)), false)?;
    let p = tape.leaf(Tensor::filled(&[1], mu), false)?;
    let w = tape.reparameterize(m, r, &Tensor::from_vec(&[n], eps)?)?;
    let kl = tape.kl_sample(w, m, r, p, sp)?;
    let estimate = tape.value(kl)?.item().ok_or("kl is not scalar")? / n as f64;
    let rel = ((estimate - analytic) / analytic).abs();
    outcome(
        min_kl >= 0.0 && zero_iff && rel < 0.01,
        format!(
            "min KL over 1000 random posteriors {min_kl:.3e} (>= 0); KL at prior {at_prior:.1e}, off-prior {off_mean:.2e} / {off_std:.2e}; MC (1e5 draws) {estimate:.5} vs analytic {analytic:.5}, rel {rel:.2e} (< 1e-2)"
        ),
    )
}

// ---------------------------------------------------------------- C10

fn c10_determinism() -> Result<Outcome, Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let flags = |out: &Path| -> Vec<String> {
        [
            ("output", out.to_str().expect("utf-8 path")),
            ("dataset.count", "40"),
            ("dataset.test_fraction", "0.1"),
            ("model.mode", "vb"),
            ("model.channels", "4"),
            ("train.epochs", "3"),
            ("train.lr", "0.001"),
            ("eval.passes", "8"),
        ]
        .iter()
        .flat_map(|(k, v)| [format!("--{k}"), v.to_string()])
        .collect()
    };
    let commands = [Command::Generate, Command::Train, Command::Evaluate];
    let cfg = RunConfig::parse("", &flags(&first))?;
    for c in commands {
        run(c, &cfg)?;
    }
    let mut checked = 0;
    let mut mismatched = Vec::new();
    for c in commands {
        let manifest = first.join(format!("{c}.manifest"));
        let text = std::fs::read_to_string(&manifest)?;
        let rerun = RunConfig::parse(&text, &[format!("--output={}", second.display())])?;
        let produced = run(c, &rerun)?.artifacts;
        let expected = read_artifacts(&manifest)?;
        if produced != expected {
            mismatched.push(format!("{c} checksums"));
        }
        for a in &expected {
            checked += 1;
            if std::fs::read(first.join(&a.name))? != std::fs::read(second.join(&a.name))? {
                mismatched.push(a.name.clone());
            }
        }
    }
    outcome(
        mismatched.is_empty() && checked > 0,
        if mismatched.is_empty() {
            format!("{checked} artifacts from generate/train/evaluate reproduced bitwise")
        } else {
            format!("differing: {}", mismatched.join(", "))
        },
    )
}
