//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ndarray::Array2;
use rand::Rng as _;
use structreg::autodiff::{finite_diff_check, Graph};
use structreg::data::gen_two_moons;
use structreg::model::MlpClassifier;
use structreg::regularize::{
    emu_targets_graph, eta, mixup_transform, plan_mix, ramp_weight, rescaled_radius,
    structural_loss, supervised_ce, MixPlan, StructuralLossKind, TransformKind, STEP_GUARD,
};
use structreg::trainer::{run, EpsilonInit, RunConfig, RunOptions, RunResult, Trainer};
use structreg::seeded_rng;
use structreg_cli::config::Experiment;

const REDUCTION_TOL: f64 = 1e-10;
const ETA_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const BENEFIT_POINTS: f64 = 5.0;
const ADAPT_FRACTION: f64 = 0.01;

type Outcome = Result<String, String>;

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mixup_reduction() -> Outcome {
    let base = RunConfig {
        total_batches: 1000,
        eval_interval: 1000,
        label_quality: false,
        epsilon_init: EpsilonInit::Absolute(0.0),
        epsilon_learnable: false,
        ..RunConfig::default()
    };
    let a = run(RunConfig { transform: TransformKind::Emu, ..base.clone() }, &RunOptions::default())
        .map_err(|e| e.to_string())?;
    let b = run(RunConfig { transform: TransformKind::Mixup, ..base }, &RunOptions::default())
        .map_err(|e| e.to_string())?;
    let worst = a
        .steps
        .iter()
        .zip(&b.steps)
        .map(|(x, y)| (x.l_total - y.l_total).abs().max((x.l_struct - y.l_struct).abs()))
        .fold(0.0, f64::max);
    let msg = format!("{} steps, max |ΔL| = {worst:.3e}", a.steps.len());
    if a.steps.len() >= 1000 && worst <= REDUCTION_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Three-case definition written out independently of the library.
fn eta_reference(lambda: f64, nu: f64) -> f64 {
    if nu >= 0.5 - STEP_GUARD {
        return if lambda < 0.5 { 0.0 } else if lambda > 0.5 { 1.0 } else { 0.5 };
    }
    if lambda <= nu {
        0.0
    } else if lambda >= 1.0 - nu {
        1.0
    } else {
        (lambda - nu) / (1.0 - 2.0 * nu)
    }
}

fn eta_algebra() -> Outcome {
    let mut rng = seeded_rng(2024);
    let n = 20_000;
    let mut worst_case = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut step_points = 0;
    for _ in 0..n {
        let lambda: f64 = rng.random_range(0.0..=1.0);
        let eps: f64 = rng.random_range(0.0..5.0);
        let dist: f64 = rng.random_range(0.01..10.0);
        let nu = rescaled_radius(eps, dist);
        worst_case = worst_case.max((eta(lambda, nu) - eta_reference(lambda, nu)).abs());
        worst_sym = worst_sym.max((eta(1.0 - lambda, nu) - (1.0 - eta(lambda, nu))).abs());
        if nu >= 0.5 {
            step_points += 1;
        }
    }
    let mut monotone_violations = 0;
    for _ in 0..10 {
        let nu: f64 = rng.random_range(0.0..0.5 - STEP_GUARD);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=1000 {
            let e = eta(k as f64 / 1000.0, nu);
            if e < prev {
                monotone_violations += 1;
            }
            prev = e;
        }
    }
    let reduction = (0..=1000).all(|k| eta(k as f64 / 1000.0, 0.0) == k as f64 / 1000.0);
    let msg = format!(
        "{n} points ({step_points} in step regime): case err {worst_case:.1e}, symmetry err {worst_sym:.1e}, {monotone_violations} monotonicity violations"
    );
    if worst_case <= ETA_TOL && worst_sym <= ETA_TOL && monotone_violations == 0 && reduction && step_points > 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn interior(plan: &MixPlan, eps: f64, h: f64) -> bool {
    plan.lambda.iter().zip(&plan.pair_distance).all(|(&l, &d)| {
        [eps - h, eps + h].iter().all(|&e| {
            let nu = rescaled_radius(e, d);
            d > 1e-6 && (nu - 0.5).abs() > 1e-3 && (l - nu).abs() > 1e-6 && (l - (1.0 - nu)).abs() > 1e-6
        })
    })
}

fn epsilon_gradient_oracle() -> Outcome {
    let ds = gen_two_moons(1000, 0.1, 0).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(77);
    let model = MlpClassifier::new(&[2, 16, 2], &mut rng).map_err(|e| e.to_string())?;
    let mut accepted = 0;
    let mut attempts = 0;
    let mut worst = 0.0f64;
    while accepted < 100 && attempts < 10_000 {
        attempts += 1;
        let rows: Vec<usize> = (0..16).map(|_| rng.random_range(0..ds.len())).collect();
        let x = ds.features.select(ndarray::Axis(0), &rows);
        let targets = model.predict(x.view()).map_err(|e| e.to_string())?;
        let plan = plan_mix(x.view(), 1.0, &mut rng).map_err(|e| e.to_string())?;
        let eps = rng.random_range(0.05..0.6);
        let h = 1e-6;
        if !interior(&plan, eps, h) {
            continue;
        }
        let loss = |e: f64, backward: bool| -> (f64, f64) {
            let mut g = Graph::new();
            let en = g.scalar(e, true);
            let yt = emu_targets_graph(&mut g, en, targets.view(), &plan).unwrap();
            let params = model.bind(&mut g);
            let xt = mixup_transform(x.view(), targets.view(), &plan).unwrap().x_tilde;
            let xn = g.constant(xt.into_dyn());
            let z = model.forward_graph(&mut g, &params, xn).unwrap();
            let p = g.softmax_rows(z).unwrap();
            let l = structural_loss(&mut g, p, yt, StructuralLossKind::Mse).unwrap();
            if backward {
                g.backward(l).unwrap();
                (g.scalar_value(l), g.grad(en)[[]])
            } else {
                (g.scalar_value(l), 0.0)
            }
        };
        let (_, analytic) = loss(eps, true);
        let numeric = (loss(eps + h, false).0 - loss(eps - h, false).0) / (2.0 * h);
        if numeric.abs() < 1e-6 {
            continue;
        }
        worst = worst.max((analytic - numeric).abs() / numeric.abs());
        accepted += 1;
    }
    let msg = format!("{accepted} batches, max relative error {worst:.2e}");
    if accepted >= 100 && worst < GRAD_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn full_model_gradient_oracle() -> Outcome {
    let mut rng = seeded_rng(5);
    let model = MlpClassifier::new(&[2, 16, 2], &mut rng).map_err(|e| e.to_string())?;
    let xl = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
    let yl = Array2::from_shape_fn((6, 2), |(i, j)| if i % 2 == j { 1.0 } else { 0.0 });
    let xs = Array2::from_shape_fn((12, 2), |_| rng.random_range(-1.0..1.0));
    let ps = model.predict(xs.view()).map_err(|e| e.to_string())?;
    let plan = plan_mix(xs.view(), 1.0, &mut rng).map_err(|e| e.to_string())?;
    let xt = mixup_transform(xs.view(), ps.view(), &plan)
        .map_err(|e| e.to_string())?
        .x_tilde;
    let eps = 0.1 * plan.max_distance();
    let f = |flat: &[f64]| -> (f64, Vec<f64>) {
        let m = model.with_flat(flat);
        let mut g = Graph::new();
        let params = m.bind(&mut g);
        let a = g.constant(xl.clone().into_dyn());
        let b = g.constant(yl.clone().into_dyn());
        let ll = m.forward_graph(&mut g, &params, a).unwrap();
        let sup = supervised_ce(&mut g, ll, b).unwrap();
        let en = g.scalar(eps, false);
        let yt = emu_targets_graph(&mut g, en, ps.view(), &plan).unwrap();
        let c = g.constant(xt.clone().into_dyn());
        let ls = m.forward_graph(&mut g, &params, c).unwrap();
        let pr = g.softmax_rows(ls).unwrap();
        let st = structural_loss(&mut g, pr, yt, StructuralLossKind::Mse).unwrap();
        let ws = g.scale(st, 3.0);
        let total = g.add(sup, ws).unwrap();
        g.backward(total).unwrap();
        let grads = m.gradients(&g, &params);
        let flat_grad = MlpClassifier::from_layers(grads.layers).unwrap().flatten();
        (g.scalar_value(total), flat_grad)
    };
    let worst = finite_diff_check(f, &model.flatten(), 1e-5).map_err(|e| e.to_string())?;
    let msg = format!("{} parameters, max relative error {worst:.2e}", model.param_count());
    if worst < GRAD_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ema_exactness() -> Outcome {
    let cfg = RunConfig {
        n_train: 300,
        hidden: vec![16],
        label_quality: false,
        ..RunConfig::default()
    };
    let kappa = cfg.ema_decay;
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let mut replay = trainer.state().teacher.model().flatten();
    let mut mismatched_steps = 0;
    for _ in 0..1000 {
        trainer.step().map_err(|e| e.to_string())?;
        for (r, t) in replay.iter_mut().zip(trainer.state().model.flatten()) {
            *r = kappa * *r + (1.0 - kappa) * t;
        }
        if trainer.state().teacher.model().flatten() != replay {
            mismatched_steps += 1;
        }
    }
    let msg = format!("1000 steps, {mismatched_steps} steps with any inexact parameter");
    if mismatched_steps == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ramp_schedule() -> Outcome {
    let (ramp, w_max) = (16 * 1024u64, 20.0);
    let mut bad = Vec::new();
    if ramp_weight(0, ramp, w_max) != 0.0 {
        bad.push(0);
    }
    for t in (0..=3 * ramp).step_by(7) {
        let want = if t >= ramp { w_max } else { w_max * (t as f64 / ramp as f64) };
        if ramp_weight(t, ramp, w_max) != want {
            bad.push(t);
        }
    }
    if ramp_weight(ramp, ramp, w_max) != w_max || ramp_weight(8192, ramp, w_max) != 10.0 {
        bad.push(ramp);
    }
    // The trainer logs exactly this schedule.
    let cfg = RunConfig {
        n_train: 200,
        hidden: vec![4],
        total_batches: 40,
        batches_per_epoch: 10,
        ramp_epochs: Some(2.0),
        label_quality: false,
        ..RunConfig::default()
    };
    let r = run(cfg.clone(), &RunOptions::default()).map_err(|e| e.to_string())?;
    for s in &r.steps {
        if s.w_s != ramp_weight(s.step, 20, cfg.w_s_max) {
            bad.push(s.step);
        }
    }
    let msg = format!("{} mismatching points", bad.len());
    if bad.is_empty() {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct TwoMoons {
    supervised: Vec<RunResult>,
    mixup: Vec<RunResult>,
    emu: Vec<RunResult>,
}

fn two_moons_protocol() -> Result<TwoMoons, String> {
    let exp = Experiment::load(&workspace_root().join("configs/two_moons_compare.toml"))
        .map_err(|e| e.to_string())?;
    let arm = |name: &str| exp.arm(name).ok_or_else(|| format!("config lacks arm `{name}`"));
    let runs = |name: &str| -> Result<Vec<RunResult>, String> {
        let a = arm(name)?;
        exp.seeds
            .iter()
            .map(|&s| {
                let mut cfg = exp.resolve(a, &[], s).map_err(|e| e.to_string())?;
                cfg.label_quality = false;
                run(cfg, &RunOptions::default()).map_err(|e| e.to_string())
            })
            .collect()
    };
    Ok(TwoMoons {
        supervised: runs("supervised")?,
        mixup: runs("mixup")?,
        emu: runs("emu")?,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn semi_supervised_benefit(p: &TwoMoons) -> Outcome {
    let sup = mean(p.supervised.iter().map(|r| 1.0 - r.summary.final_test_err));
    let emu = mean(p.emu.iter().map(|r| 1.0 - r.summary.final_test_err));
    let gain = 100.0 * (emu - sup);
    let msg = format!(
        "{} seeds, accuracy εmu {:.2}% vs supervised {:.2}% (gain {gain:.2} points, need ≥ {BENEFIT_POINTS})",
        p.emu.len(),
        100.0 * emu,
        100.0 * sup
    );
    if p.emu.len() == 5 && gain >= BENEFIT_POINTS {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn entropy_direction(p: &TwoMoons) -> Outcome {
    let emu = mean(p.emu.iter().map(|r| r.summary.final_mean_entropy));
    let mixup = mean(p.mixup.iter().map(|r| r.summary.final_mean_entropy));
    let msg = format!("mean entropy εmu {emu:.4} vs Mixup {mixup:.4} nats");
    if emu <= mixup {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn epsilon_adaptivity(p: &TwoMoons) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for r in &p.emu {
        let d = r.summary.avg_inter_pair_distance;
        let init = 0.25 * d;
        let max = r.summary.epsilon_max;
        let in_bounds = r.steps.iter().all(|s| (0.0..=max).contains(&s.epsilon));
        let moved = (r.summary.final_epsilon - init).abs() / d;
        ok &= in_bounds && moved > ADAPT_FRACTION;
        lines.push(format!("{:.1}%", r.summary.final_eps_pct.unwrap_or(f64::NAN)));
    }
    let msg = format!("final ε as % of distance from 25%: [{}]", lines.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("det.toml");
    std::fs::write(
        &cfg,
        "dataset = \"two_moons\"\ntransform = \"emu\"\nbeta = 1.0\nw_s_max = 10.0\ntotal_batches = 300\neval_interval = 50\noracle_batches = 200\nseeds = [7]\n",
    )
    .map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let status = Command::new(env!("CARGO_BIN_EXE_structreg"))
            .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env_remove("STRUCTREG_WORKERS")
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        outputs.push(std::fs::read(out.join("default/seed-7/metrics.csv")).map_err(|e| e.to_string())?);
    }
    let msg = format!("two invocations, {} bytes each", outputs[0].len());
    if outputs[0] == outputs[1] && !outputs[0].is_empty() {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn report(name: &str, started: Instant, outcome: Outcome, failures: &mut usize) {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(m) => println!("PASS  {name}: {m} ({secs:.1}s)"),
        Err(m) => {
            *failures += 1;
            println!("FAIL  {name}: {m} ({secs:.1}s)");
        }
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    let checks: [(&str, fn() -> Outcome); 6] = [
        ("mixup reduction", mixup_reduction),
        ("eta algebra", eta_algebra),
        ("epsilon gradient oracle", epsilon_gradient_oracle),
        ("full model gradient oracle", full_model_gradient_oracle),
        ("ema exactness", ema_exactness),
        ("ramp schedule", ramp_schedule),
    ];
    for (name, f) in checks {
        let t = Instant::now();
        report(name, t, f(), &mut failures);
    }
    let t = Instant::now();
    match two_moons_protocol() {
        Ok(p) => {
            report("semi-supervised benefit", t, semi_supervised_benefit(&p), &mut failures);
            report("entropy direction", Instant::now(), entropy_direction(&p), &mut failures);
            report("epsilon adaptivity", Instant::now(), epsilon_adaptivity(&p), &mut failures);
        }
        Err(e) => {
            for name in ["semi-supervised benefit", "entropy direction", "epsilon adaptivity"] {
                report(name, t, Err(e.clone()), &mut failures);
            }
        }
    }
    let t = Instant::now();
    report("determinism", t, determinism(), &mut failures);
    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
