//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the full 100-target study once and checks every criterion against
//! its tolerance band. Failures are reported, not panicked on; set
//! `QSV_ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero exit status.

use std::fmt::Write as _;
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qsv_core::adaptive::run_av;
use qsv_core::experiment::{run_experiment, ExperimentConfig, ExperimentReport, StateClass};
use qsv_core::hermitian::{
    bures_from_fidelity, bures_pure, hs_distance, hs_inner, pauli_projector_set, perturb_state, random_pure_target,
    HermitianOperator, ObservableSet, PerturbationSpec,
};
use qsv_core::planner::{bures_bound_pure, hs_bound, plan_ias, plan_random, project_update, ProjectionState};
use qsv_core::sdp::{extremize_linear, CompatibleSetSpec, Sense};
use qsv_core::verifier::{run_vm, MeasurementOracle, Verdict};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(x: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&x)
}

fn random_hermitian(rng: &mut ChaCha8Rng, d: usize) -> HermitianOperator {
    let m = DMatrix::from_fn(d, d, |_, _| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    HermitianOperator::new((&m + m.adjoint()) * Complex64::new(0.5, 0.0)).unwrap()
}

fn random_subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn reconstruction(report: &ExperimentReport) -> Outcome {
    let ios: Vec<f64> = report
        .profiles
        .iter()
        .filter_map(|p| p.ios_reconstruction)
        .map(|k| k as f64)
        .collect();
    let ias: Vec<f64> = report
        .profiles
        .iter()
        .filter_map(|p| p.ias_reconstruction)
        .map(|k| k as f64)
        .collect();
    if ios.is_empty() || ias.is_empty() {
        return outcome(false, "no reconstruction profiles".into());
    }
    let (a, b) = (mean(&ios), mean(&ias));
    outcome(
        within(a, 5.2, 6.2) && within(b, 6.0, 7.0) && within(b - a, 0.3, 1.3),
        format!(
            "IOS {a:.2} (n={}), IAS {b:.2} (n={}), IAS-IOS {:.2}",
            ios.len(),
            ias.len(),
            b - a
        ),
    )
}

fn table(
    report: &ExperimentReport,
    class: StateClass,
    bands: [(f64, f64); 3],
    control: (f64, f64),
    gap: Option<f64>,
) -> Outcome {
    let summary = report.summary();
    let Some(s) = summary.steps.get(class.as_str()) else {
        return outcome(false, "class missing".into());
    };
    let mut pass = summary.completion >= qsv_core::experiment::REQUIRED_COMPLETION;
    let mut detail = String::new();
    let mut alg_max = f64::NEG_INFINITY;
    for (name, (lo, hi)) in ["IOS", "IAS", "AV"].into_iter().zip(bands) {
        let m = s.get(name).map_or(f64::NAN, |a| a.mean);
        pass &= within(m, lo, hi);
        alg_max = alg_max.max(m);
        write!(detail, "{name} {m:.2}, ").unwrap();
    }
    let controls: Vec<f64> = s
        .iter()
        .filter(|(g, _)| g.starts_with("Random"))
        .map(|(_, a)| a.mean)
        .collect();
    pass &= !controls.is_empty() && controls.iter().all(|&m| within(m, control.0, control.1));
    if let Some(g) = gap {
        pass &= controls.iter().all(|&m| m - alg_max >= g);
    }
    let c: Vec<String> = controls.iter().map(|m| format!("{m:.2}")).collect();
    write!(
        detail,
        "controls [{}], completion {:.3}",
        c.join(" "),
        summary.completion
    )
    .unwrap();
    outcome(pass, detail)
}

fn distance_bound(set: &ObservableSet) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut hs_viol, mut pure_viol, mut bures_viol, mut bures_checked, mut errors) = (0, 0, 0, 0, 0);
    for t in 0..1000u64 {
        let rho0 = random_pure_target(50_000 + t, 4).unwrap();
        let k = rng.random_range(1..=15);
        let subset = random_subset(&mut rng, set.len(), k);
        let mut st = ProjectionState::new(4);
        for &i in &subset {
            let a = &set.observables()[i];
            if st.is_independent(a) {
                st = project_update(&st, &rho0, a).unwrap();
            }
        }
        let spec = CompatibleSetSpec::from_state(set, &subset, &rho0).unwrap();
        // the farthest point is the sharpest test; random directions cover the rest
        let (objective, sense) = if t % 3 == 0 {
            (rho0.operator().clone(), Sense::Min)
        } else {
            (
                random_hermitian(&mut rng, 4),
                if t % 2 == 0 { Sense::Min } else { Sense::Max },
            )
        };
        let sigma = match extremize_linear(&objective, &spec, sense).and_then(|s| s.into_result()) {
            Ok((_, s)) => s,
            Err(_) => {
                errors += 1;
                continue;
            }
        };
        let d = hs_distance(rho0.operator(), sigma.operator()).unwrap();
        let bound = hs_bound(&rho0, &st);
        let n2 = st.projected_norm_sq();
        let pure = 2.0 * (1.0 - n2).max(0.0).sqrt();
        if d > bound + 1e-7 {
            hs_viol += 1;
        }
        if d > pure + 1e-7 {
            pure_viol += 1;
        }
        if n2 >= 0.5 {
            bures_checked += 1;
            if bures_pure(&sigma, &rho0).unwrap() > bures_bound_pure(n2).unwrap() + 1e-7 {
                bures_viol += 1;
            }
        }
    }
    outcome(
        hs_viol + pure_viol + bures_viol + errors == 0,
        format!(
            "violations: HS {hs_viol}, pure {pure_viol}, Bures {bures_viol}/{bures_checked}; solver errors {errors}"
        ),
    )
}

/// Projection of `x` onto the span of `ops` via the normal equations.
fn direct_projection(x: &HermitianOperator, ops: &[HermitianOperator]) -> HermitianOperator {
    let n = ops.len();
    let g = DMatrix::from_fn(n, n, |i, j| hs_inner(&ops[i], &ops[j]).unwrap());
    let b = DVector::from_fn(n, |i, _| hs_inner(&ops[i], x).unwrap());
    let c = g.svd(true, true).solve(&b, 1e-13).unwrap();
    ops.iter()
        .zip(c.iter())
        .fold(HermitianOperator::zeros(x.dim()), |acc, (a, &ci)| acc.axpy(ci, a))
}

fn projection_update(set: &ObservableSet) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_proj, mut worst_norm): (f64, f64) = (0.0, 0.0);
    for t in 0..1000u64 {
        let rho0 = random_pure_target(60_000 + t, 4).unwrap();
        let len = rng.random_range(1..=16);
        let mut chain: Vec<HermitianOperator> = Vec::new();
        let mut st = ProjectionState::new(4);
        let mut pool = random_subset(&mut rng, set.len(), set.len()).into_iter();
        while chain.len() < len {
            let a = if t % 2 == 0 {
                random_hermitian(&mut rng, 4)
            } else {
                match pool.next() {
                    Some(i) => set.observables()[i].clone(),
                    None => break,
                }
            };
            if !st.is_independent(&a) {
                continue;
            }
            st = project_update(&st, &rho0, &a).unwrap();
            chain.push(a);
            let p = direct_projection(rho0.operator(), &chain);
            worst_proj = worst_proj.max(hs_distance(&p, st.projected()).unwrap());
            worst_norm = worst_norm.max((st.projected_norm_sq() - st.projected().hs_norm_sq()).abs());
        }
    }
    outcome(
        worst_proj < 1e-9 && worst_norm <= 1e-9,
        format!("max HS deviation {worst_proj:.2e}, max norm-identity deviation {worst_norm:.2e}"),
    )
}

fn verdict_soundness(set: &ObservableSet, eps: f64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut pairs, mut vm_bad, mut av_bad, mut errors, mut accurate) = (0, 0, 0, 0, 0);
    let mut t = 0u64;
    while pairs < 200 {
        t += 1;
        let rho0 = random_pure_target(70_000 + t, 4).unwrap();
        let lambda = 10f64.powf(rng.random_range(-4.0..-0.5));
        let spec = PerturbationSpec::random(lambda, 0.1, &mut rng).unwrap();
        let rho = perturb_state(&rho0, &spec).unwrap();
        let d = bures_pure(&rho, &rho0).unwrap();
        if (d - eps).abs() <= 0.02 {
            continue;
        }
        pairs += 1;
        let truth = if d <= eps {
            Verdict::Accurate
        } else {
            Verdict::NotAccurate
        };
        accurate += usize::from(truth == Verdict::Accurate);
        let oracle = MeasurementOracle::perfect(rho);
        let plan = if t.is_multiple_of(2) {
            plan_random(set, t)
        } else {
            plan_ias(&rho0, set, t)
        }
        .unwrap();
        match run_vm(&plan, set, &oracle, &rho0, eps) {
            Ok(o) if o.verdict == truth => {}
            Ok(_) => vm_bad += 1,
            Err(_) => errors += 1,
        }
        match run_av(set, &oracle, &rho0, eps, t) {
            Ok(o) if o.verdict == truth => {}
            Ok(_) => av_bad += 1,
            Err(_) => errors += 1,
        }
    }
    outcome(
        vm_bad + av_bad + errors == 0,
        format!("{pairs} pairs ({accurate} accurate): VM mismatches {vm_bad}, AV mismatches {av_bad}, errors {errors}"),
    )
}

fn bracket_monotonicity(reports: &[&ExperimentReport]) -> Outcome {
    let (mut traces, mut bad) = (0, 0);
    let mut worst: f64 = 0.0;
    for r in reports {
        for trial in &r.trials {
            traces += 1;
            let mut ok = true;
            for w in trial.trace.windows(2) {
                let drift = (w[0].lower - w[1].lower).max(w[1].upper - w[0].upper);
                worst = worst.max(drift);
                ok &= drift <= 1e-6;
            }
            bad += usize::from(!ok);
        }
    }
    outcome(
        bad == 0 && traces > 0,
        format!("{traces} traces, {bad} non-monotone, worst drift {worst:.2e}"),
    )
}

fn pauli(k: usize) -> DMatrix<Complex64> {
    let (z, o, i) = (
        Complex64::new(0.0, 0.0),
        Complex64::new(1.0, 0.0),
        Complex64::new(0.0, 1.0),
    );
    match k {
        0 => DMatrix::from_row_slice(2, 2, &[z, o, o, z]),
        1 => DMatrix::from_row_slice(2, 2, &[z, -i, i, z]),
        _ => DMatrix::from_row_slice(2, 2, &[o, z, z, -o]),
    }
}

/// `(h0, h)` with `H = h0 I + h . sigma`.
fn bloch(h: &HermitianOperator) -> (f64, [f64; 3]) {
    let c = |m: &DMatrix<Complex64>| (h.matrix() * m).trace().re / 2.0;
    (h.trace() / 2.0, [c(&pauli(0)), c(&pauli(1)), c(&pauli(2))])
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Min and max of `Tr(H rho)` over the Bloch-ball slice `Tr(A rho) = y`.
fn grid_extrema(h: &HermitianOperator, a: &HermitianOperator, y: f64, step: f64) -> (f64, f64) {
    let (h0, hv) = bloch(h);
    let (a0, av) = bloch(a);
    let an = dot(av, av).sqrt();
    let n = unit(av);
    let offset = (y - a0) / an;
    let radius = (1.0 - offset * offset).max(0.0).sqrt();
    let seed = if n[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = unit(cross(n, seed));
    let v = cross(n, u);
    let (hn, hu, hv2) = (dot(hv, n), dot(hv, u), dot(hv, v));
    let steps = (radius / step).ceil() as i64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in -steps..=steps {
        let s = i as f64 * step;
        for j in -steps..=steps {
            let w = j as f64 * step;
            if s * s + w * w > radius * radius {
                continue;
            }
            let val = h0 + hn * offset + hu * s + hv2 * w;
            lo = lo.min(val);
            hi = hi.max(val);
        }
    }
    (lo, hi)
}

fn sdp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut errors = 0;
    for _ in 0..100 {
        let h = random_hermitian(&mut rng, 2);
        let a = random_hermitian(&mut rng, 2);
        // value of a random state inside the ball
        let r: [f64; 3] = loop {
            let r = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            if dot(r, r) <= 1.0 {
                break r;
            }
        };
        let (a0, av) = bloch(&a);
        let y = a0 + dot(av, r);
        let spec = CompatibleSetSpec::with_constraints(2, vec![(a.clone(), y)]).unwrap();
        let (lo, hi) = grid_extrema(&h, &a, y, 1e-3);
        for (sense, want) in [(Sense::Min, lo), (Sense::Max, hi)] {
            match extremize_linear(&h, &spec, sense).and_then(|s| s.into_result()) {
                Ok((v, _)) => worst = worst.max((v - want).abs()),
                Err(_) => errors += 1,
            }
        }
    }
    outcome(
        worst <= 2e-3 && errors == 0,
        format!("100 instances, max deviation {worst:.2e}, errors {errors}"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(&config, "seed = 11\nn_targets = 3\nn_control_sequences = 2\n").unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_qsv"))
            .args(["experiment", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(
                false,
                format!("run {run} failed: {}", String::from_utf8_lossy(&status.stderr)),
            );
        }
        outputs.push(std::fs::read(out.join("raw.csv")).unwrap());
    }
    let same = outputs[0] == outputs[1] && !outputs[0].is_empty();
    outcome(same, format!("raw.csv {} bytes, identical: {same}", outputs[0].len()))
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are not meaningful for this target
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let set = pauli_projector_set(2).unwrap();
    let eps = bures_from_fidelity(0.95);
    let started = Instant::now();
    let config = ExperimentConfig::default();
    let report = run_experiment(&config).expect("experiment runs");
    eprintln!("study of {} targets took {:.0?}", config.n_targets, started.elapsed());

    let results: Vec<(usize, &str, Outcome)> = vec![
        (1, "reconstruction step counts", reconstruction(&report)),
        (
            2,
            "accurate-class step counts",
            table(
                &report,
                StateClass::Accurate,
                [(4.2, 5.4), (5.1, 6.4), (4.3, 5.4)],
                (8.0, 9.5),
                Some(2.0),
            ),
        ),
        (
            3,
            "non-accurate-class step counts",
            table(
                &report,
                StateClass::NonAccurate,
                [(4.5, 5.8), (4.7, 5.9), (4.4, 5.7)],
                (7.7, 9.4),
                None,
            ),
        ),
        (4, "projection distance bound", distance_bound(&set)),
        (5, "iterative projection update", projection_update(&set)),
        (6, "verdict soundness", verdict_soundness(&set, eps)),
        (7, "bracket monotonicity", bracket_monotonicity(&[&report])),
        (8, "SDP against Bloch-ball grid", sdp_oracle()),
        (9, "deterministic experiment output", determinism()),
    ];

    let mut failed = 0;
    for (k, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("criterion {k} {tag}: {name}: {}", o.detail);
    }
    println!(
        "{} of {} criteria passed in {:.0?}",
        results.len() - failed,
        results.len(),
        started.elapsed()
    );
    let strict = std::env::var("QSV_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
