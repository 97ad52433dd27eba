//! End-to-end acceptance checks. Runs outside the default test set:
//!
//! ```text
//! cargo test -p mmib --test acceptance            # all criteria
//! cargo test -p mmib --test acceptance -- c6 c9   # a subset
//! ```
//!
//! Study outputs land in `<target tmp>/acceptance/<study>`; set
//! `MMIB_ACCEPTANCE_RESUME=1` to keep completed runs from a previous pass.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mmib::experiment::{execute, plan, run_experiment, Aggregates, ExperimentSpec, Precision, RunOptions};
use mmib::losses::{beta_from_temperatures, dual_temp_row_loss, regularized_row_loss};
use mmib::metrics::{cka, Kernel};
use mmib::seed::rng;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget: Duration,
    check: fn() -> Outcome,
}

const fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { id: "c1", title: "gradient suite", budget: minutes(1), check: gradient_suite },
        Criterion { id: "c2", title: "dual-temperature equivalence", budget: Duration::from_secs(10), check: dual_temperature },
        Criterion { id: "c3", title: "gaussian kl", budget: minutes(2), check: gaussian_kl },
        Criterion { id: "c4", title: "cka suite", budget: Duration::from_secs(30), check: cka_suite },
        Criterion { id: "c5", title: "probe calibration", budget: minutes(2), check: probe_cases },
        Criterion { id: "c6", title: "nuisance presence", budget: minutes(10), check: nuisance_presence },
        Criterion { id: "c7", title: "beta sweep", budget: minutes(45), check: beta_sweep },
        Criterion { id: "c8", title: "nuisance-alignment correlation", budget: minutes(45), check: align_corr },
        Criterion { id: "c9", title: "temperature effect", budget: minutes(20), check: temp_sweep },
        Criterion { id: "c10", title: "depth effect", budget: minutes(25), check: depth_sweep },
        Criterion { id: "c11", title: "information homeostasis", budget: minutes(15), check: homeostasis },
        Criterion { id: "c12", title: "reproducibility", budget: minutes(10), check: reproducibility },
    ]
}

fn gradient_suite() -> Outcome {
    let mut worst: f64 = 0.0;
    for name in common::PRIMITIVES {
        worst = (0..100).map(|s| common::primitive_error(name, s)).fold(worst, f64::max);
    }
    for wrt in 0..3 {
        worst = (0..100).map(|s| common::combined_loss_error(s, wrt)).fold(worst, f64::max);
    }
    Outcome {
        pass: worst < 1e-5,
        detail: format!("max relative error {worst:.2e} over {} primitives and the combined loss", common::PRIMITIVES.len()),
    }
}

fn dual_temperature() -> Outcome {
    let mut r = rng(2024);
    let (mut diag, mut off): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let (row, i) = common::random_row(&mut r);
        let tau = r.random_range(0.01..=1.0);
        let tau_p = r.random_range(0.005..=tau);
        let beta = beta_from_temperatures(&row, i, tau, tau_p).unwrap();
        let reg = common::row_gradient(&row, |t, s| regularized_row_loss(t, s, i, tau, beta));
        let dual = common::row_gradient(&row, |t, s| dual_temp_row_loss(t, s, i, tau_p, tau));
        for j in 0..row.len() {
            let gap = (reg[j] - dual[j]).abs();
            if j == i {
                diag = diag.max(gap);
            } else {
                off = off.max(gap);
            }
        }
    }
    Outcome {
        pass: diag < 1e-8 && off < 1e-10,
        detail: format!("max |Δ ∂/∂s_ii| {diag:.2e}, max off-diagonal {off:.2e} over 1000 rows"),
    }
}

fn gaussian_kl() -> Outcome {
    let worst = (0..20).map(|s| common::kl_monte_carlo_error(s, 1_000_000)).fold(0.0, f64::max);
    Outcome {
        pass: worst < 0.01,
        detail: format!("max relative error {:.3}% over 20 triples", 100.0 * worst),
    }
}

fn cka_suite() -> Outcome {
    let identities = (0..100).map(common::cka_identity_error).fold(0.0, f64::max);
    let mut r = rng(7);
    let independent =
        cka(&common::matrix(&mut r, 1000, 8), &common::matrix(&mut r, 1000, 8), Kernel::Linear).unwrap();
    Outcome {
        pass: identities < 1e-8 && independent < 0.3,
        detail: format!("identity error {identities:.2e}, independent cka {independent:.4}"),
    }
}

fn probe_cases() -> Outcome {
    let [full, none, half] = common::probe_calibration(5000, 0);
    Outcome {
        pass: (0.95..=1.0).contains(&full) && none < 0.05 && (0.45..=0.55).contains(&half),
        detail: format!("full {full:.4}, none {none:.4}, half {half:.4}"),
    }
}

fn study(json: &str) -> Aggregates {
    let spec = ExperimentSpec::from_json(json).unwrap();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(&spec.name);
    if std::env::var_os("MMIB_ACCEPTANCE_RESUME").is_none() && dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    let opts = RunOptions {
        out_dir: dir,
        workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        precision: Precision::F64,
        verbose: true,
    };
    let summary = run_experiment(&spec, &opts).unwrap();
    assert_eq!(summary.failed, 0, "{} runs failed", summary.failed);
    summary.aggregates
}

fn med(agg: &Aggregates, scenario: &str, value: f64, metric: &str) -> f64 {
    agg.median_of(scenario, value, metric).unwrap_or(f64::NAN)
}

fn nuisance_presence() -> Outcome {
    let agg = study(include_str!("../../../specs/nuisance_presence.json"));
    let urr = med(&agg, "f0", 0.0, "urr_mean");
    Outcome {
        pass: urr > 0.2,
        detail: format!("median URR(f0) {urr:.4} (needs > 0.2)"),
    }
}

fn beta_sweep() -> Outcome {
    let agg = study(include_str!("../../../specs/beta_sweep.json"));
    let m = |beta, metric| med(&agg, "f0", beta, metric);
    let (u0, u1) = (m(0.0, "urr_mean"), m(0.1, "urr_mean"));
    let (c0, c1) = (m(0.0, "cka"), m(0.1, "cka"));
    let (e0, e3) = (m(0.0, "mi_essence"), m(0.3, "mi_essence"));
    let drop = (u0 - u1) / u0;
    Outcome {
        pass: drop >= 0.2 && c1 > c0 && e3 < e0,
        detail: format!(
            "URR {u0:.4} → {u1:.4} ({:.1}% drop, needs ≥ 20%); CKA {c0:.4} → {c1:.4}; mi_essence β=0 {e0:.5}, β=0.3 {e3:.5}",
            100.0 * drop
        ),
    }
}

fn align_corr() -> Outcome {
    let agg = study(include_str!("../../../specs/align_corr.json"));
    let rho = agg.spearman_urr_cka.unwrap_or(f64::NAN);
    Outcome {
        pass: rho < -0.3,
        detail: format!("spearman(URR, CKA) {rho:.4} over {} scenarios (needs < -0.3)", agg.cells.len()),
    }
}

fn temp_sweep() -> Outcome {
    let agg = study(include_str!("../../../specs/temp_sweep.json"));
    let u: Vec<f64> = [0.01, 0.1, 0.5].iter().map(|&t| med(&agg, "posX", t, "urr_mean")).collect();
    Outcome {
        pass: u[0] > u[1] && u[1] > u[2],
        detail: format!("median URR(posX) at τ = 0.01, 0.1, 0.5: {:.4}, {:.4}, {:.4}", u[0], u[1], u[2]),
    }
}

fn depth_sweep() -> Outcome {
    let agg = study(include_str!("../../../specs/depth_sweep.json"));
    let u: Vec<f64> = [1.0, 3.0, 5.0].iter().map(|&d| med(&agg, "posX", d, "urr_mean")).collect();
    Outcome {
        pass: u[2] <= u[0],
        detail: format!("median URR(posX) at depth 1, 3, 5: {:.4}, {:.4}, {:.4}", u[0], u[1], u[2]),
    }
}

fn homeostasis() -> Outcome {
    let agg = study(include_str!("../../../specs/homeostasis.json"));
    let (t0, t1) = (med(&agg, "f0", 0.0, "temperature_final"), med(&agg, "f0", 0.1, "temperature_final"));
    let (u0, u1) = (med(&agg, "f0", 0.0, "urr_mean"), med(&agg, "f0", 0.1, "urr_mean"));
    Outcome {
        pass: t1 < t0,
        detail: format!("median final τ β=0 {t0:.5}, β=0.1 {t1:.5} (URR {u0:.3} → {u1:.3})"),
    }
}

fn reproducibility() -> Outcome {
    let spec = ExperimentSpec::from_json(include_str!("../../../specs/nuisance_presence.json")).unwrap();
    let run = &plan(&spec).unwrap()[0];
    let strip = |mut r: mmib::experiment::SweepRow| {
        r.wall_seconds = 0.0;
        r.to_record().join(",")
    };
    let a = strip(execute(run, Precision::F64, None));
    let b = strip(execute(run, Precision::F64, None));
    Outcome {
        pass: a == b && !a.contains(",failed,"),
        detail: if a == b { format!("rows identical: {a}") } else { format!("rows differ:\n  {a}\n  {b}") },
    }
}

fn clock(d: Duration) -> String {
    let s = d.as_secs_f64();
    if s < 60.0 {
        format!("{s:.1}s")
    } else {
        format!("{}m{:02}s", (s / 60.0) as u64, (s % 60.0) as u64)
    }
}

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut lines = Vec::new();
    for c in criteria() {
        if !wanted.is_empty() && !wanted.iter().any(|w| w.eq_ignore_ascii_case(c.id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.check)();
        let took = start.elapsed();
        let in_time = took <= c.budget;
        let verdict = if outcome.pass && in_time { "PASS" } else { "FAIL" };
        let line = format!(
            "{verdict} {:>3} {}: {} [{} of {}{}]",
            c.id.to_uppercase(),
            c.title,
            outcome.detail,
            clock(took),
            clock(c.budget),
            if in_time { "" } else { ", over budget" }
        );
        println!("{line}");
        lines.push((verdict == "PASS", line));
    }
    println!("\n---- acceptance summary ----");
    for (_, line) in &lines {
        println!("{}", line.lines().next().unwrap_or_default());
    }
    let failed = lines.iter().filter(|(ok, _)| !ok).count();
    println!("{} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
