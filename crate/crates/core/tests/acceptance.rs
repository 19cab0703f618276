//! Acceptance gate. Runs every criterion in sequence (so timings are not
//! disturbed by other tests), prints one PASS/FAIL line per criterion and
//! exits non-zero if any failed.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use rand::Rng;

use hits::bench::runner::{run_experiment, NoiseRun};
use hits::bench::{time_execution, ExperimentConfig};
use hits::dataset::Dataset;
use hits::dynamics::SystemSpec;
use hits::flowmap::load_model;
use hits::hybrid::{hybrid_rollout, HybridScheme};
use hits::integrators::{rollout_rk, RkTableau};
use hits::multiscale::{multiscale_rollout_batch, plan_coupling, serial_oracle_rollout, Hierarchy};

use common::{gradient_check, random_model, random_trajectories, rng};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, start: Instant, mut o: Outcome) -> Outcome {
    let took = start.elapsed();
    o.detail = format!("{}; {:.1}s of {}s allowed", o.detail, took.as_secs_f64(), limit.as_secs());
    if took > limit {
        o.pass = false;
    }
    o
}

/// Analytic gradients against central differences on 50 random models.
fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut checked, mut skipped, mut worst, mut loss_err) = (0, 0, 0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for i in 0..50 {
        let dim = r.random_range(1..=3);
        let layers = r.random_range(1..=2);
        let hidden: Vec<usize> = (0..layers).map(|_| r.random_range(2..=16)).collect();
        let p = [1, 3, 5][i % 3];
        let m = random_model(&mut r, dim, &hidden, 0.1, 1.0);
        let trajs = random_trajectories(&mut r, 4, dim, p, 0.1);
        let g = gradient_check(&m, &trajs, p, 1e-6, 1e-6, 1e-3);
        checked += g.checked;
        skipped += g.skipped_kinks;
        worst = worst.max(g.worst);
        loss_err = loss_err.max(g.loss_error);
        failures.extend(g.failures.into_iter().map(|f| format!("model {i}: {f}")));
    }
    let pass = failures.is_empty() && checked > 0 && loss_err < 1e-12;
    let mut detail = format!(
        "{checked} entries checked, {skipped} at ReLU kinks skipped, worst scaled error {worst:.2e}, loss oracle error {loss_err:.1e}"
    );
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; first failure {f} ({} total)", failures.len()));
    }
    within(Duration::from_secs(60), start, outcome(pass, detail))
}

/// Empirical convergence ratios under step halving on Van der Pol, T = 1.
fn rk_order() -> Outcome {
    let start = Instant::now();
    let sys = SystemSpec::van_der_pol();
    let x0s = [[1.0, 0.5], [-1.5, 2.0], [0.3, -3.0]];
    let error = |tab: &RkTableau, x0: &[f64], h: f64| -> f64 {
        let n = (1.0 / h).round() as usize;
        let reference = rollout_rk(&RkTableau::rk4(), &sys, x0, 1e-4, 10_000).unwrap();
        let approx = rollout_rk(tab, &sys, x0, h, n).unwrap();
        let (a, b) = (approx.state(n), reference.state(10_000));
        a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for x0 in &x0s {
        let rk4 = error(&RkTableau::rk4(), x0, 0.05) / error(&RkTableau::rk4(), x0, 0.025);
        let euler = error(&RkTableau::euler(), x0, 0.002) / error(&RkTableau::euler(), x0, 0.001);
        pass &= (12.0..=20.0).contains(&rk4) && (1.7..=2.3).contains(&euler);
        parts.push(format!("x0={x0:?}: rk4 {rk4:.2}, euler {euler:.3}"));
    }
    within(Duration::from_secs(10), start, outcome(pass, parts.join("; ")))
}

/// Vectorized rollout against the serial nested-composition oracle.
fn algorithm_one_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut pass = true;
    let mut notes = Vec::new();
    for case in 0..20 {
        let m = r.random_range(1..=4);
        let dim = r.random_range(1..=3);
        let fine = 0.05;
        let ratios: Vec<u64> = (1..m).map(|_| r.random_range(2..=4)).collect();
        let mut ticks = vec![1u64; m];
        for i in (0..m - 1).rev() {
            ticks[i] = ticks[i + 1] * ratios[i];
        }
        let models: Vec<_> = ticks
            .iter()
            .map(|&t| {
                let width = r.random_range(2..=32);
                random_model(&mut r, dim, &[width], t as f64 * fine, 0.5)
            })
            .collect();
        let h = Hierarchy::new(models).unwrap();
        let horizon_ticks = ticks[0] * r.random_range(1..=3) + r.random_range(0..ticks[0]);
        let horizon = horizon_ticks as f64 * fine;
        let x0 = Array2::from_shape_fn((3, dim), |_| r.random_range(-1.0..1.0));
        let fast = multiscale_rollout_batch(&h, x0.view(), horizon, fine).unwrap();
        let slow = serial_oracle_rollout(&h, x0.view(), horizon).unwrap();

        // Independent enumeration of the mixed-radix set.
        let k0 = horizon_ticks / ticks[0];
        let mut expected = vec![0u64];
        for (i, &t) in ticks.iter().enumerate() {
            let kmax = if i == 0 { k0 } else { ratios[i - 1] - 1 };
            expected = expected
                .iter()
                .flat_map(|&e| (0..=kmax).map(move |a| e + a * t))
                .collect();
        }
        expected.retain(|&t| t <= horizon_ticks);
        let total = expected.len();
        expected.sort_unstable();
        expected.dedup();
        let planned = plan_coupling(&h.dts(), horizon).unwrap().anchor_ticks();
        let grid: Vec<u64> = (0..=horizon_ticks).collect();
        if total != expected.len() || expected != grid || planned != grid || fast.len() != grid.len() {
            pass = false;
            notes.push(format!("case {case}: anchor set mismatch"));
        }
        let times_ok = fast
            .times
            .iter()
            .enumerate()
            .all(|(i, &t)| (t - i as f64 * fine).abs() < 1e-12);
        pass &= times_ok && fast.provenance == slow.provenance;
        let calls: Vec<usize> = plan_coupling(&h.dts(), horizon).unwrap().steps.iter().map(|&k| k as usize).collect();
        if fast.forward_calls != calls {
            pass = false;
            notes.push(format!("case {case}: forward calls {:?} != {calls:?}", fast.forward_calls));
        }
        for (a, b) in fast.states.iter().zip(slow.states.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    pass &= worst <= 1e-12;
    let mut detail = format!("20 hierarchies, max anchor deviation {worst:.1e}");
    for n in notes {
        detail.push_str("; ");
        detail.push_str(&n);
    }
    within(Duration::from_secs(60), start, outcome(pass, detail))
}

/// Hybrid degenerates to pure RK and reuses the neural anchors.
fn algorithm_two_degeneracy() -> Outcome {
    let start = Instant::now();
    let sys = SystemSpec::hyperbolic();
    let mut r = rng(4);
    let x0 = Array2::from_shape_fn((5, 2), |_| r.random_range(-1.0..1.0));
    let pure = HybridScheme::new(None, RkTableau::rk4(), 0.01, sys.clone()).unwrap();
    let out = hybrid_rollout(&pure, x0.view(), 5.12).unwrap();
    let mut q0 = true;
    for b in 0..5 {
        let tr = rollout_rk(&RkTableau::rk4(), &sys, &x0.row(b).to_vec(), 0.01, 512).unwrap();
        q0 &= out.trajectory(b).as_slice().unwrap() == tr.states();
    }
    let coarse = random_model(&mut r, 2, &[16], 1.28, 0.5);
    let h = Hierarchy::new(vec![coarse]).unwrap();
    let neural = multiscale_rollout_batch(&h, x0.view(), 5.12, 1.28).unwrap();
    let hyb = HybridScheme::new(Some(h), RkTableau::rk4(), 0.01, sys).unwrap();
    let out = hybrid_rollout(&hyb, x0.view(), 5.12).unwrap();
    let q1 = (0..neural.len()).all(|i| out.states.index_axis(Axis(0), i * 128) == neural.states.index_axis(Axis(0), i));
    within(
        Duration::from_secs(10),
        start,
        outcome(q0 && q1, format!("q=0 bitwise equal to rollout_rk: {q0}; q=1 anchors bitwise equal: {q1}")),
    )
}

fn run_preset(name: &str, dir: &Path) -> Vec<NoiseRun> {
    let cfg = ExperimentConfig::preset(name).unwrap();
    run_experiment(&cfg, dir).unwrap().runs
}

fn l2(run: &NoiseRun, id: &str) -> f64 {
    run.report(id).map_or(f64::NAN, |r| r.integrated_l2)
}

fn failures(run: &NoiseRun) -> String {
    if run.failures.is_empty() {
        String::new()
    } else {
        format!("; stage failures: {:?}", run.failures)
    }
}

fn harmonic_mini(dir: &Path) -> Outcome {
    let start = Instant::now();
    let runs = run_preset("harmonic-mini", dir);
    let run = &runs[0];
    let singles: Vec<f64> = run.single_scale().iter().map(|r| r.integrated_l2).collect();
    let best = singles.iter().copied().fold(f64::INFINITY, f64::min);
    let worst = singles.iter().copied().fold(0.0, f64::max);
    let ms = l2(run, "multiscale");
    let pass = singles.len() == 4 && ms <= 1.5 * best && ms <= 0.1 * worst;
    within(
        Duration::from_secs(15 * 60),
        start,
        outcome(
            pass,
            format!(
                "multiscale {ms:.3e} (models {:?}), best single {best:.3e}, worst single {worst:.3e}{}",
                run.selection,
                failures(run)
            ),
        ),
    )
}

fn u_shape(dir: &Path) -> Outcome {
    let start = Instant::now();
    let runs = run_preset("ushape-cubic-mini", dir);
    let singles: Vec<(f64, f64)> = runs[0].single_scale().iter().map(|r| (r.dt_min, r.integrated_l2)).collect();
    let argmin = singles
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .unwrap();
    let pass = singles.len() == 5 && argmin != 0 && argmin != singles.len() - 1;
    let listing: Vec<String> = singles.iter().map(|(dt, e)| format!("{dt}: {e:.2e}")).collect();
    within(
        Duration::from_secs(20 * 60),
        start,
        outcome(pass, format!("argmin dt {} among [{}]{}", singles[argmin].0, listing.join(", "), failures(&runs[0]))),
    )
}

fn noise_ordering(dir: &Path) -> Outcome {
    let start = Instant::now();
    let runs = run_preset("noise-sweep-hyperbolic-mini", dir);
    let ms: Vec<f64> = runs.iter().map(|r| l2(r, "multiscale")).collect();
    let monotone = runs.len() == 3 && ms.windows(2).all(|w| w[0] <= w[1]);
    let beats = runs.iter().all(|r| {
        let m = l2(r, "multiscale");
        let singles = r.single_scale();
        !singles.is_empty() && singles.iter().all(|s| m < s.integrated_l2)
    });
    let best_single: Vec<String> = runs
        .iter()
        .map(|r| {
            let b = r.single_scale().iter().map(|s| s.integrated_l2).fold(f64::INFINITY, f64::min);
            format!("{b:.2e}")
        })
        .collect();
    within(
        Duration::from_secs(30 * 60),
        start,
        outcome(
            monotone && beats,
            format!(
                "multiscale {:?} for noise {:?}, best single [{}]",
                ms.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>(),
                runs.iter().map(|r| r.noise_fraction).collect::<Vec<_>>(),
                best_single.join(", ")
            ),
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn hybrid_efficiency(dir: &Path) -> Outcome {
    let start = Instant::now();
    let runs = run_preset("hybrid-timing-hyperbolic", dir);
    let sys = SystemSpec::hyperbolic();
    let model = load_model(&dir.join("noise-0/models/nnts-0.model")).unwrap();
    let test = Dataset::load(&dir.join("data/test.hds")).unwrap();
    let x0 = test.initial_states();
    assert_eq!(x0.nrows(), 50);
    let scheme = HybridScheme::new(Some(Hierarchy::new(vec![model]).unwrap()), RkTableau::rk4(), 0.01, sys.clone()).unwrap();
    let tab = RkTableau::rk4();
    let mut hybrid_t = Vec::new();
    let mut rk_t = Vec::new();
    for _ in 0..5 {
        hybrid_t.push(time_execution(|| hybrid_rollout(&scheme, x0.view(), 51.2).unwrap()).1);
        rk_t.push(
            time_execution(|| {
                for row in x0.outer_iter() {
                    rollout_rk(&tab, &sys, &row.to_vec(), 0.01, 5120).unwrap();
                }
            })
            .1,
        );
    }
    let (hy, rk) = (median(hybrid_t), median(rk_t));
    let ratio = hy / rk;
    within(
        Duration::from_secs(5 * 60),
        start,
        outcome(
            ratio <= 1.5,
            format!(
                "hybrid {hy:.4}s vs serial rk4 {rk:.4}s (median of 5), ratio {ratio:.2}, target < 1.0 {}; hybrid integrated_l2 {:.2e}",
                if ratio < 1.0 { "met" } else { "not met" },
                l2(&runs[0], "hybrid-0")
            ),
        ),
    )
}

/// Every file under `dir`, with the wall_seconds column removed from summaries.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.file_name().unwrap() == "summary.csv" {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text
                    .lines()
                    .map(|l| l.rsplit_once(',').unwrap().0)
                    .collect::<Vec<_>>()
                    .join("\n")
                    .into_bytes();
            }
            out.insert(p.strip_prefix(dir).unwrap().display().to_string(), bytes);
        }
    }
    out
}

fn determinism(first: &[(&str, &Path)]) -> Outcome {
    let mut differing = Vec::new();
    let mut files = 0;
    for (name, dir) in first {
        let again = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::preset(name).unwrap();
        run_experiment(&cfg, again.path()).unwrap();
        let (a, b) = (artifacts(dir), artifacts(again.path()));
        files += a.len();
        if a.keys().ne(b.keys()) {
            differing.push(format!("{name}: file sets differ"));
        }
        for (k, v) in &a {
            if b.get(k) != Some(v) {
                differing.push(format!("{name}/{k}"));
            }
        }
    }
    outcome(
        differing.is_empty(),
        format!("{} presets rerun, {files} artifacts compared, differing: {differing:?}", first.len()),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let keep = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string() || f == "acceptance");
    let dirs: Vec<_> = (0..4).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        if !keep(n) {
            return;
        }
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!("criterion {n}: {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    run(1, "gradient oracle", &gradient_oracle);
    run(2, "runge-kutta order", &rk_order);
    run(3, "vectorized rollout oracle", &algorithm_one_oracle);
    run(4, "hybrid degeneracy", &algorithm_two_degeneracy);
    run(5, "harmonic-mini", &|| harmonic_mini(dirs[0].path()));
    run(6, "u-shape", &|| u_shape(dirs[1].path()));
    run(7, "noise ordering", &|| noise_ordering(dirs[2].path()));
    run(8, "hybrid efficiency", &|| hybrid_efficiency(dirs[3].path()));
    if keep(9) {
        let presets = [
            ("harmonic-mini", dirs[0].path()),
            ("ushape-cubic-mini", dirs[1].path()),
            ("noise-sweep-hyperbolic-mini", dirs[2].path()),
            ("hybrid-timing-hyperbolic", dirs[3].path()),
        ];
        let ran: Vec<_> = presets
            .into_iter()
            .filter(|(_, d)| d.join("manifest.toml").exists())
            .collect();
        run(9, "determinism", &|| determinism(&ran));
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
