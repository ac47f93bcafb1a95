//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use isac_core::callflow::TaskOutcome;
use isac_core::fusion::{process_frame, FilterConfig, FrameDistances};
use isac_core::geometry::{Point, Rect, StaticMap};
use isac_core::measurement::{
    back_project, polar_to_world, sample_measurement, world_covariance, Cov2, NoiseModel, PolarMeasurement, Pose,
    SeId, WorldDetection,
};
use isac_core::metrics::MetricAccumulator;
use isac_core::scenario::{build_scenario, Frame, ScenarioConfig, TargetId, TargetLayout};
use isac_core::sdsf::Coverage;
use isac_sim::sweep::run_sweep;
use isac_sim::trace::write_trace;
use isac_sim::{demo_callflow, Config, SweepRow};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

type Verdict = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Verdict + 'a>);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn row(rows: &[SweepRow], g: Option<f64>, g_det: f64) -> &SweepRow {
    rows.iter()
        .find(|r| r.g == g && r.g_det == g_det)
        .unwrap_or_else(|| panic!("no sweep row for g={g:?} g_det={g_det}"))
}

fn se(mean_std: f64, n: usize) -> f64 {
    mean_std / (n as f64).sqrt()
}

fn margins(rows: &[SweepRow], g_det: f64) -> Vec<&SweepRow> {
    rows.iter().filter(|r| r.g_det == g_det && r.g.is_some()).collect()
}

fn gates(rows: &[SweepRow]) -> Vec<f64> {
    let mut v: Vec<f64> = rows.iter().map(|r| r.g_det).collect();
    v.dedup();
    v
}

fn fa_reduction(rows: &[SweepRow]) -> Verdict {
    let g0 = row(rows, Some(0.0), 3.0).fa_mean;
    let g2 = row(rows, Some(2.0), 3.0).fa_mean;
    let ratio = g2 / g0;
    check(
        ratio <= 0.5,
        format!("fa(g=2)/fa(g=0) = {g2:.3}/{g0:.3} = {ratio:.3} (<= 0.5)"),
    )
}

fn fa_monotone(rows: &[SweepRow]) -> Verdict {
    let mut worst = f64::NEG_INFINITY;
    let mut bad = Vec::new();
    for gd in gates(rows) {
        for w in margins(rows, gd).windows(2) {
            let rise = w[1].fa_mean - w[0].fa_mean;
            let pooled = (se(w[0].fa_std, w[0].n).powi(2) + se(w[1].fa_std, w[1].n).powi(2)).sqrt();
            worst = worst.max(rise - pooled);
            if rise > pooled {
                bad.push(format!("g_det={gd} g={:?}->{:?}", w[0].g, w[1].g));
            }
        }
    }
    check(
        bad.is_empty(),
        format!("max rise beyond 1 pooled SE = {worst:.4}; violations {bad:?}"),
    )
}

fn pd_ordering(rows: &[SweepRow]) -> Verdict {
    let mut bad = Vec::new();
    let mut dips = Vec::new();
    for gd in gates(rows) {
        let ms = margins(rows, gd);
        let at0 = row(rows, Some(0.0), gd).pd_mean;
        for r in &ms {
            if at0 < r.pd_mean - 0.01 {
                bad.push(format!("g_det={gd} g={:?}", r.g));
            }
        }
        if gd <= 3.0 {
            let min = ms.iter().map(|r| r.pd_mean).fold(f64::INFINITY, f64::min);
            dips.push((gd, at0 - min));
        }
    }
    let dip = dips.iter().all(|(_, d)| *d > 0.0);
    check(
        bad.is_empty() && dip,
        format!("ordering violations {bad:?}; dip per g_det<=3 {dips:.4?}"),
    )
}

fn pd_gate_monotone(rows: &[SweepRow]) -> Verdict {
    let mut worst = f64::INFINITY;
    let mut bad = Vec::new();
    for r1 in rows.iter().filter(|r| r.g_det == 1.0) {
        let r10 = row(rows, r1.g, 10.0);
        let tol = (se(r1.pd_std, r1.n).powi(2) + se(r10.pd_std, r10.n).powi(2)).sqrt();
        let margin = r10.pd_mean - r1.pd_mean;
        worst = worst.min(margin);
        if margin < -tol {
            bad.push(format!("g={:?}", r1.g));
        }
    }
    check(
        bad.is_empty(),
        format!("min pd(10) - pd(1) = {worst:.4}; violations {bad:?}"),
    )
}

fn baseline_detectability(rows: &[SweepRow]) -> Verdict {
    let pd = row(rows, None, 10.0).pd_mean;
    check(pd >= 0.95, format!("baseline pd at g_det=10 = {pd:.4} (>= 0.95)"))
}

fn covariance_propagation() -> Verdict {
    let started = Instant::now();
    let pose = Pose::new(10.0, -5.0, 0.6).unwrap();
    let noise = NoiseModel::from_degrees(0.8, 2.0).unwrap();
    let z = PolarMeasurement::new(50.0, 30f64.to_radians(), SeId(0)).unwrap();
    let truth = polar_to_world(&pose, &z);
    let predicted = world_covariance(&pose, &z, &noise);
    let mut rng = StdRng::seed_from_u64(6);
    let n = 100_000;
    let pts: Vec<Point> = (0..n)
        .map(|_| {
            let m = sample_measurement(&pose, &truth, &noise, SeId(0), &mut rng).unwrap();
            back_project(&pose, &m, &noise).point
        })
        .collect();
    let mx = pts.iter().map(|p| p.x).sum::<f64>() / n as f64;
    let my = pts.iter().map(|p| p.y).sum::<f64>() / n as f64;
    let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
    for p in &pts {
        xx += (p.x - mx) * (p.x - mx);
        xy += (p.x - mx) * (p.y - my);
        yy += (p.y - my) * (p.y - my);
    }
    let d = (n - 1) as f64;
    let sample = Cov2::from_mat(&isac_core::measurement::Mat2([[xx / d, xy / d], [xy / d, yy / d]]));
    let err = sample.sub(&predicted).frobenius_norm() / predicted.frobenius_norm();
    let secs = started.elapsed().as_secs_f64();
    check(
        err <= 0.05 && secs < 5.0,
        format!("relative Frobenius error {err:.4} (<= 0.05) in {secs:.2}s"),
    )
}

fn dist_to_rect(p: &Point, r: &Rect) -> f64 {
    let dx = (r.x_min() - p.x).max(0.0).max(p.x - r.x_max());
    let dy = (r.y_min() - p.y).max(0.0).max(p.y - r.y_max());
    dx.hypot(dy)
}

/// Fraction of the clutter distribution inside the map dilated by each
/// margin, by direct sampling of the clutter law with rejection of
/// out-of-bounds draws.
fn mask_probabilities(cfg: &ScenarioConfig, gs: &[f64], samples: usize) -> Vec<f64> {
    let bounds = *cfg.map.bounds();
    let mut edges = Vec::new();
    for r in cfg.map.rects() {
        let c = [
            (r.x_min(), r.y_min()),
            (r.x_max(), r.y_min()),
            (r.x_max(), r.y_max()),
            (r.x_min(), r.y_max()),
        ];
        for k in 0..4 {
            edges.push((c[k], c[(k + 1) % 4]));
        }
    }
    let mut rng = StdRng::seed_from_u64(7);
    let sigma = cfg.clutter.edge_jitter_sigma;
    let mut hits = vec![0usize; gs.len()];
    for _ in 0..samples {
        let p = if rng.random::<f64>() < cfg.clutter.edge_fraction {
            let ((ax, ay), (bx, by)) = edges[rng.random_range(0..edges.len())];
            let u: f64 = rng.random();
            loop {
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                let p = Point::new(ax + u * (bx - ax) + sigma * nx, ay + u * (by - ay) + sigma * ny);
                if bounds.contains(&p) {
                    break p;
                }
            }
        } else {
            Point::new(
                bounds.x_min() + rng.random::<f64>() * bounds.width(),
                bounds.y_min() + rng.random::<f64>() * bounds.height(),
            )
        };
        let d = cfg.map.rects().iter().map(|r| dist_to_rect(&p, r)).fold(f64::INFINITY, f64::min);
        for (h, g) in hits.iter_mut().zip(gs) {
            if d <= *g {
                *h += 1;
            }
        }
    }
    hits.iter().map(|h| *h as f64 / samples as f64).collect()
}

fn poisson_thinning() -> Verdict {
    let cfg = ScenarioConfig {
        targets: TargetLayout::Explicit(Vec::new()),
        seed: 70,
        ..ScenarioConfig::default()
    };
    let lambda = cfg.clutter.lambda_fa;
    let gs = [0.0, 1.0, 2.0, 5.0];
    let oracle_n = 1_000_000;
    let p_mask = mask_probabilities(&cfg, &gs, oracle_n);
    let sc = build_scenario(cfg).unwrap();
    let frames = 20_000u32;
    let mut survivors = vec![0u64; gs.len()];
    for t in 0..frames {
        let frame = sc.generate_frame(t, &mut sc.frame_rng(0, t));
        let dist = FrameDistances::new(&frame, sc.map());
        for (s, g) in survivors.iter_mut().zip(gs) {
            *s += dist.evaluate(&FilterConfig::new(g, 3.0, true).unwrap()).unmatched as u64;
        }
    }
    let mut lines = Vec::new();
    let mut ok = true;
    for ((g, p), s) in gs.iter().zip(&p_mask).zip(&survivors) {
        let expected = lambda * (1.0 - p);
        let mean = *s as f64 / f64::from(frames);
        // Poisson spread of the frame mean plus binomial spread of the oracle.
        let sigma = (expected / f64::from(frames) + (lambda * lambda * p * (1.0 - p)) / oracle_n as f64).sqrt();
        let z = (mean - expected) / sigma;
        ok &= z.abs() <= 3.0;
        lines.push(format!("g={g}: {mean:.3} vs {expected:.3} (z={z:+.2})"));
    }
    check(ok, lines.join(", "))
}

fn random_instance(rng: &mut StdRng) -> (StaticMap, Vec<Frame>) {
    let bounds = Rect::new(0.0, 0.0, 30.0, 30.0).unwrap();
    let map = StaticMap::new(
        bounds,
        vec![Rect::new(5.0, 5.0, 12.0, 14.0).unwrap(), Rect::new(18.0, 16.0, 26.0, 22.0).unwrap()],
    )
    .unwrap();
    let n_targets = rng.random_range(0..=3u32);
    let frames = (0..10)
        .map(|t| {
            // Each target is in bounds at a random subset of the steps.
            let mut truth: Vec<(TargetId, Point)> = Vec::new();
            for id in 0..n_targets {
                if rng.random_bool(0.8) {
                    let p = Point::new(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
                    truth.push((TargetId(id), p));
                }
            }
            let n_det = rng.random_range(0..=10);
            let detections = (0..n_det)
                .map(|_| {
                    let p = if !truth.is_empty() && rng.random_bool(0.5) {
                        let (_, x) = truth[rng.random_range(0..truth.len())];
                        Point::new(x.x + rng.random_range(-4.0..4.0), x.y + rng.random_range(-4.0..4.0))
                    } else {
                        Point::new(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0))
                    };
                    WorldDetection::new(p, Cov2::diag(1.0, 1.0), SeId(0))
                })
                .collect();
            Frame {
                t,
                detections,
                truth,
            }
        })
        .collect();
    (map, frames)
}

/// Per-target detection ratio, its mean over observed targets and the mean
/// unmatched count per step, recomputed from the raw frames.
fn brute_force(map: &StaticMap, frames: &[Frame], g: f64, gate: f64) -> (BTreeMap<TargetId, f64>, Option<f64>, f64) {
    let mut hits: BTreeMap<TargetId, (u64, u64)> = BTreeMap::new();
    let mut unmatched = 0u64;
    for f in frames {
        let kept: Vec<&WorldDetection> = f
            .detections
            .iter()
            .filter(|d| map.rects().iter().all(|r| dist_to_rect(&d.point, r) > g))
            .collect();
        for (id, x) in &f.truth {
            let e = hits.entry(*id).or_default();
            e.1 += 1;
            e.0 += u64::from(kept.iter().any(|d| d.point.distance(x) <= gate));
        }
        unmatched += kept
            .iter()
            .filter(|d| f.truth.iter().all(|(_, x)| d.point.distance(x) > gate))
            .count() as u64;
    }
    let pd: BTreeMap<TargetId, f64> = hits.iter().map(|(id, (s, n))| (*id, *s as f64 / *n as f64)).collect();
    let avg = (!pd.is_empty()).then(|| pd.values().sum::<f64>() / pd.len() as f64);
    (pd, avg, unmatched as f64 / frames.len() as f64)
}

fn metric_oracle() -> Verdict {
    let mut rng = StdRng::seed_from_u64(8);
    let instances = 2000;
    let mut mismatches = 0;
    for _ in 0..instances {
        let (map, frames) = random_instance(&mut rng);
        let g = [0.0, 0.5, 1.5, 3.0][rng.random_range(0..4)];
        let gate = [0.5, 1.0, 3.0, 10.0][rng.random_range(0..4)];
        let fc = FilterConfig::new(g, gate, true).unwrap();
        let mut direct = MetricAccumulator::new();
        let mut fast = MetricAccumulator::new();
        for f in &frames {
            direct.update(&process_frame(f, &map, &fc));
            fast.update_events(&FrameDistances::new(f, &map).evaluate(&fc));
        }
        let (a, b) = (direct.finalize().unwrap(), fast.finalize().unwrap());
        let (pd, avg, fa) = brute_force(&map, &frames, g, gate);
        let same = |m: &isac_core::metrics::MetricResult| m.pd_per_target == pd && m.pd_avg == avg && m.fa_avg == fa;
        if !(same(&a) && same(&b)) {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{mismatches} mismatching instances out of {instances}"),
    )
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn trace_text(r: &isac_sim::DemoReport) -> String {
    let mut buf = Vec::new();
    write_trace(&r.trace, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

fn golden_traces() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("sdsf.log");
    let cfg = Config::default();
    let first = demo_callflow(&cfg, &store).unwrap();
    let second = demo_callflow(&cfg, &store).unwrap();
    let deny_cfg =
        isac_sim::config::parse_config_str("[policy]\nprohibited_areas = [[50, 50, 70, 70]]\n", dir.path()).unwrap();
    let deny = demo_callflow(&deny_cfg, &dir.path().join("deny.log")).unwrap();

    let partial_ok = trace_text(&first) == golden("partial.jsonl");
    let deny_ok = trace_text(&deny) == golden("deny.jsonl");
    let exists_ok = trace_text(&second) == golden("exists.jsonl");
    let archived = matches!(
        &second.outcome,
        TaskOutcome::Completed { availability: Some(Coverage::Exists), .. }
    );
    check(
        partial_ok && deny_ok && exists_ok && archived,
        format!("partial {partial_ok}, deny {deny_ok}, exists-only {exists_ok}, second run exists {archived}"),
    )
}

fn cli_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(&cfg, "n_realizations = 10\n").unwrap();
    let run = |name: &str, parallel: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_isac-sim"))
            .args(["sweep", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .args(["--seed", "42", "--parallel", parallel])
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out).unwrap()
    };
    let a = run("a.csv", "1");
    let b = run("b.csv", "4");
    check(a == b, format!("{} bytes, identical {}", a.len(), a == b))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut cfg = Config::default();
    cfg.sweep.n_realizations = 50;
    let rows = run_sweep(&cfg.sweep, None).expect("default sweep");
    let sweep_secs = started.elapsed().as_secs_f64();

    let criteria: Vec<Criterion> = vec![
        ("fa reduction", Box::new(|| fa_reduction(&rows))),
        ("fa monotone in g", Box::new(|| fa_monotone(&rows))),
        ("pd ordering and dip", Box::new(|| pd_ordering(&rows))),
        ("pd monotone in g_det", Box::new(|| pd_gate_monotone(&rows))),
        ("baseline detectability", Box::new(|| baseline_detectability(&rows))),
        ("covariance propagation", Box::new(covariance_propagation)),
        ("poisson thinning", Box::new(poisson_thinning)),
        ("metric oracle", Box::new(metric_oracle)),
        ("call-flow golden traces", Box::new(golden_traces)),
        ("sweep determinism", Box::new(cli_determinism)),
    ];
    println!("sweep: {} rows, 50 realizations, {sweep_secs:.2}s", rows.len());
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(d) => println!("PASS {:>2} {name}: {d}", k + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d}", k + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
