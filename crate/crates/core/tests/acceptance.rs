//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `BLI_ACCEPTANCE_ONLY=1,5` runs a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use bli_core::oracle::{differential_check, gen_synthetic, gen_workload, standard_ratios, Distribution};
use bli_core::stress::{read_throughput, run_spmc, value_of, StressParams};
use bli_core::*;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

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

fn pairs_of(keys: &[Key]) -> Vec<Entry> {
    keys.iter().map(|&k| Entry::new(k, value_of(k))).collect()
}

// ---------------------------------------------------------------------------

fn oracle_equivalence() -> Outcome {
    const BULK: usize = 100_000;
    const OPS: usize = 1_000_000;
    let start = Instant::now();
    let mut traces = 0;
    let mut ops = 0usize;
    for (d, dist) in Distribution::ALL.into_iter().enumerate() {
        let keys = gen_synthetic(dist, BULK + OPS, 100 + d as u64);
        for (r, ratio) in standard_ratios().into_iter().enumerate() {
            let w = gen_workload(&keys, BULK, OPS, ratio, (d * 100 + r) as u64);
            for hint in [HintKind::ClMul, HintKind::EndpointLinear] {
                for fill in [0.3, 0.6, 0.9] {
                    let cfg = IndexConfig {
                        hint_kind: hint,
                        initial_fill_ratio: fill,
                        ..IndexConfig::default()
                    };
                    match differential_check(&w, cfg).expect("valid config") {
                        Ok(_) => {}
                        Err(div) => {
                            return outcome(false, format!("{dist} {}:{} {hint} f={fill}: {div}", ratio.0, ratio.1));
                        }
                    }
                    traces += 1;
                    ops += w.ops.len();
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        traces == 198 && secs <= 600.0,
        format!("{traces} traces, {ops} ops, 0 divergences, {secs:.0}s (limit 600s)"),
    )
}

/// Independent least-squares mean absolute rank error.
fn reference_group1_error(keys: &[Key]) -> f64 {
    let n = keys.len() as f64;
    let x: Vec<f64> = keys.iter().map(|&k| (k - keys[0]) as f64).collect();
    let mx = x.iter().sum::<f64>() / n;
    let my = (n - 1.0) / 2.0;
    let sxy: f64 = x.iter().enumerate().map(|(i, &xi)| (xi - mx) * (i as f64 - my)).sum();
    let sxx: f64 = x.iter().map(|&xi| (xi - mx) * (xi - mx)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    x.iter().enumerate().map(|(i, &xi)| (a * xi + b - i as f64).abs()).sum::<f64>() / n
}

fn group_error_identity() -> Outcome {
    let keys = gen_synthetic(Distribution::Lognormal, 10_000, 2);
    let curve = error_curve(&keys, 256);
    let e1 = curve[0].1;
    let reference = reference_group1_error(&keys);
    let mut worst: f64 = 0.0;
    for &(n, e) in &curve {
        worst = worst.max((e * n as f64 - e1).abs());
    }
    let decreasing = curve.windows(2).all(|w| w[1].1 < w[0].1);
    let matches_ref = ((e1 - reference) / reference).abs() < 1e-6;
    outcome(
        curve.len() == 9 && worst <= 1e-9 && decreasing && matches_ref,
        format!(
            "E(1)={e1:.4} (reference {reference:.4}), E(256)={:.6}, max |E(n)*n - E(1)| = {worst:.2e}, strictly decreasing: {decreasing}",
            curve[8].1
        ),
    )
}

fn corridor_bound() -> Outcome {
    let mut worst_ratio: f64 = 0.0;
    let mut lines = Vec::new();
    let mut ordered = true;
    for eps in [4.0, 32.0, 256.0] {
        let mut totals = BTreeMap::new();
        for seed in 0..100u64 {
            for dist in Distribution::ALL {
                let keys = gen_synthetic(dist, 10_000, 1000 + seed);
                let cuts = greedy_corridor(&keys, eps);
                assert_eq!(cuts.iter().map(|c| c.len()).sum::<usize>(), keys.len());
                for c in &cuts {
                    let err = (c.start..c.end)
                        .map(|i| (c.model.predict(keys[i]) - (i - c.start) as f64).abs())
                        .fold(0.0, f64::max);
                    worst_ratio = worst_ratio.max(err / eps);
                }
                *totals.entry(dist.to_string()).or_insert(0usize) += cuts.len();
            }
        }
        let (p, u, l) = (totals["piecewise"], totals["uniform"], totals["lognormal"]);
        // At eps = 256 ten thousand uniform keys deviate from a line by
        // ~sqrt(n) ranks, so both easy and medium inputs collapse to one cut.
        let ok = if eps < 256.0 { p < u && u < l } else { p <= u && u < l };
        ordered &= ok;
        lines.push(format!("eps={eps}: piecewise {p} / uniform {u} / lognormal {l}"));
    }
    outcome(
        worst_ratio <= 1.0 + 1e-9 && ordered,
        format!("max error/eps = {worst_ratio:.4}; cut totals over 100 inputs: {}", lines.join("; ")),
    )
}

fn zero_shift() -> Outcome {
    let keys = gen_synthetic(Distribution::Uniform, 1_100_000, 4);
    let mut rng = StdRng::seed_from_u64(4);
    let mut shuffled = keys.clone();
    shuffled.shuffle(&mut rng);
    let (pre, rest) = shuffled.split_at(100_000);
    let mut pre = pre.to_vec();
    pre.sort_unstable();
    let idx = Index::bulk_load(&pairs_of(&pre), IndexConfig::default()).unwrap();
    for &k in rest {
        idx.insert(k, value_of(k));
    }
    let st = idx.smo_stats();
    let sample_ok = rest.iter().step_by(997).all(|&k| idx.get(k) == Some(value_of(k)));
    outcome(
        st.shifts_performed == 0 && st.dbucket_splits >= 1000 && st.combined_smos >= 10 && sample_ok,
        format!(
            "1000000 inserts: shifts={} splits={} combined_smos={} (resegments={} merges={})",
            st.shifts_performed, st.dbucket_splits, st.combined_smos, st.resegments, st.merges
        ),
    )
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Re-run the concurrency stress tests under ThreadSanitizer on a nightly
/// toolchain.
fn sanitizer_run() -> Result<String, String> {
    if !cfg!(target_os = "linux") {
        return Err("ThreadSanitizer run only wired up for Linux".into());
    }
    let target = format!("{}-unknown-linux-gnu", std::env::consts::ARCH);
    let root = workspace_root();
    let mut cmd = Command::new("rustup");
    cmd.args(["run", "nightly", "cargo", "test", "-Zbuild-std", "--target", &target, "--target-dir"])
        .arg(root.join("target/tsan"))
        .args(["-p", "bli-core", "--test", "concurrency"])
        .current_dir(&root)
        .env("RUSTFLAGS", "-Zsanitizer=thread")
        .env("BLI_STRESS_INSERTS", "20000")
        .env_remove("CARGO_ENCODED_RUSTFLAGS")
        .env_remove("RUSTC")
        .env_remove("RUSTC_WRAPPER")
        .env_remove("RUSTDOC");
    let out = cmd.output().map_err(|e| format!("could not start rustup: {e}"))?;
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    if text.contains("WARNING: ThreadSanitizer") {
        return Err("ThreadSanitizer reported a race".into());
    }
    if !out.status.success() {
        let tail: Vec<&str> = text.lines().rev().take(5).collect();
        return Err(format!("sanitizer run failed ({}): {}", out.status, tail.join(" | ")));
    }
    Ok("tsan clean".into())
}

fn spmc_safety() -> Outcome {
    let start = Instant::now();
    let r = run_spmc(&StressParams {
        bulk: 100_000,
        inserts: 1_000_000,
        readers: 7,
        tracked: 10_000,
        seed: 5,
        cfg: IndexConfig::default(),
    });
    let stress_secs = start.elapsed().as_secs_f64();
    let tsan = sanitizer_run();

    let keys = gen_synthetic(Distribution::Uniform, 1_000_000, 6);
    let idx = Index::bulk_load(&pairs_of(&keys), IndexConfig::default()).unwrap();
    let one = read_throughput(&idx, &keys, 1, 1_000_000, 6);
    let seven = read_throughput(&idx, &keys, 7, 1_000_000, 6);
    let scaling = seven / one;
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());

    let safety = r.missing_completed == 0 && r.fabricated == 0 && r.bad_scans == 0;
    let visibility = r.visibility_regressions == 0;
    let detail = format!(
        "(a) missing completed: {} (b) fabricated: {} bad scans: {} (c) {} (d) visibility regressions: {} over 10000 tracked keys; \
         {} reads during {} inserts in {stress_secs:.0}s (limit 300s); reader scaling 7 vs 1: {scaling:.2}x (need 3x, {cpus} CPU(s) available)",
        r.missing_completed,
        r.fabricated,
        r.bad_scans,
        match &tsan {
            Ok(s) => s.clone(),
            Err(e) => e.clone(),
        },
        r.visibility_regressions,
        r.reads,
        r.inserted,
    );
    outcome(safety && visibility && tsan.is_ok() && stress_secs <= 300.0 && scaling >= 3.0, detail)
}

fn bulk_load_single_pass() -> Outcome {
    const N: usize = 1_000_000;
    let keys = gen_synthetic(Distribution::Uniform, N, 7);
    let pairs = pairs_of(&keys);
    let t = Instant::now();
    let (idx, stats) = bulk_load(&pairs, IndexConfig::default()).unwrap();
    let bulk_secs = t.elapsed().as_secs_f64();
    let depths = idx.leaf_depths();
    let mut shuffled = pairs.clone();
    shuffled.shuffle(&mut StdRng::seed_from_u64(7));
    let t = Instant::now();
    let loop_idx = Index::new(IndexConfig::default()).unwrap();
    for e in &shuffled {
        loop_idx.insert(e.key, e.value);
    }
    let loop_secs = t.elapsed().as_secs_f64();
    let ratio = loop_secs / bulk_secs;
    let spot = keys.iter().step_by(4999).all(|&k| idx.get(k) == Some(value_of(k)));
    outcome(
        stats.leaf_entry_reads == N as u64 && depths.len() == 1 && ratio >= 5.0 && spot,
        format!(
            "leaf entry reads {} for N={N}; leaf depths {depths:?}; bulk {:.2} M/s vs insert loop {:.2} M/s ({ratio:.1}x, need 5x)",
            stats.leaf_entry_reads,
            N as f64 / bulk_secs / 1e6,
            N as f64 / loop_secs / 1e6
        ),
    )
}

fn memory_monotonicity() -> Outcome {
    let keys = gen_synthetic(Distribution::Uniform, 1_000_000, 8);
    let pairs = pairs_of(&keys);
    let fills = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let mut omem = Vec::new();
    let mut tput = Vec::new();
    let extra = gen_synthetic(Distribution::Uniform, 200_000, 9);
    for f in fills {
        let cfg = IndexConfig {
            initial_fill_ratio: f,
            ..IndexConfig::default()
        };
        let idx = Index::bulk_load(&pairs, cfg).unwrap();
        omem.push(metrics::compute_o_mem(&idx, metrics::payload_bytes(pairs.len())).unwrap());
        // Report-only: 1:1 mixed throughput.
        let mut rng = StdRng::seed_from_u64(9);
        let reader = idx.reader();
        let t = Instant::now();
        for (i, &k) in extra.iter().enumerate() {
            if i % 2 == 0 {
                idx.insert(k, k);
            } else {
                std::hint::black_box(reader.get(keys[rng.gen_range(0..keys.len())]));
            }
        }
        tput.push(extra.len() as f64 / t.elapsed().as_secs_f64() / 1e6);
    }
    let decreasing = omem.windows(2).all(|w| w[1] < w[0]);
    let peak = fills[tput.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0];
    let show = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    outcome(
        decreasing,
        format!(
            "O_mem over f=0.3..0.9: [{}]; report-only 1:1 throughput M op/s: [{}], peak at f={peak}",
            show(&omem),
            show(&tput)
        ),
    )
}

fn range_exactness() -> Outcome {
    let keys = gen_synthetic(Distribution::Lognormal, 10_000, 10);
    let mut rng = StdRng::seed_from_u64(10);
    let mut shuffled = keys.clone();
    shuffled.shuffle(&mut rng);
    let (pre, rest) = shuffled.split_at(5000);
    let mut pre = pre.to_vec();
    pre.sort_unstable();
    let cfg = IndexConfig::default();
    let mixed = Index::bulk_load(&pairs_of(&pre), cfg.clone()).unwrap();
    for &k in rest {
        mixed.insert(k, value_of(k));
    }
    let loaded = Index::bulk_load(&pairs_of(&keys), cfg.clone()).unwrap();
    let oracle: BTreeMap<Key, Value> = keys.iter().map(|&k| (k, value_of(k))).collect();
    let threshold = 10 * cfg.dbucket_capacity;
    let mut mismatches = 0;
    let mut worst_probe: f64 = 0.0;
    let mut probe_samples = 0;
    for i in 0..100 {
        let start = if i % 2 == 0 {
            keys[rng.gen_range(0..keys.len())]
        } else {
            rng.gen_range(0..=*keys.last().unwrap())
        };
        let n = if i % 4 < 2 { rng.gen_range(1..threshold) } else { rng.gen_range(threshold..=4 * threshold) };
        let want: Vec<Entry> = oracle.range(start..).take(n).map(|(&k, &v)| Entry::new(k, v)).collect();
        for idx in [&mixed, &loaded] {
            let (got, stats) = idx.reader().range_with_stats(start, n, i % 3 == 0);
            let sorted = got.windows(2).all(|w| w[0].key < w[1].key);
            if got != want || !sorted {
                mismatches += 1;
            }
            if std::ptr::eq(idx, &loaded) && n >= threshold && got.len() >= threshold {
                worst_probe = worst_probe.max(stats.slots_scanned as f64 / got.len() as f64);
                probe_samples += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && probe_samples > 0 && worst_probe <= 2.0,
        format!(
            "200 scans (100 queries x 2 layouts), {mismatches} mismatches; worst slots scanned per pair {worst_probe:.3} over {probe_samples} scans of >= {threshold} pairs"
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let only: Option<Vec<u32>> = std::env::var("BLI_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [Criterion; 8] = [
        (1, "oracle equivalence over ratios x distributions x hints x fills", oracle_equivalence),
        (2, "group-error identity E(n) * n == E(1)", group_error_identity),
        (3, "corridor rank-error bound and hardness ordering", corridor_bound),
        (4, "zero-shift insertion", zero_shift),
        (5, "single-writer multi-reader safety and reader scaling", spmc_safety),
        (6, "single-pass bulk load", bulk_load_single_pass),
        (7, "memory overhead decreases with fill ratio", memory_monotonicity),
        (8, "range-query exactness and amortized probes", range_exactness),
    ];
    let mut failed = Vec::new();
    for (id, title, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = Duration::as_secs_f64(&t.elapsed());
        println!(
            "[{}] criterion {id}: {title} ({secs:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
