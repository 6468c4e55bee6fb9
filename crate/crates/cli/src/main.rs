//! `bli`: benchmark, sweep and verification front end.
//!
//! Exit status: 0 on success, 1 when `verify` finds a divergence, 2 on a
//! usage, configuration or input error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use bli_core::oracle::{differential_check_with, parse_ratio, prepare_keys};
use bli_core::{
    error_curve, gen_synthetic, gen_workload, load_keyset, save_keyset, Distribution, HintKind,
    Index, IndexConfig, Key, MetricsReport, Op, OpTimer, Workload,
};

#[derive(Parser)]
#[command(name = "bli", version, about = "Bucket learned index benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Bulk load, run a read/write mix and print a metrics report.
    Bench(BenchArgs),
    /// Repeat `bench` while varying D-Bucket size, S-Bucket size and fill ratio.
    Sweep(SweepArgs),
    /// Average prediction error of one linear model at group sizes 1..=256.
    Errcurve(Common),
    /// Replay a workload against an ordered map and report the first mismatch.
    Verify(VerifyArgs),
    /// Per-operation time breakdown rows.
    Breakdown(Common),
    /// Time bulk loading.
    BulkloadBench(BulkArgs),
    /// Write `--bulk` keys of the selected dataset to a keyset file.
    GenKeyset(GenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SyntheticArg {
    Uniform,
    Lognormal,
    Piecewise,
}

impl From<SyntheticArg> for Distribution {
    fn from(s: SyntheticArg) -> Self {
        match s {
            SyntheticArg::Uniform => Distribution::Uniform,
            SyntheticArg::Lognormal => Distribution::Lognormal,
            SyntheticArg::Piecewise => Distribution::PiecewiseLinear,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HintArg {
    Mod,
    Clmul,
    Endpoint,
}

impl From<HintArg> for HintKind {
    fn from(h: HintArg) -> Self {
        match h {
            HintArg::Mod => HintKind::Mod,
            HintArg::Clmul => HintKind::ClMul,
            HintArg::Endpoint => HintKind::EndpointLinear,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFmt {
    Json,
    Csv,
}

#[derive(Args, Clone)]
struct Common {
    /// Keyset file: u64 LE count followed by that many u64 LE keys.
    #[arg(long, conflicts_with = "synthetic")]
    keyset: Option<PathBuf>,
    /// Generate keys instead of reading a keyset.
    #[arg(long, value_enum)]
    synthetic: Option<SyntheticArg>,
    /// Keys bulk loaded before the timed run.
    #[arg(long, default_value_t = 1_000_000)]
    bulk: usize,
    /// Operations in the timed run.
    #[arg(long, default_value_t = 1_000_000)]
    ops: usize,
    /// Reads:writes.
    #[arg(long, default_value = "1:1", value_parser = ratio_arg)]
    ratio: (u32, u32),
    /// Total threads; above 1, one writer and the reads split over the rest.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=1024))]
    threads: u64,
    /// Index config as JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Slots per D-Bucket.
    #[arg(long)]
    dbucket: Option<usize>,
    /// Entries per S-Bucket.
    #[arg(long)]
    sbucket: Option<usize>,
    /// Initial fill ratio of new buckets.
    #[arg(long)]
    fill: Option<f64>,
    /// Maximum rank error of a segment model.
    #[arg(long)]
    corridor_error: Option<f64>,
    /// Mean SMO count above which neighbours are merged.
    #[arg(long)]
    theta: Option<u32>,
    #[arg(long, value_enum)]
    hint: Option<HintArg>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ReportFmt::Json)]
    report: ReportFmt,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Drop the publication of the n-th new-key insert (1-based).
    #[arg(long, hide = true)]
    inject_skip_publish: Option<u64>,
}

#[derive(Args)]
struct BulkArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

fn ratio_arg(s: &str) -> Result<(u32, u32), String> {
    parse_ratio(s).map_err(|e| e.to_string())
}

/// A usage or input problem; maps to exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl<E: std::fmt::Display> From<E> for UsageError {
    fn from(e: E) -> Self {
        Self(e.to_string())
    }
}

type CmdResult = Result<ExitCode, UsageError>;

impl Common {
    fn config(&self) -> Result<IndexConfig, UsageError> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => IndexConfig::default(),
        };
        if let Some(v) = self.dbucket {
            cfg.dbucket_capacity = v;
        }
        if let Some(v) = self.sbucket {
            cfg.sbucket_capacity = v;
        }
        if let Some(v) = self.fill {
            cfg.initial_fill_ratio = v;
        }
        if let Some(v) = self.corridor_error {
            cfg.corridor_error = v;
        }
        if let Some(v) = self.theta {
            cfg.merge_threshold = v;
        }
        if let Some(h) = self.hint {
            cfg.hint_kind = h.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sorted distinct keys: enough for the bulk load plus every write.
    fn keys(&self) -> Result<Vec<Key>, UsageError> {
        match &self.keyset {
            Some(p) => {
                let keys = prepare_keys(load_keyset(p)?);
                if keys.is_empty() {
                    return Err(UsageError(format!("{} holds no keys", p.display())));
                }
                Ok(keys)
            }
            None => {
                let dist = self.synthetic.unwrap_or(SyntheticArg::Uniform).into();
                Ok(gen_synthetic(dist, self.bulk + self.ops, self.seed))
            }
        }
    }

    fn workload(&self) -> Result<Workload, UsageError> {
        let keys = self.keys()?;
        Ok(gen_workload(
            &keys, self.bulk, self.ops, self.ratio, self.seed,
        ))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Bench(a) => bench(&a.common),
        Cmd::Sweep(a) => sweep(&a.common),
        Cmd::Errcurve(c) => errcurve(&c),
        Cmd::Verify(a) => verify(&a),
        Cmd::Breakdown(c) => breakdown(&c),
        Cmd::BulkloadBench(a) => bulkload_bench(&a),
        Cmd::GenKeyset(a) => gen_keyset(&a),
    };
    match res {
        Ok(code) => code,
        Err(UsageError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Run `w` on a freshly bulk-loaded index and collect its metrics.
fn run(w: &Workload, cfg: IndexConfig, threads: usize) -> Result<MetricsReport, UsageError> {
    let idx = Index::bulk_load(&w.bulk, cfg)?;
    let start = Instant::now();
    let timer = if threads <= 1 {
        let mut t = OpTimer::default();
        let reader = idx.reader();
        for &op in &w.ops {
            match op {
                Op::Read(k) => {
                    reader.get_timed(k, &mut t);
                }
                Op::Insert(k, v) => {
                    let s = Instant::now();
                    std::hint::black_box(reader.get(k));
                    idx.insert_timed(k, v, s.elapsed(), &mut t);
                }
                Op::Scan(k, n) => {
                    std::hint::black_box(reader.range(k, n));
                }
            }
        }
        t
    } else {
        run_spmc(&idx, &w.ops, threads - 1)
    };
    let elapsed = start.elapsed();
    Ok(MetricsReport::collect(
        &idx,
        &timer,
        w.ops.len() as u64,
        elapsed,
    ))
}

/// One writer takes every insert in order; the reads are dealt round-robin
/// to `readers` threads.
fn run_spmc(idx: &Index, ops: &[Op], readers: usize) -> OpTimer {
    let mut total = OpTimer::default();
    std::thread::scope(|s| {
        let writer = s.spawn(|| {
            let mut t = OpTimer::default();
            let reader = idx.reader();
            for &op in ops {
                if let Op::Insert(k, v) = op {
                    let s = Instant::now();
                    std::hint::black_box(reader.get(k));
                    idx.insert_timed(k, v, s.elapsed(), &mut t);
                }
            }
            t
        });
        let handles: Vec<_> = (0..readers)
            .map(|r| {
                s.spawn(move || {
                    let mut t = OpTimer::default();
                    let reader = idx.reader();
                    let reads = ops.iter().filter(|op| !matches!(op, Op::Insert(..)));
                    for &op in reads.skip(r).step_by(readers) {
                        match op {
                            Op::Read(k) => {
                                reader.get_timed(k, &mut t);
                            }
                            Op::Scan(k, n) => {
                                std::hint::black_box(reader.range(k, n));
                            }
                            Op::Insert(..) => unreachable!(),
                        }
                    }
                    t
                })
            })
            .collect();
        total.merge(&writer.join().expect("writer panicked"));
        for h in handles {
            total.merge(&h.join().expect("reader panicked"));
        }
    });
    total
}

fn emit<T: Serialize>(fmt: ReportFmt, value: &T, csv: impl FnOnce() -> String) {
    match fmt {
        ReportFmt::Json => println!(
            "{}",
            serde_json::to_string_pretty(value).expect("serializable")
        ),
        ReportFmt::Csv => print!("{}", csv()),
    }
}

fn bench(c: &Common) -> CmdResult {
    let cfg = c.config()?;
    let w = c.workload()?;
    let report = run(&w, cfg, c.threads as usize)?;
    emit(c.report, &report, || report.to_csv());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SweepRow {
    param: &'static str,
    value: f64,
    report: MetricsReport,
}

fn sweep(c: &Common) -> CmdResult {
    let base = c.config()?;
    let w = c.workload()?;
    let mut rows = Vec::new();
    for d in [64, 128, 256, 512, 1024] {
        let cfg = IndexConfig {
            dbucket_capacity: d,
            ..base.clone()
        };
        rows.push(("dbucket", d as f64, cfg));
    }
    for s in [4, 8, 16, 32, 64] {
        let cfg = IndexConfig {
            sbucket_capacity: s,
            ..base.clone()
        };
        rows.push(("sbucket", s as f64, cfg));
    }
    for f in [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9] {
        let cfg = IndexConfig {
            initial_fill_ratio: f,
            ..base.clone()
        };
        rows.push(("fill", f, cfg));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (param, value, cfg) in rows {
        let report = run(&w, cfg, c.threads as usize)?;
        out.push(SweepRow {
            param,
            value,
            report,
        });
    }
    emit(c.report, &out, || {
        let mut s = format!("param,value,{}\n", MetricsReport::CSV_HEADER);
        for r in &out {
            s += &format!("{},{},{}\n", r.param, r.value, r.report.csv_row());
        }
        s
    });
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct CurvePoint {
    group_size: usize,
    /// Mean absolute error in groups.
    avg_error: f64,
    /// The same error in ranks.
    rank_error: f64,
}

fn errcurve(c: &Common) -> CmdResult {
    let mut keys = c.keys()?;
    keys.truncate(c.bulk.max(1));
    let points: Vec<CurvePoint> = error_curve(&keys, 256)
        .into_iter()
        .map(|(g, e)| CurvePoint {
            group_size: g,
            avg_error: e,
            rank_error: e * g as f64,
        })
        .collect();
    emit(c.report, &points, || {
        let mut s = String::from("group_size,avg_error,rank_error\n");
        for p in &points {
            s += &format!("{},{},{}\n", p.group_size, p.avg_error, p.rank_error);
        }
        s
    });
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct VerifyOutcome {
    ok: bool,
    reads: usize,
    inserts: usize,
    scans: usize,
    divergence: Option<String>,
}

fn verify(a: &VerifyArgs) -> CmdResult {
    let c = &a.common;
    let cfg = c.config()?;
    let w = c.workload()?;
    let out = match differential_check_with(&w, cfg, a.inject_skip_publish)? {
        Ok(s) => VerifyOutcome {
            ok: true,
            reads: s.reads,
            inserts: s.inserts,
            scans: s.scans,
            divergence: None,
        },
        Err(d) => VerifyOutcome {
            ok: false,
            reads: 0,
            inserts: 0,
            scans: 0,
            divergence: Some(d.to_string()),
        },
    };
    emit(c.report, &out, || {
        format!(
            "ok,reads,inserts,scans,divergence\n{},{},{},{},\"{}\"\n",
            out.ok,
            out.reads,
            out.inserts,
            out.scans,
            out.divergence.as_deref().unwrap_or("").replace('"', "'")
        )
    });
    Ok(if out.ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

#[derive(Serialize)]
struct BreakdownRow {
    op: &'static str,
    component: &'static str,
    pct: f64,
}

fn breakdown(c: &Common) -> CmdResult {
    let cfg = c.config()?;
    let w = c.workload()?;
    let idx = Index::bulk_load(&w.bulk, cfg)?;
    let mut t = OpTimer::default();
    let reader = idx.reader();
    for &op in &w.ops {
        match op {
            Op::Read(k) => {
                reader.get_timed(k, &mut t);
            }
            Op::Insert(k, v) => {
                let s = Instant::now();
                std::hint::black_box(reader.get(k));
                idx.insert_timed(k, v, s.elapsed(), &mut t);
            }
            Op::Scan(..) => {}
        }
    }
    let get = (t.segment_lookup + t.dbucket_lookup).as_secs_f64();
    let put = (t.insert + t.mem_mgmt).as_secs_f64();
    let share = |x: f64| {
        if get + put > 0.0 {
            100.0 * x / (get + put)
        } else {
            0.0
        }
    };
    let b = t.breakdown();
    let rows = vec![
        BreakdownRow {
            op: "get",
            component: "total",
            pct: share(get),
        },
        BreakdownRow {
            op: "get",
            component: "segment_lookup",
            pct: b.segment_lookup_pct,
        },
        BreakdownRow {
            op: "get",
            component: "dbucket_lookup",
            pct: b.dbucket_lookup_pct,
        },
        BreakdownRow {
            op: "put",
            component: "total",
            pct: share(put),
        },
        BreakdownRow {
            op: "put",
            component: "insert",
            pct: b.insert_pct,
        },
        BreakdownRow {
            op: "put",
            component: "memory_management",
            pct: b.mem_mgmt_pct,
        },
    ];
    emit(c.report, &rows, || {
        let mut s = String::from("op,component,pct\n");
        for r in &rows {
            s += &format!("{},{},{:.2}\n", r.op, r.component, r.pct);
        }
        s
    });
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct BulkTiming {
    pairs: usize,
    repeats: usize,
    best_seconds: f64,
    mean_seconds: f64,
    /// Pairs per second at the best repeat.
    throughput: f64,
    height: u32,
}

fn bulkload_bench(a: &BulkArgs) -> CmdResult {
    let c = &a.common;
    let cfg = c.config()?;
    let w = Workload {
        ops: Vec::new(),
        ..gen_workload(&c.keys()?, c.bulk, 0, (1, 0), c.seed)
    };
    let repeats = a.repeats.max(1);
    let mut times = Vec::with_capacity(repeats);
    let mut height = 0;
    for _ in 0..repeats {
        let s = Instant::now();
        let idx = Index::bulk_load(&w.bulk, cfg.clone())?;
        times.push(s.elapsed());
        height = idx.height();
    }
    let best = times
        .iter()
        .min()
        .copied()
        .unwrap_or(Duration::ZERO)
        .as_secs_f64();
    let mean = times.iter().map(Duration::as_secs_f64).sum::<f64>() / repeats as f64;
    let out = BulkTiming {
        pairs: w.bulk.len(),
        repeats,
        best_seconds: best,
        mean_seconds: mean,
        throughput: if best > 0.0 {
            w.bulk.len() as f64 / best
        } else {
            0.0
        },
        height,
    };
    emit(c.report, &out, || {
        format!(
            "pairs,repeats,best_seconds,mean_seconds,throughput,height\n{},{},{},{},{},{}\n",
            out.pairs, out.repeats, out.best_seconds, out.mean_seconds, out.throughput, out.height
        )
    });
    Ok(ExitCode::SUCCESS)
}

fn gen_keyset(a: &GenArgs) -> CmdResult {
    let mut keys = a.common.keys()?;
    keys.truncate(a.common.bulk);
    save_keyset(&keys, &a.out)?;
    eprintln!("wrote {} keys to {}", keys.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
