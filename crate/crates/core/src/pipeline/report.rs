use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::baseline::{run_baseline, BaselineKind};
use super::metrics::MetricsLog;
use super::run::{metrics_path, registry_path, train, RegistryInfo, StageSelect};
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NoKd,
    KdMm,
    KdCm,
    Mst,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::NoKd, Method::KdMm, Method::KdCm, Method::Mst];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoKd => "no_kd",
            Self::KdMm => "kd_mm",
            Self::KdCm => "kd_cm",
            Self::Mst => "mst",
        }
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            Self::NoKd => Some(BaselineKind::NoKd),
            Self::KdMm => Some(BaselineKind::KdMm),
            Self::KdCm => Some(BaselineKind::KdCm),
            Self::Mst => None,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mst" => Ok(Self::Mst),
            other => other
                .parse::<BaselineKind>()
                .map(|b| match b {
                    BaselineKind::NoKd => Self::NoKd,
                    BaselineKind::KdMm => Self::KdMm,
                    BaselineKind::KdCm => Self::KdCm,
                })
                .map_err(|_| Error::config(format!("unknown method `{other}`"))),
        }
    }
}

/// Parse a comma-separated method list; `no_kd` is always included since
/// gains are reported against it.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out = vec![Method::NoKd];
    for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: Method = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Target modalities; empty means the config's target.
    pub targets: Vec<usize>,
    /// Cells run at once.
    pub threads: usize,
}

/// Final test accuracy of one (target, method, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub target: usize,
    pub method: Method,
    pub seed: u64,
    pub test_oa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub target: usize,
    pub method: Method,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    /// Mean OA minus the no_kd mean for the same target.
    pub gain: Option<f64>,
}

/// Mean routing probability per teacher at the first and last S3 epoch,
/// averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSummary {
    pub target: usize,
    pub labels: Vec<String>,
    pub first: Vec<f64>,
    pub last: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cells: Vec<CellResult>,
    pub rows: Vec<ReportRow>,
    pub routing: Vec<RouteSummary>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cell_dir(out: &Path, target: usize, method: Method, seed: u64) -> PathBuf {
    out.join(format!("t{target}")).join(method.name()).join(format!("seed{seed}"))
}

fn run_cell(cfg: &RunConfig, target: usize, method: Method, seed: u64, out: &Path) -> Result<CellResult> {
    let mut cfg = cfg.clone();
    cfg.plan.target = Some(target);
    let data = cfg.dataset(seed)?;
    let dir = cell_dir(out, target, method, seed);
    let test = match method.baseline() {
        Some(kind) => run_baseline(kind, &cfg, &data, seed, &dir, None)?.test,
        None => train(&cfg, &data, seed, &dir, StageSelect::All, 1)?
            .test
            .ok_or_else(|| Error::Invariant("full run produced no student".into()))?,
    };
    Ok(CellResult {
        target,
        method,
        seed,
        test_oa: test.overall_accuracy,
    })
}

/// Run every method for every seed and target into `out/t{t}/{method}/seed{s}`
/// and aggregate. Cells share the split and the student's data order per seed.
pub fn compare(cfg: &RunConfig, opts: &CompareOptions, out: &Path) -> Result<Report> {
    cfg.validate()?;
    if opts.seeds.len() < 2 {
        return Err(Error::config("compare needs at least two seeds"));
    }
    if opts.methods.is_empty() {
        return Err(Error::config("no methods given"));
    }
    let targets = if opts.targets.is_empty() {
        vec![cfg.target()?]
    } else {
        opts.targets.clone()
    };
    for &t in &targets {
        let mut c = cfg.clone();
        c.plan.target = Some(t);
        c.validate()?;
        c.target()?;
    }

    let mut jobs = Vec::new();
    for &t in &targets {
        for &m in &opts.methods {
            for &s in &opts.seeds {
                jobs.push((t, m, s));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(t, m, s)) = jobs.get(i) else { break };
        let r = run_cell(cfg, t, m, s, out);
        results.lock().expect("results lock")[i] = Some(r);
    };
    let threads = opts.threads.clamp(1, jobs.len());
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|sc| {
            for _ in 0..threads {
                sc.spawn(work);
            }
        });
    }
    let cells = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut routing = Vec::new();
    for &t in &targets {
        let base = oa_of(&cells, t, Method::NoKd).map(|v| mean_std(&v).0);
        for &m in &opts.methods {
            let Some(v) = oa_of(&cells, t, m) else { continue };
            let (mean, std) = mean_std(&v);
            rows.push(ReportRow {
                target: t,
                method: m,
                mean,
                std,
                gain: base.filter(|_| m != Method::NoKd).map(|b| mean - b),
            });
        }
        if opts.methods.contains(&Method::Mst) {
            routing.push(route_summary(out, t, &opts.seeds)?);
        }
    }
    let report = Report { cells, rows, routing };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let p = out.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
    let p = out.join("report.txt");
    std::fs::write(&p, render(&report)).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

fn oa_of(cells: &[CellResult], target: usize, method: Method) -> Option<Vec<f64>> {
    let v: Vec<f64> = cells
        .iter()
        .filter(|c| c.target == target && c.method == method)
        .map(|c| c.test_oa)
        .collect();
    (!v.is_empty()).then_some(v)
}

fn route_summary(out: &Path, target: usize, seeds: &[u64]) -> Result<RouteSummary> {
    let mut labels = Vec::new();
    let (mut first, mut last): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    let mut counted = 0usize;
    for &s in seeds {
        let table = route_stats(&cell_dir(out, target, Method::Mst, s))?;
        let (Some(a), Some(b)) = (table.rows.first(), table.rows.last()) else { continue };
        if counted == 0 {
            labels = table.labels.clone();
            first = vec![0.0; labels.len()];
            last = vec![0.0; labels.len()];
        }
        for (acc, v) in first.iter_mut().zip(&a.probs) {
            *acc += v;
        }
        for (acc, v) in last.iter_mut().zip(&b.probs) {
            *acc += v;
        }
        counted += 1;
    }
    let n = counted.max(1) as f64;
    first.iter_mut().chain(last.iter_mut()).for_each(|v| *v /= n);
    Ok(RouteSummary { target, labels, first, last })
}

/// Plain-text table of a report.
pub fn render(report: &Report) -> String {
    let mut s = String::new();
    let seeds = report
        .cells
        .iter()
        .filter(|c| c.target == report.cells[0].target && c.method == report.cells[0].method)
        .count();
    let _ = writeln!(s, "# test OA over {seeds} seeds: mean ± population std; gain vs no_kd in points");
    let _ = writeln!(s, "{:<8}{:<8}{:>18}{:>10}", "target", "method", "oa", "gain");
    for r in &report.rows {
        let gain = r.gain.map_or("-".to_string(), |g| format!("{:+.2}", 100.0 * g));
        let _ = writeln!(
            s,
            "{:<8}{:<8}{:>18}{:>10}",
            format!("m{}", r.target),
            r.method.name(),
            format!("{:.4} ± {:.4}", r.mean, r.std),
            gain
        );
    }
    for rs in &report.routing {
        let _ = writeln!(s, "# routing, target m{}: first -> last S3 epoch", rs.target);
        for (i, l) in rs.labels.iter().enumerate() {
            let _ = writeln!(s, "{l:<16}{:.4} -> {:.4}", rs.first[i], rs.last[i]);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRow {
    pub epoch: u32,
    pub probs: Vec<f64>,
}

/// Per-epoch mean routing probabilities of a run's stage 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteTable {
    pub labels: Vec<String>,
    pub rows: Vec<RouteRow>,
}

impl RouteTable {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("epoch\t{}\n", self.labels.join("\t"));
        for r in &self.rows {
            let cells: Vec<String> = r.probs.iter().map(|p| format!("{p:.6}")).collect();
            let _ = writeln!(s, "{}\t{}", r.epoch, cells.join("\t"));
        }
        s
    }
}

pub fn route_stats(run_dir: &Path) -> Result<RouteTable> {
    let rp = registry_path(run_dir);
    if !rp.exists() {
        return Err(Error::MissingDependency { path: rp });
    }
    let text = std::fs::read_to_string(&rp).map_err(|e| Error::io(&rp, e))?;
    let info: RegistryInfo =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", rp.display())))?;
    let mp = metrics_path(run_dir);
    if !mp.exists() {
        return Err(Error::MissingDependency { path: mp });
    }
    let log = MetricsLog::read(&mp)?;
    let n = info.teachers.len();
    let mut rows = Vec::new();
    for l in log.stage("s3").filter(|l| l.split == "train") {
        let Some(p) = &l.routing_mean else { continue };
        if p.len() != n {
            return Err(Error::Data(format!(
                "epoch {} has {} routing entries for {n} teachers",
                l.epoch,
                p.len()
            )));
        }
        rows.push(RouteRow {
            epoch: l.epoch,
            probs: p.clone(),
        });
    }
    Ok(RouteTable {
        labels: info.teachers.iter().map(|t| t.label.clone()).collect(),
        rows,
    })
}
