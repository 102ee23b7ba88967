use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use branchdev_core::devlab::{self, BatteryConfig, EpsSet, SpectralSummary, Status, VerdictReport};
use branchdev_core::model::{validate as check_hypotheses, Check, Count2, HypothesisReport, Vec2};
use branchdev_core::pgf::{exact_deviation_curve, geometric_base, r_coeffs, theorem1_sums, Process};
use branchdev_core::simulate::{estimate_event_curve, simulate_path, y_sequence, EventParams, Threshold};
use branchdev_core::spectral::{default_grid, mean_ratio_sup, regularity_power};
use branchdev_core::{Error, ModelSpec, SpectralData, Statistic};

use crate::RunConfig;

/// Bad flag values or a malformed model: reported with exit status 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn is_input_error(e: &anyhow::Error) -> bool {
    e.chain().any(|cause| {
        cause.is::<InputError>()
            || matches!(
                cause.downcast_ref::<Error>(),
                Some(Error::Parse(_) | Error::InvalidLaw { .. } | Error::Domain(_))
            )
    })
}

fn load(run: &RunConfig) -> Result<ModelSpec> {
    ModelSpec::from_path(&run.model).with_context(|| format!("loading {}", run.model.display()))
}

fn warn_if_degenerate(l: Vec2) {
    if l[0] == l[1] {
        eprintln!("warning: l = {l:?} has l1 = l2; deviation events then carry no composition information");
    }
}

fn out_dir<'a>(run: &'a RunConfig, command: &str) -> Result<&'a Path> {
    let dir = run
        .out
        .as_deref()
        .ok_or_else(|| InputError(format!("`{command}` writes several files and needs --out")))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Writes `value` to `<out>/<name>` or, without `--out`, to stdout.
fn emit_json<T: Serialize>(run: &RunConfig, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match &run.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join(name), text).with_context(|| format!("writing {name}"))?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Human-readable text goes to stdout when JSON went to a file, else to stderr.
fn say(run: &RunConfig, text: &str) {
    if run.out.is_some() {
        println!("{text}");
    } else {
        eprintln!("{text}");
    }
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(dir.join(name)).with_context(|| format!("creating {name}"))
}

fn start_state(start_type: usize) -> Count2 {
    let mut x = [0; 2];
    x[start_type] = 1;
    x
}

fn hypothesis_table(report: &HypothesisReport) -> String {
    let rows: [(&str, &Check); 10] = [
        ("supercritical", &report.supercritical),
        ("positively regular", &report.positively_regular),
        ("immigration can vanish", &report.immigration_can_vanish),
        ("jacobian limit", &report.jacobian_limit),
        ("geometric regime", &report.geometric_regime),
        ("exponential moments", &report.exponential_moments),
        ("axis atoms", &report.axis_atoms),
        ("minimum sizes", &report.minimum_sizes),
        ("offspring axis minimum", &report.offspring_axis_minimum),
        ("no extinction", &report.no_extinction),
    ];
    rows.iter()
        .map(|(name, c)| format!("{:<24} {:<5} {}", name, if c.holds { "yes" } else { "no" }, c.evidence))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn validate(run: &RunConfig, geometric_d: u32) -> Result<()> {
    let spec = load(run)?;
    let report = check_hypotheses(&spec, geometric_d);
    say(run, &hypothesis_table(&report));
    emit_json(run, "hypotheses.json", &report)
}

#[derive(Serialize)]
struct SpectralOutput {
    spectral: SpectralSummary,
    regularity_power: Option<usize>,
    mean_ratio_sup: Vec<(usize, f64)>,
}

pub fn spectral(run: &RunConfig, n_max: usize) -> Result<()> {
    let spec = load(run)?;
    let sd = SpectralData::compute(&spec)?;
    let grid = default_grid(20);
    let mean_ratio_sup = (1..=n_max)
        .map(|n| Ok((n, mean_ratio_sup(&spec, &sd.perron, n, &grid)?)))
        .collect::<Result<Vec<_>>>()?;
    let output = SpectralOutput {
        spectral: SpectralSummary::new(&spec, &sd),
        regularity_power: regularity_power(&sd.mean_matrix),
        mean_ratio_sup,
    };
    say(
        run,
        &format!(
            "rho {:.12}  u {:?}  v {:?}  gamma {}",
            sd.rho(),
            sd.perron.u,
            sd.perron.v,
            sd.gamma().map_or("undefined".into(), |g| format!("{g:.12}"))
        ),
    );
    emit_json(run, "spectral.json", &output)
}

pub fn exact(run: &RunConfig, n_max: usize, degree: usize, eps: EpsSet, l: Vec2, k0: usize) -> Result<()> {
    let spec = load(run)?;
    let sd = SpectralData::compute(&spec)?;
    warn_if_degenerate(l);
    let dir = out_dir(run, "exact")?;

    // Every coefficient inside the box is exact; `box_residual` is the mass outside it.
    let mut law = csv_writer(dir, "law.csv")?;
    law.write_record(["n", "start_type", "j1", "j2", "p", "box_residual"])?;
    let mut process = Process::new(&spec, degree);
    for n in 0..=n_max {
        let generation = process.advance_to(n);
        for (i, g) in generation.g.iter().enumerate() {
            let residual = g.residual().to_string();
            for (j, p) in g.entries().filter(|(_, p)| *p != 0.0) {
                law.write_record([
                    n.to_string(),
                    (i + 1).to_string(),
                    j[0].to_string(),
                    j[1].to_string(),
                    p.to_string(),
                    residual.clone(),
                ])?;
            }
        }
    }
    law.flush()?;

    let ns: Vec<usize> = (1..=n_max).collect();
    let mut dev = csv_writer(dir, "deviation.csv")?;
    dev.write_record(["statistic", "start_type", "n", "eps", "p", "residual"])?;
    for (statistic, e) in [(Statistic::DevNext, eps.next), (Statistic::DevRatio, eps.ratio)] {
        for i in 0..2 {
            let curve = exact_deviation_curve(&spec, &sd, i, &ns, statistic, e, l, degree)?;
            for (n, p) in ns.iter().zip(curve) {
                dev.write_record([
                    statistic.to_string(),
                    (i + 1).to_string(),
                    n.to_string(),
                    e.to_string(),
                    p.value.to_string(),
                    p.residual.to_string(),
                ])?;
            }
        }
    }
    dev.flush()?;

    // The normalised coefficients and limit sums exist only when h0 > 0 and A^n / gamma^n converges.
    match geometric_base(&spec, &sd) {
        Err(e) => eprintln!("skipping r_coeffs.csv and limit_sums.csv: {e}"),
        Ok(base) => {
            let n = n_max.max(1);
            let coeffs = r_coeffs(&spec, &sd, n, degree)?;
            let mut out = csv_writer(dir, "r_coeffs.csv")?;
            out.write_record(["n", "start_type", "j1", "j2", "r", "relative_change", "box_residual"])?;
            for i in 0..2 {
                for (j, r) in coeffs.current[i].entries().filter(|(_, r)| *r != 0.0) {
                    let change = coeffs.relative_change(i, j).map_or(String::new(), |c| c.to_string());
                    out.write_record([
                        n.to_string(),
                        (i + 1).to_string(),
                        j[0].to_string(),
                        j[1].to_string(),
                        r.to_string(),
                        change,
                        coeffs.tail[i].to_string(),
                    ])?;
                }
            }
            out.flush()?;

            let next = theorem1_sums(&spec, &sd, eps.next, l, degree, n, k0)?;
            let ratio = theorem1_sums(&spec, &sd, eps.ratio, l, degree, n, k0)?;
            let mut out = csv_writer(dir, "limit_sums.csv")?;
            out.write_record([
                "start_type",
                "n",
                "k0",
                "h0_gamma",
                "eps_next",
                "next_sum",
                "next_remainder",
                "eps_ratio",
                "ratio_sum",
                "ratio_remainder",
            ])?;
            for i in 0..2 {
                out.write_record([
                    (i + 1).to_string(),
                    n.to_string(),
                    k0.to_string(),
                    base.to_string(),
                    eps.next.to_string(),
                    next[i].next_sum.to_string(),
                    next[i].next_remainder.to_string(),
                    eps.ratio.to_string(),
                    ratio[i].ratio_sum.to_string(),
                    ratio[i].ratio_remainder.to_string(),
                ])?;
            }
            out.flush()?;
        }
    }
    say(run, &format!("wrote exact tables for n <= {n_max}, D = {degree} to {}", dir.display()));
    Ok(())
}

pub struct SimulateOptions {
    pub seed: u64,
    pub n_max: usize,
    pub reps: u64,
    pub eps: EpsSet,
    pub l: Vec2,
    pub statistics: Vec<Statistic>,
    pub alpha_quantile: f64,
    pub start_type: usize,
}

pub fn simulate(run: &RunConfig, opts: &SimulateOptions) -> Result<()> {
    let spec = load(run)?;
    let sd = SpectralData::compute(&spec)?;
    warn_if_degenerate(opts.l);
    if opts.n_max == 0 || opts.reps == 0 {
        bail!(InputError("--n-max and --reps must be positive".into()));
    }
    let dir = out_dir(run, "simulate")?;
    let x0 = start_state(opts.start_type);

    let path = simulate_path(&spec, opts.n_max, x0, opts.seed, true)?;
    let split = path.split.as_ref().expect("split requested");
    let ys = y_sequence(&spec, &sd.perron, &path.x);
    let mut out = csv_writer(dir, "trajectory.csv")?;
    out.write_record(["gen", "x1", "x2", "z1", "z2", "y"])?;
    for (n, x) in path.x.iter().enumerate() {
        let z = split.z[n];
        out.write_record([
            n.to_string(),
            x[0].to_string(),
            x[1].to_string(),
            z[0].to_string(),
            z[1].to_string(),
            ys[n].to_string(),
        ])?;
    }
    out.flush()?;

    let ns: Vec<usize> = (1..=opts.n_max).collect();
    let mut estimates = Vec::new();
    for (k, &statistic) in opts.statistics.iter().enumerate() {
        let eps = match statistic.base() {
            Statistic::DevNext => opts.eps.next,
            Statistic::DevRatio => opts.eps.ratio,
            _ => opts.eps.tail,
        };
        let params = EventParams {
            alpha: Threshold::Quantile(opts.alpha_quantile),
            ..EventParams::new(eps, opts.l, x0)
        };
        let seed = branchdev_core::simulate::derive_seed(opts.seed, k as u64 + 1);
        estimates.extend(estimate_event_curve(&spec, &sd, statistic, &ns, &params, opts.reps, seed)?);
    }
    emit_json(run, "estimates.json", &estimates)?;
    say(
        run,
        &format!(
            "wrote trajectory.csv and {} estimates ({} replicas each) to {}",
            estimates.len(),
            opts.reps,
            dir.display()
        ),
    );
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

fn verdict_table(report: &VerdictReport) -> String {
    let mut lines = vec![format!(
        "{:<26} {:<15} {:<8} {:>10} {:>10} {:>6}  detail",
        "theorem", "statistic", "status", "predicted", "measured", "tol"
    )];
    for v in &report.verdicts {
        let status = match v.status {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Skipped => "skipped",
        };
        lines.push(format!(
            "{:<26} {:<15} {:<8} {:>10} {:>10} {:>6}  {}",
            v.theorem,
            v.statistic,
            status,
            fmt_opt(v.predicted),
            fmt_opt(v.measured),
            v.tolerance.map_or("-".into(), |t| format!("{t:.2}")),
            v.detail
        ));
    }
    lines.join("\n")
}

pub fn verdicts(run: &RunConfig, config: &BatteryConfig) -> Result<()> {
    let spec = load(run)?;
    let sd = SpectralData::compute(&spec)?;
    warn_if_degenerate(config.l);
    if config.reps == 0 || config.mgf_reps == 0 {
        bail!(InputError("--reps and --mgf-reps must be positive".into()));
    }
    let report = devlab::verdicts(&spec, &sd, config)?;
    say(run, &verdict_table(&report));
    emit_json(run, "verdicts.json", &report)
}
