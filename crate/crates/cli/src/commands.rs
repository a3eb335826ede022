use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use rdiqkd::attacks::{blinding_attack, exclusion_attack, usd_attack, AttackReport};
use rdiqkd::keyrate::{
    certify_honest, KeyRateReport, PipelineOptions, RateStatus, RingScan, ThetaChoice, ThetaSearch, CSV_HEADER,
};
use rdiqkd::moment::{GramSpec, SolveTolerances};
use rdiqkd::montecarlo::{Simulator, Strategy};
use rdiqkd::noise::{
    averaged_gram, gram_envelope, gram_spec_from_json, gram_spec_to_json, gram_to_json, interval_to_json,
    samples_from_json, NoiseSample,
};
use rdiqkd::protocol::{gram_of_family, honest_stats_for_gram, qubit_states, sifting_stats, ChannelParams, GramMatrix};

use crate::config::{Grid, Settings, ThetaArg};
use crate::{CliError, Protocol, Sdp};

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Writes to `path`, or to stdout when absent.
fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| config_err(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s
}

fn out_path(settings: &Settings, p: &Protocol) -> Option<PathBuf> {
    settings.path(p.out.clone(), "output.path")
}

fn channel(settings: &Settings, p: &Protocol) -> Result<ChannelParams, CliError> {
    let eta = settings.require(p.eta, "channel.eta", "--eta")?;
    let lambda = settings.get(p.lambda, "channel.lambda")?.unwrap_or(0.0);
    Ok(ChannelParams::new(eta, lambda)?)
}

fn pipeline(settings: &Settings, sdp: &Sdp) -> Result<PipelineOptions, CliError> {
    let level = settings.get(sdp.level, "sdp.level")?.unwrap_or(2);
    let gap = settings.get(sdp.gap_tol, "sdp.gap_tol")?.unwrap_or(1e-7);
    if !(gap > 0.0 && gap.is_finite()) {
        return Err(config_err(format!("gap tolerance must be positive, got {gap}")));
    }
    Ok(PipelineOptions {
        level,
        tol: SolveTolerances {
            gap,
            ..SolveTolerances::default()
        },
    })
}

enum GramSource {
    File { path: PathBuf, spec: GramSpec },
    Ring { n: usize, theta: ThetaArg },
}

impl GramSource {
    fn resolve(settings: &Settings, p: &Protocol) -> Result<Self, CliError> {
        let file = settings.path(p.gram.clone(), "gram.file");
        let theta = settings.get(p.theta, "protocol.theta")?;
        let n = settings.get(p.n, "protocol.n")?;
        match (file, theta) {
            (Some(_), Some(_)) => Err(config_err(
                "give exactly one gram source: a gram file or a qubit-ring theta",
            )),
            (Some(path), None) => {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
                let spec = gram_spec_from_json(&text)?;
                if let Some(n) = n.filter(|&n| n != spec.n()) {
                    return Err(config_err(format!("--n {n} disagrees with the gram file (n = {})", spec.n())));
                }
                Ok(GramSource::File { path, spec })
            }
            (None, Some(theta)) => {
                let n = n.ok_or_else(|| config_err("missing --n (or protocol.n in the config file)"))?;
                Ok(GramSource::Ring { n, theta })
            }
            (None, None) => Err(config_err("missing gram source: give --theta (with --n) or --gram")),
        }
    }

    /// Exact Gram matrix; θ must be a number.
    fn exact(&self, what: &str) -> Result<GramMatrix, CliError> {
        match self {
            GramSource::File { spec: GramSpec::Exact(g), .. } => Ok(g.clone()),
            GramSource::File { .. } => Err(config_err(format!("{what} needs an exact gram matrix, not an interval"))),
            GramSource::Ring { theta: ThetaArg::Optimize, .. } => {
                Err(config_err(format!("{what} needs a numeric theta")))
            }
            GramSource::Ring { n, theta: ThetaArg::Value(t) } => Ok(gram_of_family(&qubit_states(*n, *t)?)),
        }
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

fn keyrate_text(input: &Value, r: &KeyRateReport) -> String {
    let mut s = String::new();
    for key in ["n", "theta", "gram_file", "eta", "lambda", "level"] {
        if let Some(v) = input.get(key).filter(|v| !v.is_null()) {
            let _ = writeln!(s, "{key:<16}{}", v.as_str().map_or_else(|| v.to_string(), str::to_string));
        }
    }
    let _ = writeln!(s, "{:<16}{}", "p_succ", r.p_succ);
    let _ = writeln!(s, "{:<16}{}", "qber", opt_num(r.qber));
    let _ = writeln!(s, "{:<16}{}", "pg_upper", opt_num(r.pg_upper));
    let _ = writeln!(s, "{:<16}{}", "keyrate_raw", r.keyrate_raw);
    let _ = writeln!(s, "{:<16}{}", "keyrate_clipped", r.keyrate_clipped);
    let _ = writeln!(s, "{:<16}{}", "status", r.status.as_str());
    if let Some(d) = &r.solver {
        let _ = writeln!(
            s,
            "{:<16}gap={:e} min_eigenvalue={:e} iterations={} reduced_dim={}/{} variables={}",
            "solver", d.gap, d.min_eigenvalue, d.iterations, d.reduced_dim, d.moment_dim, d.variables
        );
    }
    if let Some(a) = &r.attack {
        let _ = writeln!(
            s,
            "{:<16}{} pg_lower={} q={} threshold_eta={}",
            "attack",
            a.name.as_str(),
            a.pg_lower,
            a.q,
            a.threshold_eta
        );
    }
    s
}

pub fn keyrate(settings: &Settings, p: Protocol, sdp: Sdp, json_out: bool) -> Result<(), CliError> {
    let ch = channel(settings, &p)?;
    let opts = pipeline(settings, &sdp)?;
    let source = GramSource::resolve(settings, &p)?;
    let (spec, theta, file) = match &source {
        GramSource::File { path, spec } => (spec.clone(), None, Some(path.display().to_string())),
        GramSource::Ring { n, theta } => {
            let t = match theta {
                ThetaArg::Value(t) => *t,
                ThetaArg::Optimize => {
                    let scan = RingScan {
                        n: *n,
                        lambda: ch.lambda,
                        theta: ThetaChoice::Optimize(ThetaSearch::default()),
                        opts,
                    };
                    scan.point(ch.eta).theta
                }
            };
            (GramSpec::Exact(gram_of_family(&qubit_states(*n, t)?)), Some(t), None)
        }
    };
    let report = certify_honest(&spec, ch, &opts)?;
    let input = json!({
        "n": spec.n(),
        "theta": theta,
        "gram_file": file,
        "eta": ch.eta,
        "lambda": ch.lambda,
        "level": opts.level,
        "gap_tol": opts.tol.gap,
    });
    let doc = json!({ "input": input, "report": report });
    if json_out {
        emit(None, &pretty(&doc))?;
    } else {
        emit(None, &keyrate_text(&input, &report))?;
    }
    if let Some(path) = out_path(settings, &p) {
        emit(Some(&path), &pretty(&doc))?;
    }
    match report.status {
        RateStatus::Optimal | RateStatus::NoRawKey => Ok(()),
        s => Err(CliError::Solver(format!("relaxation finished with status {}", s.as_str()))),
    }
}

fn eta_values(settings: &Settings, p: &Protocol, grid: Option<Grid>) -> Result<Vec<f64>, CliError> {
    let grid = settings.get(grid, "channel.eta_grid")?;
    let eta = settings.get(p.eta, "channel.eta")?;
    match (grid, eta) {
        (Some(g), None) => Ok(g.0),
        (None, Some(e)) => Ok(vec![e]),
        (Some(_), Some(_)) => Err(config_err("give either --eta or --eta-grid, not both")),
        (None, None) => Err(config_err("missing --eta-grid (or --eta)")),
    }
}

pub fn scan(
    settings: &Settings,
    p: Protocol,
    sdp: Sdp,
    grid: Option<Grid>,
    jobs: Option<usize>,
    coarse: Option<usize>,
    iterations: Option<usize>,
) -> Result<(), CliError> {
    let etas = eta_values(settings, &p, grid)?;
    let lambda = settings.get(p.lambda, "channel.lambda")?.unwrap_or(0.0);
    ChannelParams::new(1.0, lambda)?;
    let opts = pipeline(settings, &sdp)?;
    let (n, theta) = match GramSource::resolve(settings, &p)? {
        GramSource::Ring { n, theta } => (n, theta),
        GramSource::File { .. } => return Err(config_err("scan works on the qubit ring; give --n and --theta")),
    };
    let theta = match theta {
        ThetaArg::Value(t) => ThetaChoice::Fixed(t),
        ThetaArg::Optimize => {
            let d = ThetaSearch::default();
            ThetaChoice::Optimize(ThetaSearch {
                coarse: settings.get(coarse, "scan.coarse")?.unwrap_or(d.coarse),
                iterations: settings.get(iterations, "scan.iterations")?.unwrap_or(d.iterations),
            })
        }
    };
    let jobs = settings.get(jobs, "scan.jobs")?.unwrap_or(1);
    let rows = RingScan { n, lambda, theta, opts }.run(&etas, jobs)?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    emit(out_path(settings, &p).as_deref(), &csv)
}

pub fn attack(
    settings: &Settings,
    p: Protocol,
    kind: Option<String>,
    d: Option<f64>,
    grid: Option<Grid>,
    json_out: bool,
) -> Result<(), CliError> {
    let kind: String = settings.require(kind, "attack.kind", "--kind")?;
    let etas = eta_values(settings, &p, grid)?;
    let eval: Box<dyn Fn(f64) -> rdiqkd::Result<AttackReport>> = match kind.as_str() {
        "exclusion" => {
            let g = GramSource::resolve(settings, &p)?.exact("exclusion attack")?;
            Box::new(move |eta| exclusion_attack(&g, eta))
        }
        "usd" => {
            let d: f64 = settings.require(d, "attack.d", "--d")?;
            Box::new(move |eta| usd_attack(d, eta))
        }
        "blinding" => {
            let n: usize = settings.require(p.n, "protocol.n", "--n")?;
            Box::new(move |eta| blinding_attack(n, eta))
        }
        other => return Err(config_err(format!("unknown attack {other:?}, expected exclusion, usd or blinding"))),
    };
    let reports = etas.iter().map(|&e| eval(e)).collect::<rdiqkd::Result<Vec<_>>>()?;
    let threshold = reports[0].threshold_eta;
    let rows: Vec<Value> = etas
        .iter()
        .zip(&reports)
        .map(|(eta, r)| json!({ "eta": eta, "q": r.q, "pg_lower": r.pg_lower }))
        .collect();
    let doc = json!({ "attack": kind, "threshold_eta": threshold, "rows": rows });
    if json_out {
        emit(None, &pretty(&doc))?;
    } else {
        let mut s = format!("attack {kind}\nthreshold_eta {threshold}\neta q pg_lower\n");
        for (eta, r) in etas.iter().zip(&reports) {
            let _ = writeln!(s, "{eta} {} {}", r.q, r.pg_lower);
        }
        emit(None, &s)?;
    }
    if let Some(path) = out_path(settings, &p) {
        emit(Some(&path), &pretty(&doc))?;
    }
    Ok(())
}

pub struct SimulateArgs {
    pub strategy: Option<String>,
    pub rounds: Option<u64>,
    pub seed: Option<u64>,
    pub shards: Option<usize>,
    pub transcript: Option<PathBuf>,
    pub state_vectors: bool,
    pub json: bool,
}

fn z(empirical: Option<f64>, p: f64, trials: u64) -> Option<f64> {
    let e = empirical?;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    Some(if sigma > 0.0 {
        (e - p) / sigma
    } else if e == p {
        0.0
    } else {
        f64::INFINITY
    })
}

pub fn simulate(settings: &Settings, p: Protocol, a: SimulateArgs) -> Result<(), CliError> {
    let ch = channel(settings, &p)?;
    let strategy: Strategy = settings
        .get(a.strategy, "simulate.strategy")?
        .map_or(Ok(Strategy::Honest), |s: String| s.parse())?;
    let rounds = settings.get(a.rounds, "simulate.rounds")?.unwrap_or(100_000);
    let seed = settings.get(a.seed, "simulate.seed")?.unwrap_or(1);
    let shards = settings.get(a.shards, "simulate.shards")?.unwrap_or(1);
    let transcript = settings.path(a.transcript, "simulate.transcript");
    if rounds == 0 {
        return Err(config_err("need at least one round"));
    }
    if transcript.is_some() && shards != 1 {
        return Err(config_err("a transcript needs a single shard"));
    }
    let source = GramSource::resolve(settings, &p)?;
    let gram = source.exact("simulation")?;
    let sim = if a.state_vectors {
        match (&source, strategy) {
            (GramSource::Ring { n, theta: ThetaArg::Value(t) }, Strategy::Honest) => {
                Simulator::honest_from_states(&qubit_states(*n, *t)?, ch)?
            }
            _ => return Err(config_err("--state-vectors needs the honest strategy on the qubit ring")),
        }
    } else {
        Simulator::new(gram.clone(), ch, strategy)?
    };
    let summary = match &transcript {
        Some(path) => {
            let file = File::create(path).map_err(|e| config_err(format!("cannot write {}: {e}", path.display())))?;
            let mut w = BufWriter::new(file);
            let s = sim.run_stream(rounds, seed, 0, Some(&mut w))?;
            w.flush().map_err(|e| config_err(format!("cannot write {}: {e}", path.display())))?;
            s
        }
        None => sim.run_sharded(rounds, seed, shards)?,
    };

    let n = gram.n();
    let honest = honest_stats_for_gram(&gram, ch);
    let sift = sifting_stats(&honest);
    let analytic_p0: Vec<Vec<f64>> = (0..n).map(|x| (0..n).map(|y| sim.marginal_p0(x, y)).collect()).collect();
    let empirical_p0: Vec<Vec<Option<f64>>> = (0..n).map(|x| (0..n).map(|y| summary.p0(x, y)).collect()).collect();
    let expected_agreement = sim.expected_agreement();
    let doc = json!({
        "summary": summary,
        "analytic": {
            "p0": analytic_p0,
            "p_succ": sift.p_succ,
            "qber": sift.qber().ok(),
            "eve_agreement": expected_agreement,
        },
        "empirical": {
            "p0": empirical_p0,
            "p_succ": summary.p_succ(),
            "qber": summary.qber(),
            "eve_agreement": summary.eve_agreement(),
        },
    });
    if a.json {
        emit(None, &pretty(&doc))?;
    } else {
        let mut s = format!(
            "strategy {} rounds {} seed {} rng {}\n{:<16}{:>14}{:>14}{:>10}\n",
            strategy.as_str(),
            summary.rounds,
            seed,
            summary.rng,
            "quantity",
            "empirical",
            "analytic",
            "z"
        );
        let mut line = |name: String, e: Option<f64>, an: Option<f64>, trials: u64| {
            let zz = an.and_then(|an| z(e, an, trials));
            let _ = writeln!(
                s,
                "{name:<16}{:>14}{:>14}{:>10}",
                e.map_or("-".into(), |v| format!("{v:.6}")),
                an.map_or("-".into(), |v| format!("{v:.6}")),
                zz.map_or("-".into(), |v| format!("{v:.2}"))
            );
        };
        for x in 0..n {
            for y in 0..n {
                let (sent, _) = summary.cell(x, y);
                line(format!("p0({x},{y})"), summary.p0(x, y), Some(analytic_p0[x][y]), sent);
            }
        }
        line("p_succ".into(), Some(summary.p_succ()), Some(sift.p_succ), summary.rounds);
        line("qber".into(), summary.qber(), sift.qber().ok(), summary.kept);
        if strategy != Strategy::Honest {
            line("eve_agreement".into(), summary.eve_agreement(), expected_agreement, summary.eve_guesses);
        }
        emit(None, &s)?;
    }
    if let Some(path) = out_path(settings, &p) {
        emit(Some(&path), &pretty(&doc))?;
    }
    Ok(())
}

fn theta_range(
    settings: &Settings,
    p: &Protocol,
    lo: Option<f64>,
    hi: Option<f64>,
    points: Option<usize>,
) -> Result<Vec<GramMatrix>, CliError> {
    let n: usize = settings.require(p.n, "protocol.n", "--n")?;
    let lo: f64 = settings.require(lo, "gram.theta_min", "--theta-min")?;
    let hi: f64 = settings.require(hi, "gram.theta_max", "--theta-max")?;
    let k = settings.get(points, "gram.points")?.unwrap_or(11);
    if !(lo <= hi) || k == 0 || (k == 1 && lo != hi) {
        return Err(config_err("theta range needs theta_min <= theta_max and at least one point"));
    }
    (0..k)
        .map(|i| {
            let t = if k == 1 { lo } else { lo + (hi - lo) * i as f64 / (k - 1) as f64 };
            Ok(gram_of_family(&qubit_states(n, t)?))
        })
        .collect()
}

pub fn gram(
    settings: &Settings,
    p: Protocol,
    mode: Option<String>,
    samples: Option<PathBuf>,
    theta_min: Option<f64>,
    theta_max: Option<f64>,
    points: Option<usize>,
) -> Result<(), CliError> {
    let mode = settings.get(mode, "gram.mode")?.unwrap_or_else(|| "exact".to_string());
    let samples_path = settings.path(samples, "gram.samples");
    let load_samples = |path: &Path| -> Result<Vec<NoiseSample>, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Ok(samples_from_json(&text)?)
    };
    let text = match mode.as_str() {
        "exact" => match GramSource::resolve(settings, &p)? {
            GramSource::File { spec, .. } => gram_spec_to_json(&spec),
            src => gram_to_json(&src.exact("exact mode")?),
        },
        "average" => {
            let samples = match &samples_path {
                Some(path) => load_samples(path)?,
                None => {
                    let grams = theta_range(settings, &p, theta_min, theta_max, points)?;
                    let w = 1.0 / grams.len() as f64;
                    grams.into_iter().map(|gram| NoiseSample { weight: w, gram }).collect()
                }
            };
            gram_to_json(&averaged_gram(&samples)?)
        }
        "envelope" => {
            let grams = match &samples_path {
                Some(path) => load_samples(path)?.into_iter().map(|s| s.gram).collect(),
                None => theta_range(settings, &p, theta_min, theta_max, points)?,
            };
            interval_to_json(&gram_envelope(&grams)?)
        }
        other => return Err(config_err(format!("unknown gram mode {other:?}, expected exact, average or envelope"))),
    };
    emit(out_path(settings, &p).as_deref(), &(text + "\n"))
}
