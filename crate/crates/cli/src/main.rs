use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gt_tsch::experiment::{
    builtin_profile, expand, run_all, summary_rows, Keep, Overrides, RunResult, ScenarioFile,
    BUILTIN_PROFILES, SUMMARY_HEADER,
};
use gt_tsch::lint::lint_dumps;
use gt_tsch::metrics::{rows_from_csv, rows_to_csv, MetricsRow, Stat};

#[derive(Parser)]
#[command(
    name = "tsch-arena",
    version,
    about = "GT-TSCH vs Orchestra simulation sweeps"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file or a built-in profile (traffic_sweep,
    /// dodag_size_sweep, slotframe_sweep).
    Run {
        scenario: String,
        /// Seeds per sweep point.
        #[arg(long)]
        seeds: Option<u32>,
        /// First seed; run i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "TSCH_ARENA_OUT", default_value = "results")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Simulated minutes per run.
        #[arg(long)]
        duration_min: Option<f64>,
        /// Write the event trace of every run.
        #[arg(long)]
        trace: bool,
        /// Write final frame and channel-plan dumps of every run.
        #[arg(long)]
        dump: bool,
    },
    /// Check a frame dump against a channel-plan dump.
    Lint { frames: PathBuf, plan: PathBuf },
    /// Summarise the runs.csv files under a results directory.
    Report { dir: PathBuf },
    /// List the built-in profiles.
    Profiles,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Run {
            scenario,
            seeds,
            seed,
            out,
            workers,
            duration_min,
            trace,
            dump,
        } => {
            let ov = Overrides {
                seeds,
                seed,
                duration_min,
            };
            cmd_run(&scenario, ov, &out, workers, Keep { trace, dumps: dump })?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Lint { frames, plan } => cmd_lint(&frames, &plan),
        Cmd::Report { dir } => {
            cmd_report(&dir)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Profiles => {
            for (name, _) in BUILTIN_PROFILES {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_scenario(arg: &str) -> Result<ScenarioFile> {
    let path = Path::new(arg);
    let text = if path.exists() {
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
    } else if let Some(t) = builtin_profile(arg) {
        t.to_string()
    } else {
        bail!("no scenario file or built-in profile named `{arg}`");
    };
    ScenarioFile::parse(&text).with_context(|| format!("in {arg}"))
}

fn run_stem(r: &RunResult) -> String {
    format!(
        "{}_{}_s{}",
        r.spec.scenario_id,
        r.spec.scheduler.name(),
        r.spec.params.seed
    )
}

fn cmd_run(
    scenario: &str,
    ov: Overrides,
    out: &Path,
    workers: Option<usize>,
    keep: Keep,
) -> Result<()> {
    let file = load_scenario(scenario)?;
    let specs = expand(&file, &ov)?;
    eprintln!("{}: {} runs", file.scenario.name, specs.len());
    let results = run_all(&specs, workers, keep)?;
    if let Some(bad) = results.iter().find(|r| !r.conserved) {
        bail!("packet conservation violated in {}", run_stem(bad));
    }

    let dir = out.join(&file.scenario.name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let rows: Vec<MetricsRow> = results.iter().map(|r| r.row.clone()).collect();
    fs::write(dir.join("runs.csv"), rows_to_csv(&rows))?;
    fs::write(
        dir.join("runs.json"),
        serde_json::to_string_pretty(&rows)? + "\n",
    )?;

    let summary = summary_rows(&results);
    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for s in &summary {
        csv.push_str(&s.to_csv());
        csv.push('\n');
    }
    fs::write(dir.join("summary.csv"), csv)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    for r in &results {
        if let Some(t) = &r.trace_csv {
            let d = dir.join("traces");
            fs::create_dir_all(&d)?;
            fs::write(d.join(format!("{}.csv", run_stem(r))), t)?;
        }
        if let Some((frames, plan)) = &r.dumps {
            let d = dir.join("dumps");
            fs::create_dir_all(&d)?;
            fs::write(d.join(format!("{}.frames", run_stem(r))), frames)?;
            fs::write(d.join(format!("{}.plan", run_stem(r))), plan)?;
        }
    }

    println!(
        "{:<24} {:<10} {:>6} {:>5} {:>4} {:>7} {:>9} {:>9} {:>7}",
        "point", "scheduler", "rate", "size", "len", "pdr", "delay_ms", "lost_ppm", "duty"
    );
    for s in &summary {
        let m = &s.summary;
        println!(
            "{:<24} {:<10} {:>6} {:>5} {:>4} {:>7.3} {:>9.1} {:>9.2} {:>7.3}",
            s.scenario_id,
            s.scheduler,
            s.rate_ppm,
            s.dodag_size,
            s.slotframe_len,
            m.pdr.mean,
            m.delay_ms.mean,
            m.lost_ppm.mean,
            m.duty_cycle.mean
        );
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn cmd_lint(frames: &Path, plan: &Path) -> Result<ExitCode> {
    let f = fs::read_to_string(frames).with_context(|| format!("reading {}", frames.display()))?;
    let p = fs::read_to_string(plan).with_context(|| format!("reading {}", plan.display()))?;
    let report = lint_dumps(&f, &p)?;
    if report.is_clean() {
        println!("ok: no violations");
        Ok(ExitCode::SUCCESS)
    } else {
        print!("{report}");
        Ok(ExitCode::from(1))
    }
}

fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    let direct = dir.join("runs.csv");
    if direct.is_file() {
        return Ok(vec![direct]);
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = entry?.path().join("runs.csv");
        if p.is_file() {
            found.push(p);
        }
    }
    found.sort();
    if found.is_empty() {
        bail!("no runs.csv under {}", dir.display());
    }
    Ok(found)
}

fn cmd_report(dir: &Path) -> Result<()> {
    println!(
        "{:<24} {:<10} {:>6} {:>5} {:>4} {:>4} {:>15} {:>17} {:>9} {:>7} {:>9}",
        "point",
        "scheduler",
        "rate",
        "size",
        "len",
        "runs",
        "pdr",
        "delay_ms",
        "lost_ppm",
        "duty",
        "received"
    );
    for path in find_runs(dir)? {
        let text = fs::read_to_string(&path)?;
        let rows = rows_from_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut groups: BTreeMap<(String, String), Vec<&MetricsRow>> = BTreeMap::new();
        let mut order = Vec::new();
        for r in &rows {
            let key = (r.scenario_id.clone(), r.scheduler.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        for key in order {
            let g = &groups[&key];
            let stat =
                |f: fn(&MetricsRow) -> f64| Stat::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (pdr, delay) = (stat(|r| r.pdr), stat(|r| r.delay_ms));
            println!(
                "{:<24} {:<10} {:>6} {:>5} {:>4} {:>4} {:>7.3} ± {:<5.3} {:>8.1} ± {:<6.1} {:>9.2} {:>7.3} {:>9.1}",
                key.0,
                key.1,
                g[0].rate_ppm,
                g[0].dodag_size,
                g[0].slotframe_len,
                g.len(),
                pdr.mean,
                pdr.std,
                delay.mean,
                delay.std,
                stat(|r| r.lost_ppm).mean,
                stat(|r| r.duty_cycle).mean,
                stat(|r| r.received as f64).mean
            );
        }
    }
    Ok(())
}
