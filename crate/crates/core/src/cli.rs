//! Command-line front end: `bounded-atlas <command> --config <file>`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::boundary::export_boundary_csv;
use crate::config::{load_config, validate_config, RunConfig};
use crate::error::{Error, Result};
use crate::library::{
    decompose, expand_control_region, learn_trio_with_samples, load_library, plan_trajectory, save_library,
    SolutionLibrary, SolutionRecord, TrioConfig,
};
use crate::oracle::{grid_audit, mc_audit, AuditReport};
use crate::plant::{EvalCounter, Plant};
use crate::runtime::{simulate, simulate_trajectory, Fallback};
use crate::spaces::derive_seed;

#[derive(Debug, Parser)]
#[command(name = "bounded-atlas", version, about = "Learn and run bounded-input/bounded-output control libraries")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn one trio at the first origin and write a one-record library.
    Learn(RunArgs),
    /// Grow the control regions of every record in an existing library.
    Expand(RunArgs),
    /// Learn one record per origin.
    Decompose(RunArgs),
    /// Plan and run a state-feedback trajectory through the waypoint boxes.
    Trajectory(RunArgs),
    /// Replay the configured inputs against an existing library.
    Simulate(RunArgs),
    /// Audit every record of an existing library against the plant.
    Audit(RunArgs),
    /// Write radius grids and fit traces for an existing library.
    Export(RunArgs),
    /// List every problem with a config file.
    Validate(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for all written artifacts.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, env = "BOUNDED_ATLAS_WORKERS")]
    pub workers: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::Learn(a)
            | Command::Expand(a)
            | Command::Decompose(a)
            | Command::Trajectory(a)
            | Command::Simulate(a)
            | Command::Audit(a)
            | Command::Export(a)
            | Command::Validate(a) => a,
        }
    }
}

struct Session {
    cfg: RunConfig,
    plant: Box<dyn Plant>,
    out: PathBuf,
}

impl Session {
    fn open(args: &RunArgs) -> Result<Self> {
        let cfg = load_config(&args.config, args.seed)?;
        if let Some(n) = args.workers.or(cfg.workers) {
            crate::parallel::configure_workers(n);
        }
        std::fs::create_dir_all(&args.out)?;
        Ok(Self {
            plant: cfg.plant.build()?,
            cfg,
            out: args.out.clone(),
        })
    }

    fn counter(&self) -> EvalCounter<'static> {
        self.cfg.budget.map_or_else(EvalCounter::unlimited, EvalCounter::new)
    }

    fn library_path(&self) -> PathBuf {
        self.out.join(&self.cfg.outputs.library)
    }

    fn input_library(&self) -> Result<SolutionLibrary> {
        let path = self.cfg.library.clone().unwrap_or_else(|| self.library_path());
        let lib = load_library(&path)?;
        if lib.plant_id != self.plant.id() {
            return Err(Error::InvalidArgument(format!(
                "library was built for plant {}, config describes {}",
                lib.plant_id,
                self.plant.id()
            )));
        }
        Ok(lib)
    }

    fn require_origins(&self) -> Result<()> {
        if self.cfg.origins.is_empty() {
            return Err(Error::ConfigInvalid(vec!["origins: empty (this command needs at least one)".into()]));
        }
        Ok(())
    }

    fn save(&self, lib: &SolutionLibrary, w: &mut dyn Write) -> Result<()> {
        let path = self.library_path();
        save_library(lib, &path)?;
        writeln!(w, "library={}", path.display())?;
        Ok(())
    }
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(","))
}

fn record_summary(r: &SolutionRecord, w: &mut dyn Write) -> Result<()> {
    let rms: Vec<f64> = r.surfaces.iter().map(|s| s.rms_residual).collect();
    let evals: u64 = r.provenance.eval_counts.iter().map(|e| e.best_control + e.surface).sum();
    writeln!(
        w,
        "record={} surfaces={} vertices={} control={} rms_residual={} evals={} stabilized={}",
        r.id,
        r.surfaces.len(),
        r.control_region.vertices.len(),
        fmt_vec(&r.control_region.centroid),
        fmt_vec(&rms),
        evals,
        r.provenance.fit_traces.iter().all(|t| t.stabilized),
    )?;
    if let Some(v) = &r.provenance.validation {
        writeln!(
            w,
            "record={} vertex_pass_rate={:.6} combo_pass_rate={} validation_samples={}",
            r.id,
            v.vertex_pass_rate,
            v.combo_pass_rate.map_or("none".into(), |c| format!("{c:.6}")),
            v.samples_used
        )?;
    }
    for f in &r.provenance.hypothesis_flags {
        writeln!(w, "record={} warning={f}", r.id)?;
    }
    Ok(())
}

fn learn(s: &Session, w: &mut dyn Write) -> Result<()> {
    s.require_origins()?;
    let counter = s.counter();
    let (mut rec, samples) = learn_trio_with_samples(
        s.plant.as_ref(),
        &counter,
        &s.cfg.origins[0],
        &s.cfg.boxes[0],
        &s.cfg.trio(),
    )?;
    rec.id = "rec-0000".into();
    let lib = SolutionLibrary::new(s.plant.id(), vec![rec])?;
    let rec = &lib.records[0];
    export_boundary_csv(
        &samples,
        &rec.surfaces[0],
        Some(&s.out.join(format!("boundary_samples_{}.csv", rec.id))),
        &s.out.join(format!("boundary_grid_{}_s0.csv", rec.id)),
        s.cfg.outputs.export_grid_points,
    )?;
    writeln!(w, "command=learn records=1 evals={}", counter.count())?;
    record_summary(rec, w)?;
    s.save(&lib, w)
}

fn expand(s: &Session, w: &mut dyn Write) -> Result<()> {
    let lib = s.input_library()?;
    let counter = s.counter();
    let ecfg = s.cfg.expansion();
    let mut records = Vec::with_capacity(lib.records.len());
    for (i, r) in lib.records.iter().enumerate() {
        let trio = TrioConfig {
            seed: derive_seed(s.cfg.seed(), i as u64),
            ..s.cfg.trio()
        };
        let e = crate::library::ExpansionConfig {
            seed: derive_seed(ecfg.seed, i as u64),
            ..ecfg.clone()
        };
        records.push(expand_control_region(s.plant.as_ref(), &counter, r, &trio, &e)?);
    }
    let lib = SolutionLibrary::new(lib.plant_id, records)?;
    writeln!(w, "command=expand records={} evals={}", lib.records.len(), counter.count())?;
    for r in &lib.records {
        record_summary(r, w)?;
    }
    s.save(&lib, w)
}

fn decompose_cmd(s: &Session, w: &mut dyn Write) -> Result<()> {
    s.require_origins()?;
    let counter = s.counter();
    let expansion = s.cfg.expansion.as_ref().map(|_| s.cfg.expansion());
    let d = decompose(
        s.plant.as_ref(),
        &counter,
        &s.cfg.origins,
        &s.cfg.boxes,
        &s.cfg.trio(),
        expansion.as_ref(),
    )?;
    writeln!(
        w,
        "command=decompose records={} skipped={} evals={}",
        d.library.records.len(),
        d.skipped.len(),
        counter.count()
    )?;
    for k in &d.skipped {
        writeln!(w, "skipped origin={} at={} reason={}", k.index, fmt_vec(&k.origin), k.error)?;
    }
    for r in &d.library.records {
        record_summary(r, w)?;
    }
    s.save(&d.library, w)
}

fn trajectory(s: &Session, w: &mut dyn Write) -> Result<()> {
    let t = s
        .cfg
        .trajectory
        .as_ref()
        .ok_or_else(|| Error::ConfigInvalid(vec!["trajectory: missing section".into()]))?;
    let counter = s.counter();
    let trio = s.cfg.trio();
    let plan = match plan_trajectory(s.plant.as_ref(), &counter, &t.start_state, &t.waypoints, &trio) {
        Ok(p) => p,
        Err(abort) => {
            writeln!(w, "command=trajectory planned={} aborted=true", abort.partial.waypoints.len())?;
            return Err(abort.error);
        }
    };
    let policy = s.cfg.simulate.as_ref().map(|x| x.policy).unwrap_or_default();
    let trace = simulate_trajectory(s.plant.as_ref(), &counter, &plan, policy, &trio)?;
    let trace_path = s.out.join(&s.cfg.outputs.trace);
    trace.write_csv(&trace_path)?;
    writeln!(
        w,
        "command=trajectory waypoints={} in_box_rate={:.6} replans={} evals={}",
        plan.waypoints.len(),
        trace.in_box_rate(),
        trace.replans.len(),
        counter.count()
    )?;
    for (k, st) in trace.steps.iter().enumerate() {
        writeln!(
            w,
            "step={k} state={} control={} output={} in_box={}",
            fmt_vec(&st.input),
            fmt_vec(&st.dispatch.chosen_control),
            fmt_vec(&st.output),
            st.in_box
        )?;
    }
    writeln!(w, "trace={}", trace_path.display())?;
    s.save(&plan.to_library(&s.plant.id())?, w)
}

fn simulate_cmd(s: &Session, w: &mut dyn Write) -> Result<()> {
    let sim = s
        .cfg
        .simulate
        .as_ref()
        .ok_or_else(|| Error::ConfigInvalid(vec!["simulate: missing section".into()]))?;
    let lib = s.input_library()?;
    let counter = s.counter();
    let trace = simulate(s.plant.as_ref(), &counter, &lib, &sim.inputs, sim.policy, sim.fallback)?;
    let path = s.out.join(&s.cfg.outputs.trace);
    trace.write_csv(&path)?;
    let fallbacks = trace.steps.iter().filter(|x| x.dispatch.fallback_used).count();
    writeln!(
        w,
        "command=simulate steps={} in_box_rate={:.6} fallbacks={} gap={} evals={}",
        trace.steps.len(),
        trace.in_box_rate(),
        fallbacks,
        trace.gap.as_ref().map_or("none".into(), |g| g.step.to_string()),
        counter.count()
    )?;
    if sim.fallback == Fallback::NearestRegion && fallbacks > 0 {
        writeln!(w, "warning=fallback steps carry no containment guarantee")?;
    }
    writeln!(w, "trace={}", path.display())?;
    Ok(())
}

fn audit(s: &Session, w: &mut dyn Write) -> Result<()> {
    let lib = s.input_library()?;
    let counter = s.counter();
    let mut csv = format!("record_id,method,{}\n", AuditReport::csv_header());
    for (i, r) in lib.records.iter().enumerate() {
        let mut reports = vec![(
            "mc",
            mc_audit(
                s.plant.as_ref(),
                &counter,
                r,
                s.cfg.audit.mc_samples,
                derive_seed(s.cfg.seed(), 0xA0D1 + i as u64),
            )?,
        )];
        if let Some(g) = s.cfg.audit.grid_points {
            if r.input_dim() <= 3 {
                reports.push(("grid", grid_audit(s.plant.as_ref(), &counter, r, g)?));
            }
        }
        for (method, rep) in reports {
            writeln!(w, "record={} method={method}", r.id)?;
            write!(w, "{}", rep.to_kv())?;
            csv.push_str(&format!("{},{method},{}\n", r.id, rep.to_csv_row()));
        }
    }
    let path = s.out.join(&s.cfg.outputs.audit);
    std::fs::write(&path, csv)?;
    writeln!(w, "command=audit records={} evals={}", lib.records.len(), counter.count())?;
    writeln!(w, "audit={}", path.display())?;
    Ok(())
}

fn export(s: &Session, w: &mut dyn Write) -> Result<()> {
    let lib = s.input_library()?;
    let mut grids = 0;
    for r in &lib.records {
        for (k, surface) in r.surfaces.iter().enumerate() {
            let path = s.out.join(format!("boundary_grid_{}_s{k}.csv", r.id));
            if export_boundary_csv(&[], surface, None, &path, s.cfg.outputs.export_grid_points)? {
                grids += 1;
            }
        }
        let mut text = String::from("surface,batch,sample_count,rms_residual,stabilized,budget_exhausted\n");
        for (k, t) in r.provenance.fit_traces.iter().enumerate() {
            for (b, p) in t.history.iter().enumerate() {
                text.push_str(&format!(
                    "{k},{b},{},{},{},{}\n",
                    p.sample_count,
                    crate::boundary::fmt17(p.rms_residual),
                    t.stabilized,
                    t.budget_exhausted
                ));
            }
        }
        std::fs::write(s.out.join(format!("fit_trace_{}.csv", r.id)), text)?;
    }
    writeln!(w, "command=export records={} grids={grids}", lib.records.len())?;
    Ok(())
}

fn validate(args: &RunArgs, w: &mut dyn Write) -> Result<()> {
    let mut diags = validate_config(&args.config)?;
    if args.seed.is_some() {
        diags.retain(|d| !d.starts_with("seed:"));
    }
    if diags.is_empty() {
        writeln!(w, "config ok")?;
        Ok(())
    } else {
        Err(Error::ConfigInvalid(diags))
    }
}

/// Runs one command, writing the human summary to `w`.
pub fn execute(cli: &Cli, w: &mut dyn Write) -> Result<()> {
    if let Command::Validate(a) = &cli.command {
        return validate(a, w);
    }
    let s = Session::open(cli.command.args())?;
    match &cli.command {
        Command::Learn(_) => learn(&s, w),
        Command::Expand(_) => expand(&s, w),
        Command::Decompose(_) => decompose_cmd(&s, w),
        Command::Trajectory(_) => trajectory(&s, w),
        Command::Simulate(_) => simulate_cmd(&s, w),
        Command::Audit(_) => audit(&s, w),
        Command::Export(_) => export(&s, w),
        Command::Validate(_) => unreachable!(),
    }
}

/// The machine-readable failure line.
pub fn error_line(e: &Error) -> String {
    format!("error: module={} kind={} message={}", e.module(), e.kind(), e.to_string().replace('\n', " "))
}

/// Parses `args`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            if let Error::ConfigInvalid(diags) = &e {
                for d in diags {
                    eprintln!("diagnostic: {d}");
                }
            }
            eprintln!("{}", error_line(&e));
            if e.module() == "cli" {
                2
            } else {
                1
            }
        }
    }
}
