//! `gridhier` command-line front end.
//!
//! Every subcommand starts from `defaults.json`, merges `--config` over it,
//! then applies flags, and records the result as `run_config.json` in `--out`.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gridhier::commands;
use gridhier::config::RunConfig;

#[derive(Parser)]
#[command(name = "gridhier", version, about = "Learn object and template shape models from occupancy-grid maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic scenario and write its maps.
    Generate(Opts),
    /// Extract object snapshots from a directory of maps.
    Segment(Opts),
    /// Fit one model to a snapshot dataset.
    Learn(Opts),
    /// Search over the number of objects and templates.
    Select(Opts),
    /// Leave-one-epoch-out comparison of hierarchical and flat models.
    Eval(Opts),
    /// Render a model (and optional map overlays) to PNG.
    Export(Opts),
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// JSON file merged over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input directory: maps, dataset, or model depending on the subcommand.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Dataset directory for export overlays.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Map directory for export overlays.
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Scenario preset: study-room, robotics-lab, or shared-shapes.
    #[arg(long)]
    preset: Option<String>,
    #[arg(short = 'N')]
    n: Option<usize>,
    #[arg(short = 'M')]
    m: Option<usize>,
    /// Fit the flat baseline (objects only).
    #[arg(long)]
    flat: bool,
    #[arg(long)]
    penalty_n: Option<f64>,
    #[arg(long)]
    penalty_m: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_n: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    rho0: Option<f64>,
    #[arg(long)]
    pose_radius: Option<u32>,
    /// Rotation step in radians.
    #[arg(long)]
    rot_step: Option<f64>,
    #[arg(long)]
    occ_thresh: Option<f64>,
    #[arg(long)]
    free_thresh: Option<f64>,
    #[arg(long)]
    min_neighbors: Option<u8>,
    #[arg(long)]
    min_area: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl Opts {
    fn resolve(self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::defaults(),
        };
        set(&mut c.seed, self.seed);
        set(&mut c.out, self.out);
        set(&mut c.preset, self.preset);
        c.input = self.input.or(c.input);
        c.dataset = self.dataset.or(c.dataset);
        c.maps = self.maps.or(c.maps);
        c.n = self.n.or(c.n);
        c.m = self.m.or(c.m);
        c.flat |= self.flat;
        set(&mut c.selection.penalty_n, self.penalty_n);
        set(&mut c.selection.penalty_m, self.penalty_m);
        set(&mut c.selection.restarts, self.restarts);
        c.selection.max_n = self.max_n.or(c.selection.max_n);
        set(&mut c.em.max_iters, self.max_iters);
        set(&mut c.em.gamma, self.gamma);
        set(&mut c.em.sigma, self.sigma);
        set(&mut c.em.rho, self.rho);
        set(&mut c.em.sigma0, self.sigma0);
        set(&mut c.em.rho0, self.rho0);
        set(&mut c.em.pose_grid.radius, self.pose_radius);
        set(&mut c.em.pose_grid.rot_step, self.rot_step);
        set(&mut c.segmentation.occ_thresh, self.occ_thresh);
        set(&mut c.segmentation.free_thresh, self.free_thresh);
        set(&mut c.segmentation.min_neighbors, self.min_neighbors);
        set(&mut c.segmentation.min_area, self.min_area);
        c.validate()?;
        Ok(c)
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("GRIDHIER_THREADS") {
        let n: usize = v.parse().with_context(|| format!("GRIDHIER_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Generate(o) => commands::cmd_generate(&o.resolve()?)?,
        Command::Segment(o) => {
            let data = commands::cmd_segment(&o.resolve()?)?;
            println!("segmented {} snapshots, counts {:?}", data.total_snapshots(), data.counts());
        }
        Command::Learn(o) => {
            let run = commands::cmd_learn(&o.resolve()?)?;
            if let Some(r) = run.trace.last() {
                println!(
                    "{} iterations, objective {:.4}, penalized {:.4}",
                    run.trace.iterations(),
                    r.objective,
                    r.penalized_objective
                );
            }
        }
        Command::Select(o) => {
            let (n, m) = commands::cmd_select(&o.resolve()?)?;
            println!("best N = {n}, M = {m}");
        }
        Command::Eval(o) => commands::cmd_eval(&o.resolve()?)?,
        Command::Export(o) => commands::cmd_export(&o.resolve()?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
