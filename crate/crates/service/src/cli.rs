use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use bt_teach_core::executor::Outcome;
use bt_teach_core::fixtures::{Fixture, DEFAULT_SIGMA};
use bt_teach_core::workspace::Workspace;
use bt_teach_core::world::{disturbances_from_yaml, WorldState};
use clap::{Args, Parser, Subcommand};

use crate::ops::{self, RunRequest};

#[derive(Debug, Parser)]
#[command(name = "bt-teach", version, about = "Learn behavior trees from pick-and-place demonstrations")]
pub struct Cli {
    /// Workspace directory.
    #[arg(long, short = 'w', env = "BTTEACH_WORKSPACE", default_value = ".", global = true)]
    pub workspace: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Manage start scenes.
    #[command(subcommand)]
    Scene(SceneCmd),
    /// Record or generate demonstrations.
    #[command(subcommand)]
    Demo(DemoCmd),
    /// Learn a tree from demonstrations (all stored ones if none are given).
    Learn {
        demos: Vec<String>,
        /// Print the inference report.
        #[arg(long)]
        report: bool,
    },
    /// Execute a tree against a scene.
    Run(RunArgs),
    /// Write a tree in Graphviz DOT format.
    ExportDot {
        tree: String,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Start the HTTP/WebSocket service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Print a stored report or run record; lists them without a name.
    Report { name: Option<String> },
}

#[derive(Debug, Subcommand)]
pub enum SceneCmd {
    /// Create a scene from a YAML file or a fixture's random generator.
    New {
        id: String,
        #[arg(long, conflicts_with = "fixture")]
        from: Option<PathBuf>,
        #[arg(long, default_value = "object-in-box")]
        fixture: Fixture,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List stored scenes.
    List,
}

#[derive(Debug, Subcommand)]
pub enum DemoCmd {
    /// Record a demonstration from a script of `pick A`, `place A x y z`,
    /// `drop A x y z` lines.
    Record {
        script: PathBuf,
        /// Start scene: a scene id or `demo:<id>`.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value = "")]
        label: String,
    },
    /// Store a synthetic corpus.
    Synth {
        fixture: Fixture,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
    },
    /// List stored demonstrations.
    List,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub tree: String,
    /// A scene id or `demo:<id>`.
    pub scenario: String,
    /// YAML list of disturbances.
    #[arg(long)]
    pub disturbances: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    /// Perturb the start scene with this seed (incremented per repeat).
    #[arg(long)]
    pub seed: Option<u64>,
}

fn read(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Runs every command except `serve`, writing human-readable output.
pub fn execute(cli: &Cli, out: &mut impl Write) -> Result<()> {
    let ws = Workspace::open(&cli.workspace)?;
    match &cli.command {
        Command::Scene(SceneCmd::New { id, from, fixture, seed }) => {
            let world = match from {
                Some(p) => WorldState::from_yaml(&read(p)?)?,
                None => ops::fixture_scene(*fixture, *seed),
            };
            ws.save_scene(id, &world)?;
            writeln!(out, "scene {id}: {} objects", world.objects.len())?;
        }
        Command::Scene(SceneCmd::List) => {
            for s in ws.index()?.scenarios {
                writeln!(out, "{s}")?;
            }
        }
        Command::Demo(DemoCmd::Record { script, scene, id, label }) => {
            let world = ws.resolve_scenario(scene)?;
            let id = match id {
                Some(id) => id.clone(),
                None => script
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .context("cannot derive an id from the script name")?
                    .to_string(),
            };
            let demo = ops::record_script(&ws, &id, label, world, &read(script)?)?;
            writeln!(out, "demo {}: {} actions", demo.id, demo.actions.len())?;
        }
        Command::Demo(DemoCmd::Synth { fixture, seed, sigma }) => {
            for id in ops::synth(&ws, *fixture, *seed, *sigma)? {
                writeln!(out, "demo {id}")?;
            }
        }
        Command::Demo(DemoCmd::List) => {
            for id in ws.list_demos()? {
                let d = ws.load_demo(&id)?;
                writeln!(out, "{id}\t{} actions\t{}", d.actions.len(), d.label)?;
            }
        }
        Command::Learn { demos, report } => {
            let s = ops::learn(&ws, demos)?;
            writeln!(out, "tree {}", s.tree_id)?;
            writeln!(out, "nodes {}", s.node_count)?;
            if !s.sound {
                writeln!(out, "warning: the tree does not reach the goal from every demonstrated start scene")?;
            }
            if *report {
                let r = ws.load_report(&s.inference_report)?;
                writeln!(out, "{}", serde_json::to_string_pretty(&r)?)?;
            }
        }
        Command::Run(args) => {
            let disturbances = match &args.disturbances {
                Some(p) => disturbances_from_yaml(&read(p)?)?,
                None => Vec::new(),
            };
            let req = RunRequest {
                tree: args.tree.clone(),
                scenario: args.scenario.clone(),
                world: ws.resolve_scenario(&args.scenario)?,
                disturbances,
            };
            if args.repeat == 0 {
                bail!("--repeat must be at least 1");
            }
            let records = ops::run_repeated(&ws, &req, args.repeat, args.seed)?;
            for r in &records {
                let outcome = r.outcome.map_or("none".into(), |o| format!("{o:?}").to_lowercase());
                writeln!(out, "{} {outcome} ticks={} activations={}", r.id, r.events.len(), r.activations)?;
                for n in &r.notes {
                    writeln!(out, "  note: {n}")?;
                }
            }
            let ok = records.iter().filter(|r| r.outcome == Some(Outcome::Success)).count();
            writeln!(out, "success {ok}/{} ({:.0}%)", records.len(), 100.0 * ok as f64 / records.len() as f64)?;
        }
        Command::ExportDot { tree, output } => {
            let dot = ws.load_tree(tree)?.to_dot();
            match output {
                Some(p) => std::fs::write(p, dot).with_context(|| format!("writing {}", p.display()))?,
                None => write!(out, "{dot}")?,
            }
        }
        Command::Report { name: Some(name) } => {
            let value = match ws.load_run(name) {
                Ok(r) => serde_json::to_value(r)?,
                Err(_) => ws.load_report(name)?,
            };
            writeln!(out, "{}", serde_json::to_string_pretty(&value)?)?;
        }
        Command::Report { name: None } => {
            let idx = ws.index()?;
            for r in idx.reports.iter().chain(&idx.runs) {
                writeln!(out, "{r}")?;
            }
        }
        Command::Serve { .. } => bail!("serve is handled by the async entry point"),
    }
    Ok(())
}
