use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use clap::{Parser, Subcommand};
use dronenav_runtime::mapio::{describe, diff_maps, load_map};
use dronenav_runtime::runlog::{read_log, record_run, replay};
use dronenav_runtime::scenario::load_scenario;
use dronenav_runtime::script::{load_script, run_headless};
use dronenav_runtime::server::{serve, ServeOptions};
use dronenav_runtime::sim::Sim;

#[derive(Parser)]
#[command(name = "dronenav", version, about = "Indoor drone autonomy sandbox")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario, either headless with a script or serving the cockpit.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, requires = "script", conflicts_with = "serve")]
        headless: bool,
        #[arg(long)]
        script: Option<PathBuf>,
        /// Address for the cockpit WebSocket, e.g. 127.0.0.1:8787.
        #[arg(long)]
        serve: Option<String>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write a JSON-lines run log (headless only).
        #[arg(long, requires = "headless")]
        log: Option<PathBuf>,
        /// Print the metrics as JSON instead of a summary.
        #[arg(long)]
        json: bool,
    },
    /// Inspect or compare PGM+YAML maps.
    Map {
        #[command(subcommand)]
        action: MapCmd,
    },
    /// Re-run a recorded log and check that it reproduces.
    Replay { log: PathBuf },
    /// Print the frame tree after a short run of the scenario.
    Tf {
        #[arg(long)]
        scenario: PathBuf,
        /// Sim seconds to run before dumping.
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
    },
}

#[derive(Subcommand)]
enum MapCmd {
    Info { map: PathBuf },
    Diff { a: PathBuf, b: PathBuf },
}

fn load_sim(path: &Path, seed: Option<u64>) -> Result<Sim, String> {
    let mut scenario = load_scenario(path).map_err(|e| e.to_string())?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    Sim::new(scenario).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Cmd::Sim {
            scenario,
            headless,
            script,
            serve: bind,
            seed,
            log,
            json,
        } => {
            if headless {
                let script_path = script.expect("clap requires --script with --headless");
                let script = load_script(&script_path).map_err(|e| e.to_string())?;
                let mut sim = load_sim(&scenario, seed)?;
                let (report, timed_out) = match log {
                    Some(out) => {
                        let r = record_run(&sim.scenario, &script, &out).map_err(|e| e.to_string())?;
                        let t = r.timed_out;
                        (r, t)
                    }
                    None => match run_headless(&mut sim, &script) {
                        Ok(r) => (r, false),
                        Err(e) => (*e.report, true),
                    },
                };
                if json {
                    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                } else {
                    println!("sim time      {:.1} s ({} steps, {:.2} s wall)", report.sim_time, report.steps, report.wall_time);
                    println!("commands      {} ({} rejected)", report.commands, report.rejected);
                    if let Some(iou) = report.map_iou {
                        println!("map IoU       {iou:.3}");
                    }
                    if let Some(e) = report.slam_error {
                        println!("slam error    {:.3} m / {:.2} deg", e.xy, e.yaw_deg);
                    }
                    println!("odom error    {:.3} m / {:.2} deg", report.odometry_error.xy, report.odometry_error.yaw_deg);
                    println!("goals         {}/{} succeeded", report.goals_succeeded, report.goals.len());
                    println!("collisions    {}", report.collisions);
                    println!("status        {}", report.status);
                    println!("hash          {}", report.hash);
                }
                if timed_out {
                    return Err(format!("timed out after {:.1} s sim time", report.sim_time));
                }
                Ok(())
            } else {
                let bind = bind.unwrap_or_else(|| "127.0.0.1:8787".into());
                let sim = load_sim(&scenario, seed)?;
                let handle = serve(sim, &bind, ServeOptions::default()).map_err(|e| e.to_string())?;
                eprintln!("serving on ws://{}", handle.addr);
                let stop = handle.stop_flag();
                let sim = handle.wait();
                debug_assert!(stop.load(Ordering::SeqCst));
                eprintln!("stopped at t = {:.1} s", sim.now());
                Ok(())
            }
        }
        Cmd::Map { action } => match action {
            MapCmd::Info { map } => {
                let g = load_map(&map).map_err(|e| e.to_string())?;
                print!("{}", describe(&g));
                Ok(())
            }
            MapCmd::Diff { a, b } => {
                let ga = load_map(&a).map_err(|e| e.to_string())?;
                let gb = load_map(&b).map_err(|e| e.to_string())?;
                let d = diff_maps(&ga, &gb);
                println!("same geometry  {}", d.same_geometry);
                println!("changed cells  {}", d.changed);
                println!("unmatched      {}", d.unmatched);
                println!("occupied IoU   {:.4}", d.occupied_iou);
                Ok(())
            }
        },
        Cmd::Replay { log } => {
            let recorded = read_log(&log).map_err(|e| e.to_string())?;
            let r = replay(&recorded).map_err(|e| e.to_string())?;
            println!("recorded hash  {}", r.recorded_hash.as_deref().unwrap_or("<none>"));
            println!("replayed hash  {}", r.replayed.hash);
            if let Some(i) = r.first_divergence {
                println!("events diverge at index {i}");
            }
            if r.matches() {
                println!("replay matches");
                Ok(())
            } else {
                Err("replay does not reproduce the log".into())
            }
        }
        Cmd::Tf { scenario, seconds } => {
            let mut sim = load_sim(&scenario, None)?;
            let n = sim.clock.steps_for(seconds);
            sim.step_n(n);
            print!("{}", sim.tf.dump());
            Ok(())
        }
    }
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
