use std::path::{Path, PathBuf};

use dronenav_runtime::protocol::Command;
use dronenav_runtime::runlog::{read_log, record_run, replay, LogRecord};
use dronenav_runtime::scenario::{load_scenario, parse_scenario, Mode, Scenario, ScenarioError};
use dronenav_runtime::script::{load_script, run_headless, Script, ScriptStep};
use dronenav_runtime::sim::Sim;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn sample_scenario_file_is_the_builtin_sample() {
    assert_eq!(load_scenario(&scenarios().join("sample.yaml")).unwrap(), Scenario::sample());
}

#[test]
fn navigate_scenario_resolves_its_map() {
    let s = load_scenario(&scenarios().join("navigate.yaml")).unwrap();
    assert_eq!(s.mode, Mode::Navigation);
    let map = s.map_path.clone().unwrap();
    assert!(map.starts_with(scenarios()), "{}", map.display());
    let sim = Sim::new(s).unwrap();
    assert!(sim.costmap().is_some());
}

#[test]
fn sample_scripts_parse() {
    let tour = load_script(&scenarios().join("mapping_tour.yaml")).unwrap();
    assert_eq!(tour.steps.iter().filter(|s| s.teleop_to.is_some()).count(), 4);
    assert!(matches!(tour.steps.last().unwrap().command, Some(Command::SaveMap { .. })));
    let goal = load_script(&scenarios().join("goal.yaml")).unwrap();
    assert!(goal.steps.iter().any(|s| s.wait_nav.is_some()));
}

#[test]
fn minimal_file_needs_only_a_world() {
    let s = parse_scenario("world:\n  bounds: {min: [0, 0], max: [4, 3]}\n").unwrap();
    let mut expect = Scenario::with_world(s.world.clone());
    expect.start = s.start;
    assert_eq!(s, expect);
    assert!(s.world.obstacles.is_empty());
}

#[test]
fn negative_mass_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.yaml");
    std::fs::write(
        &path,
        "world:\n  bounds: {min: [0, 0], max: [10, 10]}\nvehicle:\n  mass: -1.5\nlidar: {range_max: 0}\n",
    )
    .unwrap();
    let ScenarioError::Invalid(err) = load_scenario(&path).unwrap_err() else {
        panic!("expected a validation error");
    };
    let keys: Vec<&str> = err.problems.iter().map(|(k, _)| k.as_str()).collect();
    assert!(keys.contains(&"vehicle.mass"), "{err}");
    assert!(keys.iter().any(|k| k.starts_with("lidar")), "all problems are listed: {err}");
}

#[test]
fn navigation_requires_a_map_path() {
    let err = parse_scenario("world:\n  bounds: {min: [0, 0], max: [10, 10]}\nmode: NAVIGATION\n").unwrap_err();
    assert!(err.problems.iter().any(|(k, _)| k == "map_path"), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(
        load_scenario(Path::new("/nonexistent/scenario.yaml")),
        Err(ScenarioError::Io { .. })
    ));
}

#[test]
fn empty_script_reports_a_valid_structure() {
    let mut sim = Sim::new(Scenario::sample()).unwrap();
    let r = run_headless(&mut sim, &Script::default()).unwrap();
    assert_eq!((r.commands, r.rejected, r.steps), (0, 0, 0));
    assert!(r.goals.is_empty() && !r.timed_out);
    assert_eq!(r.hash, sim.hash());
    let json = serde_json::to_value(&r).unwrap();
    for key in ["map_iou", "localization_errors", "path_cost", "goals", "collisions", "wall_time"] {
        assert!(json.get(key).is_some(), "report lacks {key}");
    }
}

fn short_script() -> Script {
    Script {
        timeout: 30.0,
        steps: vec![
            ScriptStep {
                wait_airborne: Some(20.0),
                ..Default::default()
            },
            ScriptStep {
                command: Some(Command::teleop(0.3, 0.2)),
                wait: Some(2.0),
                ..Default::default()
            },
            ScriptStep::command(Command::teleop(0.0, 0.0)),
            ScriptStep::command(Command::SetGoal { x: 1.0, y: 1.0, theta: 0.0 }),
            ScriptStep::wait(0.5),
        ],
    }
}

#[test]
fn run_log_replays_to_the_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    let report = record_run(&Scenario::sample(), &short_script(), &path).unwrap();
    assert_eq!(report.rejected, 1, "set_goal is refused while mapping");
    let log = read_log(&path).unwrap();
    assert_eq!(log.report.as_ref().unwrap().hash, report.hash);
    assert_eq!(log.events.len(), 3);
    let r = replay(&log).unwrap();
    assert!(r.matches(), "{:?}", r.first_divergence);

    // a log from another seed no longer reproduces
    let mut tampered = log.clone();
    tampered.scenario.seed += 1;
    assert!(!replay(&tampered).unwrap().matches());
}

#[test]
fn run_log_lines_are_tagged_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    record_run(&Scenario::sample(), &Script::default(), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let kinds: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["record"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds, ["header", "summary"]);
    let first: LogRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(matches!(first, LogRecord::Header { version: 1, .. }));

    std::fs::write(&path, "{\"record\": \"event\"}\n").unwrap();
    let err = read_log(&path).unwrap_err().to_string();
    assert!(err.starts_with("line 1"), "{err}");
}
