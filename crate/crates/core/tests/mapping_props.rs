use std::sync::OnceLock;

use dronenav_core::geom::{angle_diff, Pose2D};
use dronenav_core::mapping::{
    integrate_scan, match_scan_to_map, to_occupancy, GridGeometry, LogOddsGrid, MappingConfig,
    Occupancy,
};
use dronenav_core::sensing::{raycast_scan, LaserScan, LidarSpec};
use dronenav_core::world::{Rect, WorldModel};
use proptest::prelude::*;

/// Sample-world map built from truth poses on a 1 m lattice.
fn converged_map() -> &'static LogOddsGrid {
    static MAP: OnceLock<LogOddsGrid> = OnceLock::new();
    MAP.get_or_init(|| {
        let world = WorldModel::sample();
        let cfg = MappingConfig::default();
        let mut grid = LogOddsGrid::new(
            GridGeometry::centered(0.05, 12.0, Pose2D::new(5.0, 5.0, 0.0)),
            cfg.clamp,
        );
        let spec = LidarSpec::default();
        let mut seed = 0;
        for x in 1..10 {
            for y in 1..10 {
                let p = Pose2D::new(x as f64, y as f64, 0.3 * seed as f64);
                if world.clearance((p.x, p.y)) < 0.3 {
                    continue;
                }
                for _ in 0..3 {
                    seed += 1;
                    let scan = raycast_scan(&world, &p, &spec, seed).unwrap();
                    integrate_scan(&mut grid, &p, &scan, &cfg);
                }
            }
        }
        grid
    })
}

fn within_cell(a: &Pose2D, b: &Pose2D) -> bool {
    (a.x - b.x).abs() <= 0.05 + 1e-9
        && (a.y - b.y).abs() <= 0.05 + 1e-9
        && angle_diff(a.theta, b.theta).abs() <= 0.5f64.to_radians() + 1e-9
}

#[test]
fn match_at_truth_stays_at_truth() {
    let world = WorldModel::sample();
    let p = Pose2D::new(2.0, 7.3, 0.4);
    let scan = raycast_scan(&world, &p, &LidarSpec::default(), 77).unwrap();
    let m = match_scan_to_map(converged_map(), &scan, &p, [0.15, 0.15, 0.05], 0.3).unwrap();
    assert!(within_cell(&m.pose, &p), "{:?}", m.pose);
    assert!(m.score > 0.8);
}

#[test]
fn offset_initial_guess_is_recovered() {
    let world = WorldModel::sample();
    let truth = Pose2D::new(7.6, 2.4, -1.0);
    let scan = raycast_scan(&world, &truth, &LidarSpec::default(), 5).unwrap();
    let initial = Pose2D::new(truth.x + 0.12, truth.y - 0.09, truth.theta);
    let m = match_scan_to_map(converged_map(), &scan, &initial, [0.3, 0.3, 0.05], 0.3).unwrap();
    assert!(within_cell(&m.pose, &truth), "{:?}", m.pose);
}

#[test]
fn noise_free_convex_room_has_no_interior_occupancy() {
    let world = WorldModel::empty(Rect::new(-3.0, -2.0, 4.0, 2.5));
    let spec = LidarSpec {
        noise_sigma: 0.0,
        ..Default::default()
    };
    let cfg = MappingConfig::default();
    let mut grid = LogOddsGrid::new(GridGeometry::centered(0.05, 10.0, Pose2D::origin()), cfg.clamp);
    for (k, p) in [(0.0, 0.0), (1.0, 1.0), (-2.0, -1.0), (3.0, 0.5)].iter().enumerate() {
        let pose = Pose2D::new(p.0, p.1, 0.2 * k as f64);
        for _ in 0..5 {
            let scan = raycast_scan(&world, &pose, &spec, 0).unwrap();
            integrate_scan(&mut grid, &pose, &scan, &cfg);
        }
    }
    let occ = to_occupancy(&grid, cfg.occ_threshold, cfg.free_threshold);
    for (idx, c) in occ.cells.iter().enumerate() {
        if *c == Occupancy::Occupied {
            let p = occ.geometry.cell_center(occ.geometry.cell_from_index(idx));
            assert!(world.bounds.inner_clearance(p) <= 0.05 || !world.bounds.contains(p), "{p:?}");
        }
    }
}

fn random_scan(ranges: Vec<Option<f64>>) -> LaserScan {
    let spec = LidarSpec {
        num_beams: ranges.len(),
        angle_min: -std::f64::consts::PI,
        angle_max: std::f64::consts::PI - std::f64::consts::TAU / ranges.len() as f64,
        range_max: 4.0,
        ..Default::default()
    };
    LaserScan {
        stamp: 0.0,
        frame: "lidar_link".into(),
        ranges: ranges.into_iter().map(|r| r.unwrap_or(f64::INFINITY)).collect(),
        spec,
    }
}

fn scans() -> impl Strategy<Value = LaserScan> {
    prop::collection::vec(prop::option::weighted(0.8, 0.12f64..4.0), 8..48).prop_map(random_scan)
}

fn poses() -> impl Strategy<Value = Pose2D> {
    (-2.0f64..2.0, -2.0f64..2.0, -3.1f64..3.1).prop_map(|(x, y, t)| Pose2D::new(x, y, t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn log_odds_stay_clamped(seq in prop::collection::vec((poses(), scans()), 1..12)) {
        let cfg = MappingConfig::default();
        let mut grid = LogOddsGrid::new(GridGeometry::centered(0.05, 4.0, Pose2D::origin()), cfg.clamp);
        for (p, s) in &seq {
            integrate_scan(&mut grid, p, s, &cfg);
            prop_assert!(grid.cells.iter().all(|l| (-cfg.clamp..=cfg.clamp).contains(l)));
        }
    }

    #[test]
    fn identical_scans_change_cells_boundedly(pose in poses(), scan in scans(), n in 1usize..8) {
        let cfg = MappingConfig::default();
        let mut grid = LogOddsGrid::new(GridGeometry::centered(0.05, 12.0, Pose2D::origin()), cfg.clamp);
        for _ in 0..n {
            integrate_scan(&mut grid, &pose, &scan, &cfg);
        }
        let bound = (n as f64 * cfg.l_occ()).min(cfg.clamp) + 1e-12;
        prop_assert!(grid.cells.iter().all(|l| l.abs() <= bound));
    }

    #[test]
    fn match_stays_in_window(
        dx in 0.0f64..0.3, dy in 0.0f64..0.3, dt in 0.0f64..0.1,
        x in 1.0f64..9.0, y in 1.0f64..9.0, t in -3.0f64..3.0,
    ) {
        let world = WorldModel::sample();
        prop_assume!(world.clearance((x, y)) > 0.05);
        let p = Pose2D::new(x, y, t);
        let scan = raycast_scan(&world, &p, &LidarSpec::default(), 1).unwrap();
        let initial = Pose2D::new(x + 0.07, y - 0.04, t + 0.02);
        if let Ok(m) = match_scan_to_map(converged_map(), &scan, &initial, [dx, dy, dt], 0.0) {
            prop_assert!((m.pose.x - initial.x).abs() <= dx + 1e-9);
            prop_assert!((m.pose.y - initial.y).abs() <= dy + 1e-9);
            prop_assert!(angle_diff(m.pose.theta, initial.theta).abs() <= dt + 1e-9);
        }
    }
}
