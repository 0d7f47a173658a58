use std::cmp::Reverse;
use std::collections::BinaryHeap;

use dronenav_core::geom::{angle_diff, Pose2D};
use dronenav_core::mapping::{GridGeometry, Occupancy, OccupancyGrid};
use dronenav_core::nav::{
    arc_pose, build_costmap, plan_global, plan_local, score_arcs, Costmap, CostmapParams, DwaParams,
    LocalPlanError, PathCost, PlanError, INSCRIBED, LETHAL,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(n: usize, res: f64, density: f64, seed: u64) -> OccupancyGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut occ = OccupancyGrid::filled(GridGeometry::new(res, n, n, Pose2D::origin()), Occupancy::Free);
    for c in occ.cells.iter_mut() {
        if rng.gen_bool(density) {
            *c = Occupancy::Occupied;
        }
    }
    occ
}

/// O(N²) nearest-occupied-cell cost.
fn brute_costs(occ: &OccupancyGrid, p: &CostmapParams) -> Vec<u8> {
    let g = &occ.geometry;
    let occupied: Vec<(i64, i64)> = (0..g.len())
        .filter(|i| occ.cells[*i] == Occupancy::Occupied)
        .map(|i| g.cell_from_index(i))
        .collect();
    (0..g.len())
        .map(|i| {
            let (x, y) = g.cell_from_index(i);
            let d2 = occupied
                .iter()
                .map(|(a, b)| (a - x).pow(2) + (b - y).pow(2))
                .min();
            let d = d2.map_or(f64::INFINITY, |d2| (d2 as f64).sqrt() * g.resolution);
            let cost = if d == 0.0 {
                254
            } else if d <= p.robot_radius + 1e-9 {
                253
            } else if d <= p.inflation_radius + 1e-9 {
                (252.0 * (-p.cost_decay * (d - p.robot_radius)).exp()).round() as u8
            } else {
                0
            };
            if occ.cells[i] == Occupancy::Unknown && !p.unknown_traversable {
                cost.max(253)
            } else {
                cost
            }
        })
        .collect()
}

#[test]
fn costmap_matches_brute_force() {
    let params = CostmapParams::default();
    for seed in 0..20 {
        let density = [0.002, 0.01, 0.05, 0.2][seed as usize % 4];
        let mut occ = random_grid(50, 0.05, density, seed);
        if seed % 5 == 0 {
            occ.set((3, 7), Occupancy::Unknown);
        }
        let cm = build_costmap(&occ, &params);
        assert_eq!(cm.cells, brute_costs(&occ, &params), "seed {seed}");
    }
}

#[test]
fn costmap_cost_is_monotone_in_distance() {
    let occ = random_grid(50, 0.05, 0.01, 99);
    let cm = build_costmap(&occ, &CostmapParams::default());
    let mut pairs: Vec<(f64, u8)> = cm.distance.iter().copied().zip(cm.cells.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(pairs.windows(2).all(|w| w[1].1 <= w[0].1));
}

fn test_params() -> CostmapParams {
    // a wide, soft gradient at unit resolution exercises the cost term
    CostmapParams {
        robot_radius: 0.0,
        inflation_radius: 3.0,
        cost_decay: 0.5,
        unknown_traversable: false,
    }
}

/// Plain Dijkstra with the same step costs.
fn dijkstra(cm: &Costmap, s: (i64, i64), g: (i64, i64)) -> Option<PathCost> {
    let geo = &cm.geometry;
    let mut dist = vec![None; geo.len()];
    let mut heap = BinaryHeap::new();
    let si = geo.index(s).unwrap();
    dist[si] = Some(PathCost::default());
    heap.push(Reverse((PathCost::default(), si)));
    while let Some(Reverse((d, i))) = heap.pop() {
        if dist[i] != Some(d) {
            continue;
        }
        let c = geo.cell_from_index(i);
        if c == g {
            return Some(d);
        }
        for di in -1..=1 {
            for dj in -1..=1 {
                if di == 0 && dj == 0 {
                    continue;
                }
                let Some(ni) = geo.index((c.0 + di, c.1 + dj)) else { continue };
                if cm.cells[ni] >= INSCRIBED {
                    continue;
                }
                let nd = d.step(di != 0 && dj != 0, cm.cells[ni]);
                if dist[ni].is_none_or(|o| nd < o) {
                    dist[ni] = Some(nd);
                    heap.push(Reverse((nd, ni)));
                }
            }
        }
    }
    None
}

fn center(cm: &Costmap, c: (i64, i64)) -> Pose2D {
    let (x, y) = cm.geometry.cell_center(c);
    Pose2D::new(x, y, 0.0)
}

#[test]
fn empty_grid_diagonal_is_nine_root_two() {
    let occ = OccupancyGrid::filled(GridGeometry::new(1.0, 10, 10, Pose2D::origin()), Occupancy::Free);
    let cm = build_costmap(&occ, &test_params());
    let path = plan_global(&cm, &center(&cm, (0, 0)), &center(&cm, (9, 9))).unwrap();
    assert_eq!(Some(path.cost), dijkstra(&cm, (0, 0), (9, 9)));
    assert!((path.cost.value() - 12.728).abs() < 1e-3);
}

#[test]
fn astar_equals_dijkstra_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut solved, mut unsolved) = (0, 0);
    for seed in 0..100 {
        let occ = random_grid(50, 1.0, 0.3, 10_000 + seed);
        let cm = build_costmap(&occ, &test_params());
        let free: Vec<usize> = (0..cm.cells.len()).filter(|i| cm.cells[*i] < INSCRIBED).collect();
        let s = cm.geometry.cell_from_index(free[rng.gen_range(0..free.len())]);
        let g = cm.geometry.cell_from_index(free[rng.gen_range(0..free.len())]);
        let oracle = dijkstra(&cm, s, g);
        match plan_global(&cm, &center(&cm, s), &center(&cm, g)) {
            Ok(path) => {
                solved += 1;
                assert_eq!(Some(path.cost), oracle, "grid {seed}");
                let mut total = PathCost::default();
                for w in path.cells.windows(2) {
                    let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                    assert!(di.abs() <= 1 && dj.abs() <= 1 && (di, dj) != (0, 0));
                    let cost = cm.get(w[1]).unwrap();
                    assert!(cost < INSCRIBED);
                    total = total.step(di != 0 && dj != 0, cost);
                }
                assert_eq!(total, path.cost);
                assert_eq!((path.cells[0], *path.cells.last().unwrap()), (s, g));
            }
            Err(PlanError::NoPath(_)) => {
                unsolved += 1;
                assert_eq!(oracle, None, "grid {seed}");
            }
            Err(e) => panic!("grid {seed}: {e}"),
        }
    }
    println!("{solved} solved, {unsolved} disconnected");
    assert!(solved >= 50);
}

#[test]
fn goal_inside_obstacle_is_rejected() {
    let mut occ = OccupancyGrid::filled(GridGeometry::new(1.0, 10, 10, Pose2D::origin()), Occupancy::Free);
    occ.set((5, 5), Occupancy::Occupied);
    let cm = build_costmap(&occ, &test_params());
    assert_eq!(
        plan_global(&cm, &center(&cm, (0, 0)), &center(&cm, (5, 5))),
        Err(PlanError::GoalInCollision(LETHAL))
    );
}

/// 4 m × 2 m corridor with walls along y = 0 and y = 2.
fn corridor() -> Costmap {
    let g = GridGeometry::new(0.05, 80, 41, Pose2D::origin());
    let mut occ = OccupancyGrid::filled(g, Occupancy::Free);
    for i in 0..80 {
        occ.set((i, 0), Occupancy::Occupied);
        occ.set((i, 40), Occupancy::Occupied);
    }
    build_costmap(&occ, &CostmapParams::default())
}

fn straight_path(from: (f64, f64), to: (f64, f64)) -> Vec<Pose2D> {
    let n = 40;
    let th = (to.1 - from.1).atan2(to.0 - from.0);
    (0..=n)
        .map(|k| {
            let t = k as f64 / n as f64;
            Pose2D::new(from.0 + t * (to.0 - from.0), from.1 + t * (to.1 - from.1), th)
        })
        .collect()
}

/// Exhaustive oracle: every window sample simulated at 1 ms, collision
/// checked on the costmap, best admissible score by the first-wins rule.
fn oracle_choice(cm: &Costmap, pose: &Pose2D, vel: (f64, f64), path: &[Pose2D], p: &DwaParams) -> Option<(f64, f64)> {
    let arcs = score_arcs(cm, pose, vel, path, p).unwrap();
    assert_eq!(arcs.len(), p.v_samples * p.omega_samples);
    let mut best: Option<(f64, f64, f64)> = None;
    for a in &arcs {
        let fine_hit = (1..=(p.sim_horizon * 1000.0) as usize).any(|k| {
            let q = arc_pose(pose, a.v, a.omega, k as f64 * 1e-3);
            cm.cost_at((q.x, q.y)) >= INSCRIBED
        });
        if let Some(s) = a.score {
            assert!(!fine_hit, "admissible arc ({}, {}) touches the inscribed zone", a.v, a.omega);
            if best.is_none_or(|b| s > b.0) {
                best = Some((s, a.v, a.omega));
            }
        }
    }
    best.map(|b| (b.1, b.2))
}

#[test]
fn corridor_at_rest_goes_straight() {
    let cm = corridor();
    let p = DwaParams::default();
    let pose = Pose2D::new(0.5, 1.025, 0.0);
    let path = straight_path((0.5, 1.025), (3.5, 1.025));
    let t = plan_local(&cm, &pose, (0.0, 0.0), &path, &p).unwrap();
    assert_eq!(oracle_choice(&cm, &pose, (0.0, 0.0), &path, &p), Some((t.linear.x, t.angular.z)));
    assert!(t.linear.x > 0.0);
    assert!(t.angular.z.abs() < 1e-12);
}

#[test]
fn wall_ahead_never_drives_into_it() {
    let g = GridGeometry::new(0.05, 80, 60, Pose2D::origin());
    let mut occ = OccupancyGrid::filled(g, Occupancy::Free);
    for j in 0..60 {
        occ.set((40, j), Occupancy::Occupied);
    }
    let cm = build_costmap(&occ, &CostmapParams::default());
    let p = DwaParams::default();
    let pose = Pose2D::new(1.2, 1.5, 0.0);
    let path = straight_path((1.2, 1.5), (3.5, 1.5));
    for vel in [(0.0, 0.0), (0.3, 0.0), (0.5, 0.0)] {
        let oracle = oracle_choice(&cm, &pose, vel, &path, &p);
        match plan_local(&cm, &pose, vel, &path, &p) {
            Ok(t) => {
                assert_eq!(oracle, Some((t.linear.x, t.angular.z)));
                let end = arc_pose(&pose, t.linear.x, t.angular.z, p.sim_horizon);
                assert!(cm.cost_at((end.x, end.y)) < INSCRIBED);
                assert!(t.angular.z != 0.0 || end.x < 2.0 - 0.3);
            }
            Err(LocalPlanError::Blocked) => assert_eq!(oracle, None),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn goal_behind_rotates_in_place() {
    let cm = corridor();
    let p = DwaParams::default();
    let pose = Pose2D::new(2.0, 1.025, 0.0);
    let path = straight_path((2.0, 1.025), (0.5, 1.025));
    let t = plan_local(&cm, &pose, (0.0, 0.0), &path, &p).unwrap();
    assert_eq!(oracle_choice(&cm, &pose, (0.0, 0.0), &path, &p), Some((t.linear.x, t.angular.z)));
    assert!(t.linear.x.abs() < 1e-12, "v = {}", t.linear.x);
    assert!(t.angular.z.abs() > 0.0);
}

fn cluttered(seed: u64) -> Costmap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = GridGeometry::new(0.05, 60, 60, Pose2D::origin());
    let mut occ = OccupancyGrid::filled(g, Occupancy::Free);
    for _ in 0..6 {
        let (i, j) = (rng.gen_range(0..60), rng.gen_range(0..60));
        for di in 0..rng.gen_range(1..8) {
            occ.set((i + di, j), Occupancy::Occupied);
        }
    }
    build_costmap(&occ, &CostmapParams::default())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dwa_is_planar_safe_and_deterministic(
        seed in 0u64..1000,
        x in 0.2f64..2.8, y in 0.2f64..2.8, th in -3.1f64..3.1,
        v in 0.0f64..0.5, w in -1.5f64..1.5,
        gx in 0.2f64..2.8, gy in 0.2f64..2.8,
    ) {
        let cm = cluttered(seed);
        prop_assume!(cm.cost_at((x, y)) < INSCRIBED);
        let pose = Pose2D::new(x, y, th);
        let path = straight_path((x, y), (gx, gy));
        let p = DwaParams::default();
        let a = plan_local(&cm, &pose, (v, w), &path, &p);
        prop_assert_eq!(&a, &plan_local(&cm, &pose, (v, w), &path, &p));
        if let Ok(t) = a {
            prop_assert_eq!([t.linear.y, t.linear.z, t.angular.x, t.angular.y], [0.0; 4]);
            prop_assert!(t.linear.x.abs() <= p.v_max && t.angular.z.abs() <= p.omega_max);
            for k in 1..=1500 {
                let q = arc_pose(&pose, t.linear.x, t.angular.z, k as f64 * 1e-3);
                prop_assert!(cm.cost_at((q.x, q.y)) < INSCRIBED);
            }
        }
    }

    #[test]
    fn global_paths_avoid_inscribed_cells(seed in 0u64..1000, s in 0usize..3600, g in 0usize..3600) {
        let cm = cluttered(seed);
        let (sc, gc) = (cm.geometry.cell_from_index(s), cm.geometry.cell_from_index(g));
        prop_assume!(cm.cells[s] < INSCRIBED && cm.cells[g] < INSCRIBED);
        let goal = Pose2D { theta: 0.7, ..center(&cm, gc) };
        if let Ok(path) = plan_global(&cm, &center(&cm, sc), &goal) {
            prop_assert!(path.waypoints.iter().all(|w| cm.cost_at((w.x, w.y)) < INSCRIBED));
            prop_assert!(path.cells.windows(2).all(|w| (w[1].0 - w[0].0).abs() <= 1 && (w[1].1 - w[0].1).abs() <= 1));
            prop_assert!(angle_diff(path.waypoints.last().unwrap().theta, 0.7).abs() < 1e-12);
            prop_assert_eq!(Some(path.cost), dijkstra(&cm, sc, gc));
        }
    }
}
