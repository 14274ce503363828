//! Intention points: route-sampled for the ego agent, clustered trajectory
//! endpoints for surrounding agents, plus positive-intention selection for
//! supervision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom;
use crate::scene::{Polyline, RouteSet, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntentionSource {
    RoutePrimary,
    RouteSecondary,
    Cluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentionPoint {
    pub x: f64,
    pub y: f64,
    pub source: IntentionSource,
    /// Padding slots repeat the last valid position with `valid = false`.
    pub valid: bool,
}

/// Exactly `n_q` intention slots per agent; row 0 is the ego.
#[derive(Debug, Clone)]
pub struct IntentionSet {
    pub n_q: usize,
    pub rows: Vec<Vec<IntentionPoint>>,
}

impl IntentionSet {
    pub fn mask_of(&self, agent: usize) -> Vec<bool> {
        self.rows[agent].iter().map(|p| p.valid).collect()
    }

    pub fn n_agents(&self) -> usize {
        self.rows.len()
    }
}

/// Walks a polyline and returns the points at arc lengths interval,
/// 2*interval, ... up to (and including) the total length. Polylines
/// shorter than one interval yield nothing.
pub fn resample_polyline(polyline: &Polyline, interval: f64) -> Vec<[f64; 2]> {
    assert!(interval > 0.0, "resample interval must be positive");
    let cum = geom::cumulative_lengths(&polyline.points);
    let total = *cum.last().unwrap();
    // tolerate accumulated rounding at the endpoint
    let count = ((total + 1e-9) / interval).floor() as usize;
    (1..=count)
        .map(|k| geom::point_at_arc_length(&polyline.points, &cum, (k as f64 * interval).min(total)))
        .collect()
}

/// Ego intention row: points resampled from every primary polyline (in
/// declaration order), then every secondary polyline; truncated to `n_q`
/// primary-first, padded with invalid repeats of the last valid point.
pub fn sample_route_intentions(routes: &RouteSet, d_r: f64, n_q: usize) -> Result<Vec<IntentionPoint>> {
    if routes.primary.is_empty() {
        return Err(Error::intention("empty primary route".to_string()));
    }
    let mut points = Vec::new();
    for (polys, source) in [
        (&routes.primary, IntentionSource::RoutePrimary),
        (&routes.secondary, IntentionSource::RouteSecondary),
    ] {
        for poly in polys.iter() {
            for p in resample_polyline(poly, d_r) {
                points.push(IntentionPoint { x: p[0], y: p[1], source, valid: true });
            }
        }
    }
    points.truncate(n_q);
    pad_to(&mut points, n_q, routes.primary[0].points[0]);
    Ok(points)
}

fn pad_to(points: &mut Vec<IntentionPoint>, n_q: usize, fallback: [f64; 2]) {
    let last = points
        .last()
        .map(|p| (p.x, p.y, p.source))
        .unwrap_or((fallback[0], fallback[1], IntentionSource::RoutePrimary));
    while points.len() < n_q {
        points.push(IntentionPoint { x: last.0, y: last.1, source: last.2, valid: false });
    }
}

/// Lloyd iterations with k-means++ seeding. Returns exactly `n_q` centers;
/// when fewer endpoints than centers exist, the endpoints become the valid
/// centers and the rest is invalid padding.
pub fn cluster_intentions(endpoints: &[[f64; 2]], n_q: usize, seed: u64) -> Vec<IntentionPoint> {
    let (centers, _) = kmeans_with_trace(endpoints, n_q, seed);
    centers
}

/// As `cluster_intentions`, additionally returning the clustering objective
/// (sum of squared distances) after each Lloyd iteration.
pub fn kmeans_with_trace(
    endpoints: &[[f64; 2]],
    n_q: usize,
    seed: u64,
) -> (Vec<IntentionPoint>, Vec<f64>) {
    assert!(!endpoints.is_empty(), "cluster_intentions requires endpoints");
    let k = n_q.min(endpoints.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeanspp_seed(endpoints, k, &mut rng);

    let mut assignment = vec![0usize; endpoints.len()];
    let mut trace = Vec::new();
    let mut prev_obj = f64::INFINITY;
    for _ in 0..50 {
        // assignment step, ties to the lowest center index
        let mut obj = 0.0;
        for (i, p) in endpoints.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(*p, *center);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assignment[i] = best.1;
            obj += best.0;
        }
        trace.push(obj);
        // update step; empty clusters keep their previous center
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in endpoints.iter().enumerate() {
            sums[assignment[i]][0] += p[0];
            sums[assignment[i]][1] += p[1];
            counts[assignment[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
        if prev_obj.is_finite() {
            let denom = prev_obj.abs().max(1e-12);
            if (prev_obj - obj) / denom < 1e-6 {
                break;
            }
        }
        prev_obj = obj;
    }

    let mut out: Vec<IntentionPoint> = centers
        .iter()
        .map(|c| IntentionPoint { x: c[0], y: c[1], source: IntentionSource::Cluster, valid: true })
        .collect();
    pad_to(&mut out, n_q, centers[0]);
    (out, trace)
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn kmeanspp_seed(points: &[[f64; 2]], k: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(*p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a center; pick deterministically
            points[centers.len() % points.len()]
        } else {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            points[pick]
        };
        centers.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(*p, next));
        }
    }
    centers
}

/// Index of the valid intention point nearest to the ground-truth endpoint;
/// ties break toward the lowest index.
pub fn select_positive_intention(intentions: &[IntentionPoint], gt_endpoint: [f64; 2]) -> Result<usize> {
    if !gt_endpoint[0].is_finite() || !gt_endpoint[1].is_finite() {
        return Err(Error::intention("gt endpoint not finite".to_string()));
    }
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in intentions.iter().enumerate() {
        if !p.valid {
            continue;
        }
        let d = dist2([p.x, p.y], gt_endpoint);
        if best.map(|(bd, _)| d < bd).unwrap_or(true) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i).ok_or_else(|| Error::intention("no valid intention slots".to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentionMode {
    /// Ego intentions sampled from the route; surrounding agents clustered.
    Route,
    /// Everyone uses the clustered anchors.
    Cluster,
}

/// Clustered endpoint anchors, expressed as displacements in each agent's
/// own frame at t0 (so one anchor set serves every agent).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClusterAnchors {
    pub centers: Vec<IntentionPoint>,
}

impl ClusterAnchors {
    /// Fits anchors to the agent-frame ground-truth endpoints of a dataset.
    /// Each endpoint is taken relative to the agent's last valid pose.
    pub fn fit(scenarios: &[Scenario], n_q: usize, seed: u64) -> Option<Self> {
        let mut endpoints = Vec::new();
        for s in scenarios {
            for hist in std::iter::once(&s.ego).chain(s.agents.iter()) {
                let Some(pose) = hist.last_valid() else { continue };
                let Some(end) = s.gt_endpoint(hist.id) else { continue };
                let tf = geom::RigidTransform::into_frame_of(pose.x, pose.y, pose.heading);
                endpoints.push(tf.apply(end));
            }
        }
        if endpoints.is_empty() {
            return None;
        }
        Some(ClusterAnchors { centers: cluster_intentions(&endpoints, n_q, seed) })
    }

    /// Places the anchors around an agent pose (position + heading).
    pub fn place(&self, x: f64, y: f64, heading: f64) -> Vec<IntentionPoint> {
        let tf = geom::RigidTransform::new(heading, x, y);
        self.centers
            .iter()
            .map(|c| {
                let p = tf.apply([c.x, c.y]);
                IntentionPoint { x: p[0], y: p[1], source: IntentionSource::Cluster, valid: c.valid }
            })
            .collect()
    }
}

/// Builds the per-agent intention rows for one (ego-frame) scenario. Agent
/// order matches the tensorized slots: `agent_ids[0]` is the ego.
pub fn build_intention_set(
    scenario: &Scenario,
    agent_ids: &[u64],
    agent_mask: &[bool],
    mode: IntentionMode,
    d_r: f64,
    n_q: usize,
    anchors: Option<&ClusterAnchors>,
) -> Result<IntentionSet> {
    let mut rows = Vec::with_capacity(agent_ids.len());
    for (slot, (&id, &used)) in agent_ids.iter().zip(agent_mask).enumerate() {
        if !used {
            rows.push(vec![
                IntentionPoint { x: 0.0, y: 0.0, source: IntentionSource::Cluster, valid: false };
                n_q
            ]);
            continue;
        }
        let ego_row = slot == 0 && mode == IntentionMode::Route;
        if ego_row {
            rows.push(sample_route_intentions(&scenario.routes, d_r, n_q)?);
        } else {
            let anchors = anchors.ok_or_else(|| {
                Error::intention("cluster anchors required for surrounding agents".to_string())
            })?;
            let hist = if slot == 0 {
                &scenario.ego
            } else {
                scenario
                    .agents
                    .iter()
                    .find(|a| a.id == id)
                    .ok_or_else(|| Error::intention(format!("agent {id} missing from scenario")))?
            };
            let pose = hist.last_valid().ok_or_else(|| {
                Error::intention(format!("agent {id} has no valid state for anchor placement"))
            })?;
            rows.push(anchors.place(pose.x, pose.y, pose.heading));
        }
    }
    Ok(IntentionSet { n_q, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::PolylineKind;
    use proptest::prelude::*;

    fn route_poly(id: u64, pts: &[[f64; 2]]) -> Polyline {
        Polyline { id, kind: PolylineKind::Route, points: pts.to_vec() }
    }

    #[test]
    fn resample_straight_line() {
        let p = route_poly(1, &[[0.0, 0.0], [20.0, 0.0]]);
        let pts = resample_polyline(&p, 4.0);
        let expect = [[4.0, 0.0], [8.0, 0.0], [12.0, 0.0], [16.0, 0.0], [20.0, 0.0]];
        assert_eq!(pts.len(), 5);
        for (a, b) in pts.iter().zip(expect.iter()) {
            assert!(geom::dist(*a, *b) < 1e-9);
        }
    }

    #[test]
    fn resample_hits_exact_endpoint() {
        // 3-4-5 triangle: total length exactly 5
        let p = route_poly(1, &[[0.0, 0.0], [3.0, 4.0]]);
        let pts = resample_polyline(&p, 5.0);
        assert_eq!(pts.len(), 1);
        assert!(geom::dist(pts[0], [3.0, 4.0]) < 1e-9);
    }

    #[test]
    fn resample_too_short_returns_empty() {
        let p = route_poly(1, &[[0.0, 0.0], [1.0, 0.0]]);
        assert!(resample_polyline(&p, 4.0).is_empty());
    }

    #[test]
    fn route_sampling_counts_and_order() {
        let routes = RouteSet {
            primary: vec![route_poly(1, &[[0.0, 0.0], [12.0, 0.0]])],
            secondary: vec![route_poly(2, &[[0.0, 0.0], [8.0 / 2f64.sqrt(), 8.0 / 2f64.sqrt()]])],
        };
        let row = sample_route_intentions(&routes, 4.0, 8).unwrap();
        assert_eq!(row.iter().filter(|p| p.valid).count(), 5);
        assert!(row[..3].iter().all(|p| p.source == IntentionSource::RoutePrimary));
        assert!(row[3..5].iter().all(|p| p.source == IntentionSource::RouteSecondary));
        assert!(row[5..].iter().all(|p| !p.valid));
        // padding repeats the last valid position
        assert_eq!((row[7].x, row[7].y), (row[4].x, row[4].y));
    }

    #[test]
    fn truncation_keeps_primary_first() {
        let routes = RouteSet {
            primary: vec![route_poly(1, &[[0.0, 0.0], [12.0, 0.0]])],
            secondary: vec![route_poly(2, &[[0.0, 0.0], [0.0, 40.0]])],
        };
        let row = sample_route_intentions(&routes, 4.0, 2).unwrap();
        assert!(row.iter().all(|p| p.source == IntentionSource::RoutePrimary));
        assert!(geom::dist([row[0].x, row[0].y], [4.0, 0.0]) < 1e-9);
        assert!(geom::dist([row[1].x, row[1].y], [8.0, 0.0]) < 1e-9);
    }

    #[test]
    fn long_primary_fills_all_slots() {
        // d_r = 4 with 64 slots needs 256 m of route
        let routes = RouteSet {
            primary: vec![route_poly(1, &[[0.0, 0.0], [256.0, 0.0]])],
            secondary: vec![],
        };
        let row = sample_route_intentions(&routes, 4.0, 64).unwrap();
        assert!(row.iter().all(|p| p.valid && p.source == IntentionSource::RoutePrimary));
        assert_eq!(row.len(), 64);
    }

    #[test]
    fn empty_primary_is_an_error() {
        let routes = RouteSet { primary: vec![], secondary: vec![] };
        assert!(sample_route_intentions(&routes, 4.0, 4).is_err());
    }

    #[test]
    fn clusters_separate_two_blobs() {
        let endpoints = vec![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [10.0, 10.0], [10.0, 10.0], [10.0, 10.0]];
        let centers = cluster_intentions(&endpoints, 2, 9);
        let mut found = [false, false];
        for c in &centers {
            assert!(c.valid);
            if geom::dist([c.x, c.y], [0.0, 0.0]) < 1e-9 {
                found[0] = true;
            }
            if geom::dist([c.x, c.y], [10.0, 10.0]) < 1e-9 {
                found[1] = true;
            }
        }
        assert!(found[0] && found[1]);
    }

    #[test]
    fn degenerate_single_endpoint_pads() {
        let centers = cluster_intentions(&[[2.0, 3.0]], 4, 1);
        assert!(centers[0].valid);
        assert!(centers[1..].iter().all(|c| !c.valid && c.x == 2.0 && c.y == 3.0));
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let endpoints: Vec<[f64; 2]> =
            (0..200).map(|_| [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)]).collect();
        let (_, trace) = kmeans_with_trace(&endpoints, 8, 7);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn kmeans_deterministic_for_fixed_seed() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let endpoints: Vec<[f64; 2]> =
            (0..50).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
        let a = cluster_intentions(&endpoints, 6, 123);
        let b = cluster_intentions(&endpoints, 6, 123);
        assert_eq!(a, b);
    }

    #[test]
    fn positive_selection_examples() {
        let mk = |x: f64, y: f64| IntentionPoint {
            x,
            y,
            source: IntentionSource::RoutePrimary,
            valid: true,
        };
        // (8,0) is 2.0 m from (10,0); (12,1) is sqrt(5)
        let row = vec![mk(8.0, 0.0), mk(12.0, 1.0)];
        assert_eq!(select_positive_intention(&row, [10.0, 0.0]).unwrap(), 0);
        // exact hit
        let row = vec![mk(0.0, 0.0), mk(1.0, 0.0), mk(2.0, 0.0), mk(3.0, 3.0)];
        assert_eq!(select_positive_intention(&row, [3.0, 3.0]).unwrap(), 3);
        // tie at indices 1 and 4 -> lowest index
        let row = vec![mk(9.0, 9.0), mk(1.0, 0.0), mk(9.0, 9.0), mk(9.0, 9.0), mk(-1.0, 0.0)];
        assert_eq!(select_positive_intention(&row, [0.0, 0.0]).unwrap(), 1);
        // invalid slots are ignored
        let mut row = vec![mk(0.0, 0.0), mk(5.0, 0.0)];
        row[0].valid = false;
        assert_eq!(select_positive_intention(&row, [0.0, 0.0]).unwrap(), 1);
        row[1].valid = false;
        assert!(select_positive_intention(&row, [0.0, 0.0]).is_err());
    }

    proptest! {
        /// Sampled points sit on the polyline and adjacent samples are one
        /// interval of arc length apart.
        #[test]
        fn sampled_points_on_polyline_with_exact_spacing(
            xs in proptest::collection::vec(-100.0f64..100.0, 2..10),
            interval in 0.5f64..10.0,
        ) {
            let points: Vec<[f64; 2]> = xs
                .iter()
                .enumerate()
                .map(|(i, &x)| [i as f64 * 3.0, x])
                .collect();
            let poly = route_poly(0, &points);
            let cum = geom::cumulative_lengths(&points);
            let samples = resample_polyline(&poly, interval);
            for (k, p) in samples.iter().enumerate() {
                let (s, l, _) = geom::project_to_polyline(&points, &cum, *p);
                prop_assert!(l.abs() < 1e-9);
                prop_assert!((s - (k as f64 + 1.0) * interval).abs() < 1e-6);
            }
        }

        /// Brute-force agreement for positive selection.
        #[test]
        fn positive_selection_matches_brute_force(
            coords in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40),
            endpoint in (-50.0f64..50.0, -50.0f64..50.0),
        ) {
            let row: Vec<IntentionPoint> = coords
                .iter()
                .map(|&(x, y)| IntentionPoint { x, y, source: IntentionSource::Cluster, valid: true })
                .collect();
            let got = select_positive_intention(&row, [endpoint.0, endpoint.1]).unwrap();
            let mut best = (f64::INFINITY, 0usize);
            for (i, p) in row.iter().enumerate() {
                let d = (p.x - endpoint.0).powi(2) + (p.y - endpoint.1).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            prop_assert_eq!(got, best.1);
        }
    }
}
