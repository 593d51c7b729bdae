//! Tumor morphology measurements: ring quotient, surface quotient, total
//! densities and the smallest circle enclosing the tumor region.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::mesh::{NodalField, Point, TriMesh};

/// A node belongs to the tumor region when `T + N` reaches this value.
pub const TUMOR_THRESHOLD: f64 = 1e-3;

/// Relative slack of the point-in-circle test.
const CONTAINS_EPS: f64 = 1e-12;

/// Seed of the shuffle inside [`min_enclosing_circle`]; fixed so that metric
/// output is reproducible.
const SHUFFLE_SEED: u64 = 0x5EC_C1C1E;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub center: Point,
    pub radius: f64,
}

impl Circle {
    fn contains(&self, p: Point) -> bool {
        dist(self.center, p) <= self.radius * (1.0 + CONTAINS_EPS) + CONTAINS_EPS
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn diameter_circle(a: Point, b: Point) -> Circle {
    let center = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
    Circle {
        center,
        radius: dist(center, a).max(dist(center, b)),
    }
}

/// Circle through three points; `None` when they are collinear.
fn circumcircle(a: Point, b: Point, c: Point) -> Option<Circle> {
    // translate to the bounding-box center for conditioning
    let ox = (a[0].min(b[0]).min(c[0]) + a[0].max(b[0]).max(c[0])) / 2.0;
    let oy = (a[1].min(b[1]).min(c[1]) + a[1].max(b[1]).max(c[1])) / 2.0;
    let (ax, ay) = (a[0] - ox, a[1] - oy);
    let (bx, by) = (b[0] - ox, b[1] - oy);
    let (cx, cy) = (c[0] - ox, c[1] - oy);
    let d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by));
    if d == 0.0 {
        return None;
    }
    let (a2, b2, c2) = (ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy);
    let x = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d;
    let y = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d;
    let center = [ox + x, oy + y];
    let radius = dist(center, a).max(dist(center, b)).max(dist(center, c));
    Some(Circle { center, radius })
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Smallest circle containing `points`, or `None` for an empty set.
///
/// Randomized incremental construction in expected linear time. The input is
/// shuffled with a fixed-seed generator so the result does not depend on the
/// caller's ordering beyond round-off.
pub fn min_enclosing_circle(points: &[Point]) -> Option<Circle> {
    if points.is_empty() {
        return None;
    }
    let mut pts = points.to_vec();
    let mut rng = SplitMix64::seed_from_u64(SHUFFLE_SEED);
    for i in (1..pts.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        pts.swap(i, j);
    }

    let mut c = Circle {
        center: pts[0],
        radius: 0.0,
    };
    for i in 1..pts.len() {
        if !c.contains(pts[i]) {
            c = circle_with_one(&pts[..i], pts[i]);
        }
    }
    Some(c)
}

// `p` lies on the boundary.
fn circle_with_one(pts: &[Point], p: Point) -> Circle {
    let mut c = Circle {
        center: p,
        radius: 0.0,
    };
    for (i, &q) in pts.iter().enumerate() {
        if !c.contains(q) {
            c = if c.radius == 0.0 {
                diameter_circle(p, q)
            } else {
                circle_with_two(&pts[..i], p, q)
            };
        }
    }
    c
}

// `p` and `q` lie on the boundary.
fn circle_with_two(pts: &[Point], p: Point, q: Point) -> Circle {
    let base = diameter_circle(p, q);
    let mut left: Option<Circle> = None;
    let mut right: Option<Circle> = None;
    for &r in pts {
        if base.contains(r) {
            continue;
        }
        let side = cross(p, q, r);
        let Some(c) = circumcircle(p, q, r) else {
            continue;
        };
        let offset = cross(p, q, c.center);
        if side > 0.0 {
            if left.is_none_or(|l| offset > cross(p, q, l.center)) {
                left = Some(c);
            }
        } else if side < 0.0 && right.is_none_or(|rc| offset < cross(p, q, rc.center)) {
            right = Some(c);
        }
    }
    match (left, right) {
        (None, None) => base,
        (Some(l), None) => l,
        (None, Some(r)) => r,
        (Some(l), Some(r)) => {
            if l.radius <= r.radius {
                l
            } else {
                r
            }
        }
    }
}

fn lumped_integral(mesh: &TriMesh, f: impl Fn(usize) -> f64) -> f64 {
    mesh.lumped_masses()
        .iter()
        .enumerate()
        .map(|(a, m)| m * f(a))
        .sum()
}

/// `int T / int (T + N)`; 1 when there is no tumor at all.
pub fn ring_quotient(t_field: &[f64], n_field: &[f64], mesh: &TriMesh) -> f64 {
    let int_t = lumped_integral(mesh, |a| t_field[a]);
    let int_total = lumped_integral(mesh, |a| t_field[a] + n_field[a]);
    if int_total > 0.0 {
        int_t / int_total
    } else {
        1.0
    }
}

/// Lumped integral of `T + N`.
pub fn total_density(t_field: &[f64], n_field: &[f64], mesh: &TriMesh) -> f64 {
    lumped_integral(mesh, |a| t_field[a] + n_field[a])
}

/// 1 where `T + N >= TUMOR_THRESHOLD`, else 0.
pub fn tumor_indicator(t_field: &[f64], n_field: &[f64]) -> NodalField {
    t_field
        .iter()
        .zip(n_field)
        .map(|(t, n)| if t + n >= TUMOR_THRESHOLD { 1.0 } else { 0.0 })
        .collect::<Vec<_>>()
        .into()
}

/// Radius and center of the smallest circle containing every indicated node;
/// `(0, [0, 0])` when nothing is indicated.
pub fn enclosing_radius(indicator: &[f64], mesh: &TriMesh) -> (f64, Point) {
    let pts: Vec<Point> = mesh
        .nodes()
        .iter()
        .zip(indicator)
        .filter(|(_, &ind)| ind > 0.5)
        .map(|(p, _)| *p)
        .collect();
    match min_enclosing_circle(&pts) {
        Some(c) => (c.radius, c.center),
        None => (0.0, [0.0, 0.0]),
    }
}

/// Indicated area over the area of its enclosing circle. 0 when the circle
/// degenerates. Values above 1 can occur on coarse meshes because the area is
/// attributed per node.
pub fn surface_quotient(t_field: &[f64], n_field: &[f64], mesh: &TriMesh) -> f64 {
    let ind = tumor_indicator(t_field, n_field);
    let area = lumped_integral(mesh, |a| ind[a]);
    let (r, _) = enclosing_radius(&ind, mesh);
    sq_from(area, r)
}

fn sq_from(area: f64, r_max: f64) -> f64 {
    if r_max > 0.0 {
        area / (std::f64::consts::PI * r_max * r_max)
    } else {
        0.0
    }
}

/// All metrics at one output time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSample {
    pub t: f64,
    pub rq: f64,
    pub sq: f64,
    pub int_t: f64,
    pub int_n: f64,
    pub int_total: f64,
    /// Lumped area of the indicated region.
    pub area: f64,
    pub r_max: f64,
    pub enclosing_center: Point,
}

impl MetricsSample {
    pub fn compute(time: f64, t_field: &[f64], n_field: &[f64], mesh: &TriMesh) -> Self {
        let int_t = lumped_integral(mesh, |a| t_field[a]);
        let int_n = lumped_integral(mesh, |a| n_field[a]);
        let int_total = lumped_integral(mesh, |a| t_field[a] + n_field[a]);
        let ind = tumor_indicator(t_field, n_field);
        let area = lumped_integral(mesh, |a| ind[a]);
        let (r_max, enclosing_center) = enclosing_radius(&ind, mesh);
        MetricsSample {
            t: time,
            rq: if int_total > 0.0 { int_t / int_total } else { 1.0 },
            sq: sq_from(area, r_max),
            int_t,
            int_n,
            int_total,
            area,
            r_max,
            enclosing_center,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, Rect};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn brute_force(points: &[Point]) -> Circle {
        let covers = |c: &Circle| points.iter().all(|&p| dist(c.center, p) <= c.radius * (1.0 + 1e-12) + 1e-12);
        let mut best = Circle {
            center: points[0],
            radius: if points.len() == 1 { 0.0 } else { f64::INFINITY },
        };
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let c = diameter_circle(points[i], points[j]);
                if c.radius < best.radius && covers(&c) {
                    best = c;
                }
                for k in j + 1..points.len() {
                    if let Some(c) = circumcircle(points[i], points[j], points[k]) {
                        if c.radius < best.radius && covers(&c) {
                            best = c;
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn enclosing_circle_examples() {
        assert!(min_enclosing_circle(&[]).is_none());
        let c = min_enclosing_circle(&[[1.5, -2.0]]).unwrap();
        assert_eq!((c.radius, c.center), (0.0, [1.5, -2.0]));
        let c = min_enclosing_circle(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        assert_relative_eq!(c.radius, 2.5, epsilon = 1e-15);
        assert_eq!(c.center, [1.5, 2.0]);
        // equilateral triangle: circumradius 1/sqrt(3)
        let h = 3f64.sqrt() / 2.0;
        let c = min_enclosing_circle(&[[0.0, 0.0], [1.0, 0.0], [0.5, h]]).unwrap();
        assert_relative_eq!(c.radius, 1.0 / 3f64.sqrt(), epsilon = 1e-14);
        // obtuse triangle: the longest side is a diameter
        let c = min_enclosing_circle(&[[0.0, 0.0], [4.0, 0.0], [2.0, 0.5]]).unwrap();
        assert_relative_eq!(c.radius, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn enclosing_circle_with_collinear_and_duplicate_points() {
        let pts = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [1.0, 1.0], [3.0, 3.0]];
        let c = min_enclosing_circle(&pts).unwrap();
        assert_relative_eq!(c.radius, 1.5 * 2f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn enclosing_circle_on_grid_nodes() {
        // cocircular grid points are the hard case for the side selection
        let mut pts = Vec::new();
        for j in -3i32..=3 {
            for i in -3i32..=3 {
                if i * i + j * j <= 9 {
                    pts.push([i as f64 * 0.4, j as f64 * 0.4]);
                }
            }
        }
        let c = min_enclosing_circle(&pts).unwrap();
        assert_relative_eq!(c.radius, brute_force(&pts).radius, epsilon = 1e-12);
        assert_relative_eq!(c.radius, 1.2, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn enclosing_circle_matches_brute_force(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..18)
        ) {
            let pts: Vec<Point> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let fast = min_enclosing_circle(&pts).unwrap();
            let slow = brute_force(&pts);
            prop_assert!((fast.radius - slow.radius).abs() <= 1e-12 * (1.0 + slow.radius));
            for p in &pts {
                prop_assert!(fast.contains(*p));
            }
        }

        #[test]
        fn ring_quotient_scale_invariant(lambda in 1e-3f64..1e3, seed in 0u64..100) {
            let m = build_mesh(Rect::square(1.0), 4, 4).unwrap();
            let t: Vec<f64> = (0..m.node_count()).map(|a| ((a as u64 * 31 + seed) % 7) as f64 * 0.1).collect();
            let n: Vec<f64> = (0..m.node_count()).map(|a| ((a as u64 * 17 + seed) % 5) as f64 * 0.1).collect();
            let rq = ring_quotient(&t, &n, &m);
            let ts: Vec<f64> = t.iter().map(|v| v * lambda).collect();
            let ns: Vec<f64> = n.iter().map(|v| v * lambda).collect();
            prop_assert!((ring_quotient(&ts, &ns, &m) - rq).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&rq));
        }

        #[test]
        fn indicator_area_radius_monotone(seed in 0u64..500, bump in 0.0f64..0.01) {
            let m = build_mesh(Rect::square(2.0), 6, 6).unwrap();
            let mut x = seed | 1;
            let mut next = || { x ^= x << 13; x ^= x >> 7; x ^= x << 17; (x % 1000) as f64 * 2e-6 };
            let t: Vec<f64> = (0..m.node_count()).map(|_| next()).collect();
            let n = vec![0.0; m.node_count()];
            let t2: Vec<f64> = t.iter().enumerate().map(|(a, v)| if a % 3 == 0 { v + bump } else { *v }).collect();
            let (i1, i2) = (tumor_indicator(&t, &n), tumor_indicator(&t2, &n));
            for a in 0..m.node_count() {
                prop_assert!(i2[a] >= i1[a]);
            }
            let s1 = MetricsSample::compute(0.0, &t, &n, &m);
            let s2 = MetricsSample::compute(0.0, &t2, &n, &m);
            prop_assert!(s2.area >= s1.area);
            prop_assert!(s2.r_max >= s1.r_max - 1e-12);
        }
    }

    #[test]
    fn ring_quotient_examples() {
        let m = build_mesh(Rect::square(1.0), 3, 3).unwrap();
        let n0 = vec![0.0; m.node_count()];
        let mut t = vec![0.0; m.node_count()];
        t[5] = 0.3;
        assert_eq!(ring_quotient(&t, &n0, &m), 1.0);
        let t: Vec<f64> = (0..m.node_count()).map(|a| a as f64 * 0.01).collect();
        assert_relative_eq!(ring_quotient(&t, &t, &m), 0.5, epsilon = 1e-15);
        assert_eq!(ring_quotient(&n0, &n0, &m), 1.0);
    }

    #[test]
    fn indicator_threshold() {
        assert_eq!(tumor_indicator(&[0.0; 3], &[0.0; 3]).to_vec(), vec![0.0; 3]);
        assert_eq!(tumor_indicator(&[0.001; 3], &[0.0; 3]).to_vec(), vec![1.0; 3]);
        assert_eq!(tumor_indicator(&[0.0005; 3], &[0.0005; 3]).to_vec(), vec![1.0; 3]);
        assert_eq!(tumor_indicator(&[0.0009999; 3], &[0.0; 3]).to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn surface_quotient_of_a_disk_tends_to_one() {
        // lattice effects make the error non-monotone; the bound tightens overall
        for (cells, tol) in [(20, 0.1), (80, 0.01), (160, 0.005)] {
            let m = build_mesh(Rect::square(2.0), cells, cells).unwrap();
            let t: Vec<f64> = m
                .nodes()
                .iter()
                .map(|p| if p[0].hypot(p[1]) <= 1.5 { 1.0 } else { 0.0 })
                .collect();
            let sq = surface_quotient(&t, &vec![0.0; m.node_count()], &m);
            assert!((sq - 1.0).abs() < tol, "cells {cells}: sq {sq}");
        }
    }

    #[test]
    fn surface_quotient_of_two_far_nodes_is_small() {
        let m = build_mesh(Rect::square(9.0), 45, 45).unwrap();
        let mut t = vec![0.0; m.node_count()];
        t[m.node_index(0, 0)] = 1.0;
        t[m.node_index(45, 45)] = 1.0;
        let sq = surface_quotient(&t, &vec![0.0; m.node_count()], &m);
        assert!(sq > 0.0 && sq < 1e-3, "{sq}");
        assert_eq!(surface_quotient(&vec![0.0; m.node_count()], &vec![0.0; m.node_count()], &m), 0.0);
    }

    #[test]
    fn total_density_examples() {
        let m = build_mesh(Rect::square(9.0), 45, 45).unwrap();
        let z = vec![0.0; m.node_count()];
        assert_eq!(total_density(&z, &z, &m), 0.0);
        let c = vec![0.25; m.node_count()];
        assert_relative_eq!(total_density(&c, &z, &m), 0.25 * 324.0, max_relative = 1e-12);
    }
}
