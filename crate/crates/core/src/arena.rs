//! Rectangular arenas, corridor decomposition and sub-target sequencing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::ArenaError;
use crate::model::{AgentParams, AgentState};

/// Axis-aligned rectangle in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Rect {
    pub const fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Self {
        Self {
            xmin,
            xmax,
            ymin,
            ymax,
        }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn centroid(&self) -> [f64; 2] {
        [0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)]
    }

    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        p[0] >= self.xmin - tol && p[0] <= self.xmax + tol && p[1] >= self.ymin - tol && p[1] <= self.ymax + tol
    }

    /// Intersection with positive area, if any.
    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let r = Rect::new(
            self.xmin.max(other.xmin),
            self.xmax.min(other.xmax),
            self.ymin.max(other.ymin),
            self.ymax.min(other.ymax),
        );
        (r.width() > 0.0 && r.height() > 0.0).then_some(r)
    }

    /// Whether a mover of footprint `w + 2ε` fits strictly inside.
    pub fn admits_mover(&self, params: &AgentParams) -> bool {
        let side = 2.0 * params.wall_clearance();
        self.width() > side && self.height() > side
    }
}

/// Box of admissible centre positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionBounds {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl PositionBounds {
    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        (0..2).all(|a| p[a] >= self.lo[a] - tol && p[a] <= self.hi[a] + tol)
    }

    /// Largest per-axis violation of `p`, zero when inside.
    pub fn violation(&self, p: [f64; 2]) -> f64 {
        (0..2)
            .map(|a| (self.lo[a] - p[a]).max(p[a] - self.hi[a]).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Centre-position bounds for a mover inside `r`: every wall pulled in by `w/2 + ε`.
pub fn shrink_rect(r: &Rect, params: &AgentParams) -> Result<PositionBounds, ArenaError> {
    if !r.admits_mover(params) {
        return Err(ArenaError::RectTooSmall {
            index: 0,
            width: r.width(),
            height: r.height(),
        });
    }
    Ok(shrink_unchecked(r, params))
}

fn shrink_unchecked(r: &Rect, params: &AgentParams) -> PositionBounds {
    let c = params.wall_clearance();
    PositionBounds {
        lo: [r.xmin + c, r.ymin + c],
        hi: [r.xmax - c, r.ymax - c],
    }
}

/// Per-axis bounds `lo ≤ u ≤ hi` on the acceleration for the next sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    /// Set when the position bounds cannot be met within `±a_peak`.
    pub clamped: bool,
}

/// Accelerations keeping the next position `p + v·dt + ½u·dt²` inside the shrunk rectangle,
/// intersected with `[−a_peak, a_peak]` per axis.
pub fn input_space_bounds(x: &AgentState, r: &Rect, params: &AgentParams, dt: f64) -> InputBounds {
    input_bounds_for(x, &shrink_unchecked(r, params), params.a_peak, dt)
}

pub fn input_bounds_for(x: &AgentState, bounds: &PositionBounds, a_peak: f64, dt: f64) -> InputBounds {
    let half = 0.5 * dt * dt;
    let p = [x.px, x.py];
    let v = [x.vx, x.vy];
    let mut lo = [0.0; 2];
    let mut hi = [0.0; 2];
    let mut clamped = false;
    for a in 0..2 {
        let drift = p[a] + v[a] * dt;
        let (l, h) = if half > 0.0 {
            ((bounds.lo[a] - drift) / half, (bounds.hi[a] - drift) / half)
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        };
        if h < -a_peak {
            lo[a] = -a_peak;
            hi[a] = -a_peak;
            clamped = true;
        } else if l > a_peak {
            lo[a] = a_peak;
            hi[a] = a_peak;
            clamped = true;
        } else {
            lo[a] = l.max(-a_peak);
            hi[a] = h.min(a_peak);
        }
    }
    InputBounds { lo, hi, clamped }
}

/// Bounds for knots `1..=knots` of a plan from `x`, each widened just enough to hold the plan
/// that brakes along the velocity at `a_max`, so that plan always stays admissible. Equal to
/// `bounds` whenever the agent can stop inside them.
pub fn braking_envelope(bounds: &PositionBounds, x: &AgentState, a_max: f64, dt: f64, knots: usize) -> Vec<PositionBounds> {
    let mut p = x.position();
    let mut v = x.velocity();
    let mut out = Vec::with_capacity(knots);
    for _ in 0..knots {
        let speed = v.norm();
        let u = if speed > 0.0 { -v * (a_max.min(speed / dt) / speed) } else { v * 0.0 };
        p += v * dt + u * (0.5 * dt * dt);
        v += u * dt;
        let mut b = *bounds;
        for a in 0..2 {
            b.lo[a] = b.lo[a].min(p[a]);
            b.hi[a] = b.hi[a].max(p[a]);
        }
        out.push(b);
    }
    out
}

/// Overlap zone between two corridors and the sub-target placed at its centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub a: usize,
    pub b: usize,
    pub rect: Rect,
    pub subtarget: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorridorMap {
    corridors: Vec<Rect>,
    bounds: Vec<PositionBounds>,
    overlaps: Vec<Overlap>,
    /// Sorted neighbour lists.
    adjacency: Vec<Vec<usize>>,
}

impl CorridorMap {
    pub fn corridors(&self) -> &[Rect] {
        &self.corridors
    }

    pub fn bounds(&self, corridor: usize) -> &PositionBounds {
        &self.bounds[corridor]
    }

    pub fn overlaps(&self) -> &[Overlap] {
        &self.overlaps
    }

    pub fn neighbours(&self, corridor: usize) -> &[usize] {
        &self.adjacency[corridor]
    }

    pub fn overlap(&self, a: usize, b: usize) -> Option<&Overlap> {
        self.overlaps
            .iter()
            .find(|o| (o.a == a && o.b == b) || (o.a == b && o.b == a))
    }

    /// Corridors whose shrunk bounds contain `p`, in increasing id order.
    pub fn containing(&self, p: [f64; 2], tol: f64) -> Vec<usize> {
        (0..self.corridors.len())
            .filter(|&c| self.bounds[c].contains(p, tol))
            .collect()
    }
}

pub fn build_corridor_map(rects: &[Rect], params: &AgentParams) -> Result<CorridorMap, ArenaError> {
    if rects.is_empty() {
        return Err(ArenaError::Empty);
    }
    for (index, r) in rects.iter().enumerate() {
        if !r.admits_mover(params) {
            return Err(ArenaError::RectTooSmall {
                index,
                width: r.width(),
                height: r.height(),
            });
        }
    }
    let side = 2.0 * params.wall_clearance();
    let n = rects.len();
    let mut overlaps = Vec::new();
    let mut adjacency = vec![Vec::new(); n];
    for a in 0..n {
        for b in a + 1..n {
            if let Some(rect) = rects[a].intersection(&rects[b]) {
                if rect.width() < side || rect.height() < side {
                    return Err(ArenaError::ThinOverlap { a, b });
                }
                overlaps.push(Overlap {
                    a,
                    b,
                    rect,
                    subtarget: rect.centroid(),
                });
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
    }
    let mut component = vec![usize::MAX; n];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for s in 0..n {
        if component[s] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut members = vec![s];
        component[s] = id;
        let mut queue = VecDeque::from([s]);
        while let Some(c) = queue.pop_front() {
            for &nb in &adjacency[c] {
                if component[nb] == usize::MAX {
                    component[nb] = id;
                    members.push(nb);
                    queue.push_back(nb);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    if components.len() > 1 {
        return Err(ArenaError::Disconnected(components));
    }
    Ok(CorridorMap {
        bounds: rects.iter().map(|r| shrink_unchecked(r, params)).collect(),
        corridors: rects.to_vec(),
        overlaps,
        adjacency,
    })
}

/// Sub-targets of one agent. While heading for `waypoints[k]` the agent is
/// constrained to corridor `corridors[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTargetPlan {
    pub waypoints: Vec<[f64; 2]>,
    pub corridors: Vec<usize>,
    pub index: usize,
}

impl SubTargetPlan {
    pub fn current_target(&self) -> [f64; 2] {
        self.waypoints[self.index]
    }

    pub fn active_corridor(&self) -> usize {
        self.corridors[self.index]
    }

    pub fn on_final_leg(&self) -> bool {
        self.index + 1 == self.waypoints.len()
    }
}

const CONTAIN_TOL: f64 = 1e-9;

/// Breadth-first corridor path from `start` to `target`, ties broken by smaller corridor id.
pub fn plan_subtargets(map: &CorridorMap, start: [f64; 2], target: [f64; 2]) -> Result<SubTargetPlan, ArenaError> {
    let from = map.containing(start, CONTAIN_TOL);
    if from.is_empty() {
        return Err(ArenaError::Uncovered(start[0], start[1]));
    }
    let to = map.containing(target, CONTAIN_TOL);
    if to.is_empty() {
        return Err(ArenaError::Uncovered(target[0], target[1]));
    }
    if let Some(&c) = from.iter().find(|c| to.contains(c)) {
        return Ok(SubTargetPlan {
            waypoints: vec![target],
            corridors: vec![c],
            index: 0,
        });
    }
    let n = map.corridors.len();
    let mut parent = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    for &c in &from {
        seen[c] = true;
        queue.push_back(c);
    }
    let mut reached = None;
    while let Some(c) = queue.pop_front() {
        if to.contains(&c) {
            reached = Some(c);
            break;
        }
        for &nb in map.neighbours(c) {
            if !seen[nb] {
                seen[nb] = true;
                parent[nb] = c;
                queue.push_back(nb);
            }
        }
    }
    let Some(end) = reached else {
        return Err(ArenaError::NoPath(start[0], start[1]));
    };
    let mut path = vec![end];
    while parent[*path.last().unwrap()] != usize::MAX {
        path.push(parent[*path.last().unwrap()]);
    }
    path.reverse();
    let mut waypoints: Vec<[f64; 2]> = path
        .windows(2)
        .map(|w| map.overlap(w[0], w[1]).expect("adjacent corridors overlap").subtarget)
        .collect();
    waypoints.push(target);
    Ok(SubTargetPlan {
        waypoints,
        corridors: path,
        index: 0,
    })
}

/// Switches to the next corridor once the agent is inside the overlap zone and its
/// whole footprint fits in the next corridor.
pub fn advance_plan(map: &CorridorMap, plan: &SubTargetPlan, pos: [f64; 2]) -> SubTargetPlan {
    let mut next = plan.clone();
    if plan.on_final_leg() {
        return next;
    }
    let here = plan.corridors[plan.index];
    let there = plan.corridors[plan.index + 1];
    let inside_overlap = map
        .overlap(here, there)
        .is_some_and(|o| o.rect.contains(pos, CONTAIN_TOL));
    if inside_overlap && map.bounds(there).contains(pos, CONTAIN_TOL) {
        next.index += 1;
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn params(w: f64, eps: f64) -> AgentParams {
        AgentParams {
            width: w,
            margin: eps,
            ..AgentParams::default()
        }
    }

    #[test]
    fn shrink_examples() {
        let b = shrink_rect(&Rect::new(0.0, 1.0, 0.0, 1.0), &params(0.2, 0.0)).unwrap();
        assert_abs_diff_eq!(b.lo[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(b.hi[1], 0.9, epsilon = 1e-15);

        let degenerate = Rect::new(0.0, 0.125, 0.0, 1.0);
        assert!(shrink_rect(&degenerate, &params(0.115, 0.005)).is_err());

        let b = shrink_rect(&Rect::new(0.0, 0.96, 0.0, 0.96), &params(0.115, 0.005)).unwrap();
        assert_abs_diff_eq!(b.lo[0], 0.0625, epsilon = 1e-15);
        assert_abs_diff_eq!(b.hi[0], 0.8975, epsilon = 1e-15);
    }

    #[test]
    fn input_bounds_examples() {
        let p = params(0.115, 0.005);
        let r = Rect::new(0.0, 0.96, 0.0, 0.96);
        let b = shrink_rect(&r, &p).unwrap();
        let wide = AgentParams { a_peak: 1e9, ..p };
        let centre = input_space_bounds(&AgentState::at_rest(0.48, 0.48), &r, &wide, 0.1);
        assert_abs_diff_eq!(centre.hi[0], -centre.lo[0], epsilon = 1e-9);
        assert_abs_diff_eq!(centre.hi[0], (b.hi[0] - 0.48) / 0.005, epsilon = 1e-9);

        let at_wall = input_space_bounds(&AgentState::at_rest(b.hi[0], 0.48), &r, &p, 0.1);
        assert!(at_wall.hi[0] <= 0.0);

        let moving = input_space_bounds(&AgentState::new(0.88, 0.48, 0.5, 0.0), &r, &p, 0.1);
        assert_abs_diff_eq!(moving.hi[0], -6.5, epsilon = 1e-9);
        assert!(!moving.clamped);

        let hopeless = input_space_bounds(&AgentState::new(0.88, 0.48, 1.0, 0.0), &r, &p, 0.1);
        assert!(hopeless.clamped);
        assert_eq!(hopeless.hi[0], -p.a_peak);
    }

    fn l_shape() -> Vec<Rect> {
        vec![Rect::new(0.0, 2.0, 0.0, 0.5), Rect::new(1.5, 2.0, 0.0, 2.0)]
    }

    #[test]
    fn corridor_map_examples() {
        let p = AgentParams::default();
        let single = build_corridor_map(&[Rect::new(0.0, 1.0, 0.0, 1.0)], &p).unwrap();
        assert!(single.overlaps().is_empty());

        let map = build_corridor_map(&l_shape(), &p).unwrap();
        assert_eq!(map.overlaps().len(), 1);
        assert_eq!(map.overlaps()[0].subtarget, [1.75, 0.25]);

        let thin = vec![Rect::new(0.0, 2.0, 0.0, 0.5), Rect::new(1.9, 2.4, 0.0, 2.0)];
        assert_eq!(build_corridor_map(&thin, &p), Err(ArenaError::ThinOverlap { a: 0, b: 1 }));

        let apart = vec![Rect::new(0.0, 1.0, 0.0, 1.0), Rect::new(2.0, 3.0, 0.0, 1.0)];
        assert_eq!(
            build_corridor_map(&apart, &p),
            Err(ArenaError::Disconnected(vec![vec![0], vec![1]]))
        );
    }

    #[test]
    fn plan_examples() {
        let p = AgentParams::default();
        let map = build_corridor_map(&l_shape(), &p).unwrap();
        let same = plan_subtargets(&map, [0.3, 0.25], [1.0, 0.25]).unwrap();
        assert_eq!(same.waypoints, vec![[1.0, 0.25]]);

        let turn = plan_subtargets(&map, [0.3, 0.25], [1.75, 1.8]).unwrap();
        assert_eq!(turn.waypoints, vec![[1.75, 0.25], [1.75, 1.8]]);
        assert_eq!(turn.corridors, vec![0, 1]);

        let chain = vec![
            Rect::new(0.0, 1.0, 0.0, 0.5),
            Rect::new(0.5, 1.0, 0.0, 2.0),
            Rect::new(0.5, 2.0, 1.5, 2.0),
        ];
        let map = build_corridor_map(&chain, &p).unwrap();
        let plan = plan_subtargets(&map, [0.2, 0.25], [1.8, 1.75]).unwrap();
        assert_eq!(plan.waypoints.len(), 3);
        assert_eq!(plan.corridors, vec![0, 1, 2]);

        assert!(plan_subtargets(&map, [5.0, 5.0], [1.8, 1.75]).is_err());
    }

    #[test]
    fn advance_examples() {
        let p = AgentParams::default();
        let map = build_corridor_map(&l_shape(), &p).unwrap();
        let plan = plan_subtargets(&map, [0.3, 0.25], [1.75, 1.8]).unwrap();
        let mid = advance_plan(&map, &plan, [0.8, 0.25]);
        assert_eq!(mid.index, 0);
        let switched = advance_plan(&map, &plan, [1.75, 0.25]);
        assert_eq!(switched.index, 1);
        assert_eq!(switched.active_corridor(), 1);
        let stays = advance_plan(&map, &switched, [1.75, 1.8]);
        assert_eq!(stays.index, 1);
        assert_eq!(stays.current_target(), [1.75, 1.8]);
    }

    proptest! {
        #[test]
        fn input_bounds_keep_next_position_inside(
            px in 0.07f64..0.89, py in 0.07f64..0.89,
            vx in -1.0f64..1.0, vy in -1.0f64..1.0,
            sx in 0.0f64..1.0, sy in 0.0f64..1.0,
        ) {
            let p = AgentParams::default();
            let r = Rect::new(0.0, 0.96, 0.0, 0.96);
            let b = shrink_rect(&r, &p).unwrap();
            let x = AgentState::new(px.clamp(b.lo[0], b.hi[0]), py.clamp(b.lo[1], b.hi[1]), vx, vy);
            let ib = input_space_bounds(&x, &r, &p, 0.1);
            prop_assume!(!ib.clamped);
            let u = [ib.lo[0] + sx * (ib.hi[0] - ib.lo[0]), ib.lo[1] + sy * (ib.hi[1] - ib.lo[1])];
            let dyn_ = crate::model::discretize(0.1).unwrap();
            let next = crate::model::step(&x, &crate::model::ControlInput::new(u[0], u[1]), &dyn_);
            prop_assert!(b.violation([next.px, next.py]) <= 1e-12);
        }

        #[test]
        fn advance_is_monotone(path in prop::collection::vec((0.0f64..2.0, 0.0f64..2.0), 1..40)) {
            let p = AgentParams::default();
            let map = build_corridor_map(&l_shape(), &p).unwrap();
            let mut plan = plan_subtargets(&map, [0.3, 0.25], [1.75, 1.8]).unwrap();
            for (x, y) in path {
                let next = advance_plan(&map, &plan, [x, y]);
                prop_assert!(next.index >= plan.index);
                plan = next;
            }
        }
    }
}
