//! Trajectory CSV and SVG plots.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use swarmplan::arena::Rect;
use swarmplan::model::{AgentState, ControlInput};
use swarmplan::sim::suite::BenchReport;
use swarmplan::sim::EpisodeLog;

/// One CSV row. The final states get a row with `step = steps` and no inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub time: String,
    pub agent: usize,
    pub px: String,
    pub py: String,
    pub vx: String,
    pub vy: String,
    pub ux_plan: String,
    pub uy_plan: String,
    pub ux: String,
    pub uy: String,
    pub correction: String,
    pub corridor: String,
}

/// 17 significant digits, enough to round-trip every f64.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trajectory_csv<W: Write>(log: &EpisodeLog, out: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let row = |step: usize, time: f64, agent: usize, x: &AgentState, inputs: Option<(&ControlInput, &ControlInput, f64)>, corridor: Option<usize>| {
        let (plan, applied, corr) = match inputs {
            Some((p, a, c)) => ([num(p.ax), num(p.ay)], [num(a.ax), num(a.ay)], num(c)),
            None => (Default::default(), Default::default(), String::new()),
        };
        let [ux_plan, uy_plan] = plan;
        let [ux, uy] = applied;
        TrajectoryRow {
            step,
            time: num(time),
            agent,
            px: num(x.px),
            py: num(x.py),
            vx: num(x.vx),
            vy: num(x.vy),
            ux_plan,
            uy_plan,
            ux,
            uy,
            correction: corr,
            corridor: corridor.map(|c| c.to_string()).unwrap_or_default(),
        }
    };
    for s in &log.steps {
        for (a, x) in s.states.iter().enumerate() {
            w.serialize(row(
                s.step,
                s.time,
                a,
                x,
                Some((&s.u_star[a], &s.u[a], s.corrections[a])),
                s.corridors.get(a).copied(),
            ))?;
        }
    }
    let n = log.steps.len();
    for (a, x) in log.final_states.iter().enumerate() {
        w.serialize(row(n, n as f64 * log.dt, a, x, None, None))?;
    }
    w.flush()?;
    Ok(())
}

/// States per logged time, as written by [`write_trajectory_csv`].
pub fn read_trajectory_csv<R: Read>(input: R) -> anyhow::Result<Vec<Vec<AgentState>>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out: Vec<Vec<AgentState>> = Vec::new();
    for rec in r.deserialize() {
        let row: TrajectoryRow = rec?;
        if row.step == out.len() {
            out.push(Vec::new());
        }
        anyhow::ensure!(row.step + 1 == out.len(), "rows out of order at step {}", row.step);
        anyhow::ensure!(row.agent == out[row.step].len(), "agent rows out of order at step {}", row.step);
        out[row.step].push(AgentState::new(row.px.parse()?, row.py.parse()?, row.vx.parse()?, row.vy.parse()?));
    }
    Ok(out)
}

const COLOURS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const SVG_SIZE: f64 = 600.0;

/// Maps world coordinates into an SVG canvas with y pointing up.
struct Canvas {
    x0: f64,
    y1: f64,
    scale: f64,
    pad: f64,
}

impl Canvas {
    fn fit(xs: impl Iterator<Item = (f64, f64)>, pad: f64) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for (x, y) in xs {
            lo = [lo[0].min(x), lo[1].min(y)];
            hi = [hi[0].max(x), hi[1].max(y)];
        }
        if !lo[0].is_finite() {
            lo = [0.0; 2];
            hi = [1.0; 2];
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
        Self {
            x0: lo[0],
            y1: lo[1] + span,
            scale: (SVG_SIZE - 2.0 * pad) / span,
            pad,
        }
    }

    fn x(&self, x: f64) -> f64 {
        self.pad + (x - self.x0) * self.scale
    }

    fn y(&self, y: f64) -> f64 {
        self.pad + (self.y1 - y) * self.scale
    }
}

/// Agent paths with start (filled) and target (hollow) markers over the arena corridors.
/// Each agent contributes exactly one `<path>`.
pub fn trajectory_svg(log: &EpisodeLog, arena: &[Rect]) -> String {
    let points = log
        .state_history()
        .flat_map(|s| s.iter().map(|x| (x.px, x.py)))
        .chain(log.targets.iter().map(|x| (x.px, x.py)))
        .chain(arena.iter().flat_map(|r| [(r.xmin, r.ymin), (r.xmax, r.ymax)]));
    let c = Canvas::fit(points, 30.0);
    let r = log.params.radius * c.scale;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>"#);
    for rect in arena {
        let _ = writeln!(
            s,
            r##"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#f2f2f2" stroke="#999" stroke-width="1"/>"##,
            c.x(rect.xmin),
            c.y(rect.ymax),
            rect.width() * c.scale,
            rect.height() * c.scale
        );
    }
    let n = log.final_states.len();
    for a in 0..n {
        let colour = COLOURS[a % COLOURS.len()];
        let mut d = String::new();
        for (k, states) in log.state_history().enumerate() {
            let _ = write!(d, "{}{:.3},{:.3} ", if k == 0 { "M" } else { "L" }, c.x(states[a].px), c.y(states[a].py));
        }
        let _ = writeln!(
            s,
            r#"<path id="agent-{a}" d="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            d.trim_end()
        );
        let start = log.state_history().next().map_or(log.final_states[a], |st| st[a]);
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="{r:.3}" fill="{colour}" fill-opacity="0.4"/>"#,
            c.x(start.px),
            c.y(start.py)
        );
        let t = log.targets[a];
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="{r:.3}" fill="none" stroke="{colour}" stroke-dasharray="4 3"/>"#,
            c.x(t.px),
            c.y(t.py)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Log-log plot of mean step time against agent count, one polyline per planner.
pub fn bench_svg(report: &BenchReport) -> String {
    let pts = report
        .series
        .iter()
        .flat_map(|s| s.ns.iter().zip(&s.mean).map(|(&n, &t)| ((n as f64).log10(), t.log10())));
    let c = Canvas::fit(pts, 60.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>"#);
    let (lo, hi) = (c.pad, SVG_SIZE - c.pad);
    let _ = writeln!(s, r#"<line x1="{lo}" y1="{hi}" x2="{hi}" y2="{hi}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{lo}" y1="{lo}" x2="{lo}" y2="{hi}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">log10 N</text>"#, SVG_SIZE / 2.0, SVG_SIZE - 20.0);
    let _ = writeln!(
        s,
        r#"<text x="20" y="{0}" text-anchor="middle" transform="rotate(-90 20 {0})">log10 step time [s]</text>"#,
        SVG_SIZE / 2.0
    );
    for (i, series) in report.series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let xy: Vec<(f64, f64)> = series
            .ns
            .iter()
            .zip(&series.mean)
            .map(|(&n, &t)| (c.x((n as f64).log10()), c.y(t.log10())))
            .collect();
        let pts: Vec<String> = xy.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, pts.join(" "));
        for (x, y) in &xy {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{colour}"/>"#);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{}: slope {:.2} [{:.2}, {:.2}]</text>"#,
            lo + 10.0,
            lo + 15.0 + 16.0 * i as f64,
            series.planner.label(),
            series.fit.exponent,
            series.fit.ci_low,
            series.fit.ci_high
        );
    }
    s.push_str("</svg>\n");
    s
}
