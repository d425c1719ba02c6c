//! JSON scenario documents.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix2, Matrix4};
use serde::{Deserialize, Serialize};
use swarmplan::admm::AdmmConfig;
use swarmplan::arena::Rect;
use swarmplan::hocbf::FilterConfig;
use swarmplan::model::{AgentParams, AgentState, Horizon};
use swarmplan::sim::{AgentSpec, Method, Scenario};

pub const SCHEMA_VERSION: u32 = 1;

/// A malformed or out-of-range scenario document. `path` is the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "schema error: {}", self.message)
        } else {
            write!(f, "schema error at {}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for SchemaError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentEntry {
    pub start: [f64; 4],
    pub target: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsEntry {
    #[serde(rename = "R")]
    pub r: f64,
    pub w: f64,
    pub eps: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub a_peak: f64,
}

impl From<AgentParams> for ParamsEntry {
    fn from(p: AgentParams) -> Self {
        Self {
            r: p.radius,
            w: p.width,
            eps: p.margin,
            v_max: p.v_max,
            a_max: p.a_max,
            a_peak: p.a_peak,
        }
    }
}

impl From<ParamsEntry> for AgentParams {
    fn from(p: ParamsEntry) -> Self {
        Self {
            radius: p.r,
            width: p.w,
            margin: p.eps,
            v_max: p.v_max,
            a_max: p.a_max,
            a_peak: p.a_peak,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArenaEntry {
    /// `[xmin, xmax, ymin, ymax]` per corridor.
    pub rects: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmEntry {
    pub m: usize,
    pub mu: f64,
    pub m_pre: usize,
    /// Row-major.
    #[serde(rename = "Q")]
    pub q: [[f64; 4]; 4],
    #[serde(rename = "Rw")]
    pub rw: [[f64; 2]; 2],
}

impl From<&AdmmConfig> for AdmmEntry {
    fn from(c: &AdmmConfig) -> Self {
        let mut q = [[0.0; 4]; 4];
        let mut rw = [[0.0; 2]; 2];
        for (i, row) in q.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = c.q[(i, j)];
            }
        }
        for (i, row) in rw.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = c.rw[(i, j)];
            }
        }
        Self {
            m: c.m,
            mu: c.mu,
            m_pre: c.m_pre,
            q,
            rw,
        }
    }
}

impl From<&AdmmEntry> for AdmmConfig {
    fn from(e: &AdmmEntry) -> Self {
        Self {
            m: e.m,
            m_pre: e.m_pre,
            mu: e.mu,
            q: Matrix4::from_fn(|i, j| e.q[i][j]),
            rw: Matrix2::from_fn(|i, j| e.rw[i][j]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterEntry {
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "K2")]
    pub k2: f64,
    pub soft_penalty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonEntry {
    #[serde(rename = "Tf")]
    pub tf: f64,
    pub dt: f64,
}

/// On-disk scenario. Every section except `agents` falls back to the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: u32,
    pub agents: Vec<AgentEntry>,
    #[serde(default = "default_params")]
    pub params: ParamsEntry,
    #[serde(default)]
    pub arena: ArenaEntry,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_admm")]
    pub admm: AdmmEntry,
    #[serde(default = "default_filter")]
    pub filter: FilterEntry,
    #[serde(default = "default_horizon")]
    pub horizon: HorizonEntry,
    #[serde(default)]
    pub seed: u64,
}

fn default_params() -> ParamsEntry {
    AgentParams::default().into()
}

fn default_method() -> Method {
    Method::AdmmHocbf
}

fn default_admm() -> AdmmEntry {
    (&AdmmConfig::default()).into()
}

fn default_filter() -> FilterEntry {
    let f = FilterConfig::default();
    FilterEntry {
        k1: f.k1,
        k2: f.k2,
        soft_penalty: f.soft_penalty,
    }
}

fn default_horizon() -> HorizonEntry {
    let h = Horizon::default();
    HorizonEntry { tf: h.tf, dt: h.dt }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, SchemaError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ScenarioFile = serde_path_to_error::deserialize(de).map_err(|e| SchemaError {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if file.version != SCHEMA_VERSION {
            return Err(SchemaError {
                path: "version".into(),
                message: format!("unsupported version {}, expected {SCHEMA_VERSION}", file.version),
            });
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        Ok(Self::parse(&text)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario files always serialise");
        s.push('\n');
        s
    }

    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            version: SCHEMA_VERSION,
            agents: s
                .agents
                .iter()
                .map(|a| AgentEntry {
                    start: a.start.to_array(),
                    target: a.target.to_array(),
                })
                .collect(),
            params: s.params.into(),
            arena: ArenaEntry {
                rects: s.arena.iter().map(|r| [r.xmin, r.xmax, r.ymin, r.ymax]).collect(),
            },
            method: s.method,
            admm: (&s.admm).into(),
            filter: FilterEntry {
                k1: s.filter.k1,
                k2: s.filter.k2,
                soft_penalty: s.filter.soft_penalty,
            },
            horizon: HorizonEntry {
                tf: s.horizon.tf,
                dt: s.horizon.dt,
            },
            seed: s.seed,
        }
    }

    /// Builds the scenario; the filter takes `a_peak` and `dt` from the params and horizon.
    pub fn to_scenario(&self) -> Scenario {
        let state = |v: &[f64; 4]| AgentState::new(v[0], v[1], v[2], v[3]);
        let agents = self
            .agents
            .iter()
            .map(|a| AgentSpec {
                start: state(&a.start),
                target: state(&a.target),
            })
            .collect();
        let mut s = Scenario::new(agents, self.params.into());
        s.arena = self.arena.rects.iter().map(|r| Rect::new(r[0], r[1], r[2], r[3])).collect();
        s.method = self.method;
        s.admm = (&self.admm).into();
        s.horizon = Horizon {
            tf: self.horizon.tf,
            dt: self.horizon.dt,
        };
        s.filter = FilterConfig {
            k1: self.filter.k1,
            k2: self.filter.k2,
            soft_penalty: self.filter.soft_penalty,
            a_peak: s.params.a_peak,
            dt: s.horizon.dt,
        };
        s.seed = self.seed;
        s
    }
}
