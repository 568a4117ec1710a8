//! Fleet description in TOML: either explicit `[[ev]]` records or one
//! `[generator]` table drawing parameters uniformly from ranges.
//!
//! ```toml
//! [generator]
//! seed = 7
//! eta = [0.85, 0.95]
//! pbar_kw = [3.3, 7.2]
//! capacity_kwh = [18.0, 20.0]
//! soc0 = [0.3, 0.5]
//! soc_target = [0.7, 0.9]
//! # per_node = 70   (defaults to the feeder's houses per node)
//!
//! # or
//! [[ev]]
//! node = "650"
//! eta = 0.9
//! pbar_kw = 6.6
//! capacity_kwh = 20.0
//! soc0 = 0.3
//! soc_target = 0.9
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fleet::{EvSpec, Fleet};
use crate::network::FeederModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub eta: [f64; 2],
    pub pbar_kw: [f64; 2],
    pub capacity_kwh: [f64; 2],
    pub soc0: [f64; 2],
    pub soc_target: [f64; 2],
    #[serde(default)]
    pub per_node: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvRecord {
    node: String,
    eta: f64,
    pbar_kw: f64,
    capacity_kwh: f64,
    soc0: f64,
    soc_target: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FleetFile {
    generator: Option<GeneratorSpec>,
    #[serde(default)]
    ev: Vec<EvRecord>,
}

pub fn read_fleet(path: &Path, feeder: &FeederModel, dt_h: f64, horizon: usize) -> Result<Fleet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fleet(&text, path, feeder, dt_h, horizon)
}

pub fn parse_fleet(text: &str, path: &Path, feeder: &FeederModel, dt_h: f64, horizon: usize) -> Result<Fleet> {
    let file: FleetFile = toml::from_str(text).map_err(|e| toml_error(path, text, &e))?;
    let perr = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };
    let evs = match (file.generator, file.ev.is_empty()) {
        (Some(_), false) => return Err(perr("use either [generator] or [[ev]] records, not both".into())),
        (None, true) => Vec::new(),
        (Some(g), true) => {
            let counts = match g.per_node {
                Some(c) => vec![c; feeder.node_count()],
                None => feeder.houses_per_node().to_vec(),
            };
            generate(&g, &counts).map_err(perr)?
        }
        (None, false) => {
            let mut evs = Vec::with_capacity(file.ev.len());
            for (k, r) in file.ev.iter().enumerate() {
                let node = (1..=feeder.node_count())
                    .find(|&i| feeder.name(i) == r.node)
                    .ok_or_else(|| perr(format!("ev record {k}: unknown node {}", r.node)))?;
                evs.push(EvSpec {
                    node,
                    slot: 0,
                    eta: r.eta,
                    pbar_kw: r.pbar_kw,
                    capacity_kwh: r.capacity_kwh,
                    soc0: r.soc0,
                    soc_target: r.soc_target,
                });
            }
            evs
        }
    };
    Fleet::new(evs, dt_h, horizon)
}

/// Draws EVs node by node; within each EV the draw order is eta, pbar,
/// capacity, soc0, soc_target.
pub fn generate(g: &GeneratorSpec, counts: &[usize]) -> std::result::Result<Vec<EvSpec>, String> {
    for (name, [lo, hi]) in [
        ("eta", g.eta),
        ("pbar_kw", g.pbar_kw),
        ("capacity_kwh", g.capacity_kwh),
        ("soc0", g.soc0),
        ("soc_target", g.soc_target),
    ] {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(format!("generator range {name} = [{lo}, {hi}] is empty"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut draw = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..hi) };
    let mut evs = Vec::new();
    for (i, &c) in counts.iter().enumerate() {
        for slot in 0..c {
            evs.push(EvSpec {
                node: i + 1,
                slot,
                eta: draw(g.eta),
                pbar_kw: draw(g.pbar_kw),
                capacity_kwh: draw(g.capacity_kwh),
                soc0: draw(g.soc0),
                soc_target: draw(g.soc_target),
            });
        }
    }
    Ok(evs)
}

pub(crate) fn toml_error(path: &Path, text: &str, e: &toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.message().to_string(),
    }
}
