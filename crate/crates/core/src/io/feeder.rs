//! Line-oriented feeder description.
//!
//! ```text
//! # comment
//! head      sub
//! v0_pu     1.0
//! gamma     0.329
//! s_base_va 5e6
//! v_base_v  4160
//! impedance_scale 1.0        (optional, multiplies every r and x)
//! node 650 70                (name, houses; declaration order = node order)
//! line sub 650 0.0346 0.277  (parent, child, r_ohm, x_ohm)
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Bases, FeederModel, Line};

pub fn read_feeder(path: &Path) -> Result<FeederModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feeder(&text, path)
}

struct RawLine {
    lineno: usize,
    parent: String,
    child: String,
    r: f64,
    x: f64,
}

pub fn parse_feeder(text: &str, path: &Path) -> Result<FeederModel> {
    let err = |lineno: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        msg,
    };
    let mut head: Option<String> = None;
    let mut v0_pu = 1.0;
    let mut gamma: Option<f64> = None;
    let mut bases = Bases::default();
    let mut scale = 1.0;
    let mut nodes: Vec<(String, usize, usize)> = Vec::new();
    let mut raw: Vec<RawLine> = Vec::new();

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(lineno, format!("expected a number, found `{s}`")))
        };
        let arity = |n: usize| -> Result<()> {
            if fields.len() == n {
                Ok(())
            } else {
                Err(err(lineno, format!("`{}` takes {} value(s)", fields[0], n - 1)))
            }
        };
        match fields[0] {
            "head" => {
                arity(2)?;
                head = Some(fields[1].to_string());
            }
            "v0_pu" => {
                arity(2)?;
                v0_pu = num(fields[1])?;
            }
            "gamma" => {
                arity(2)?;
                gamma = Some(num(fields[1])?);
            }
            "s_base_va" => {
                arity(2)?;
                bases.s_base_va = num(fields[1])?;
            }
            "v_base_v" => {
                arity(2)?;
                bases.v_base_v = num(fields[1])?;
            }
            "impedance_scale" => {
                arity(2)?;
                scale = num(fields[1])?;
            }
            "node" => {
                arity(3)?;
                let houses = fields[2]
                    .parse::<usize>()
                    .map_err(|_| err(lineno, format!("expected a house count, found `{}`", fields[2])))?;
                if nodes.iter().any(|(n, _, _)| n == fields[1]) {
                    return Err(err(lineno, format!("node {} declared twice", fields[1])));
                }
                nodes.push((fields[1].to_string(), houses, lineno));
            }
            "line" => {
                arity(5)?;
                raw.push(RawLine {
                    lineno,
                    parent: fields[1].to_string(),
                    child: fields[2].to_string(),
                    r: num(fields[3])?,
                    x: num(fields[4])?,
                });
            }
            other => return Err(err(lineno, format!("unknown record `{other}`"))),
        }
    }

    let head = head.ok_or_else(|| err(0, "missing `head` record".into()))?;
    let gamma = gamma.ok_or_else(|| err(0, "missing `gamma` record".into()))?;
    if !(bases.s_base_va > 0.0 && bases.v_base_v > 0.0 && scale > 0.0 && v0_pu > 0.0) {
        return Err(err(0, "bases, impedance scale and v0_pu must be positive".into()));
    }
    if nodes.iter().any(|(n, _, _)| *n == head) {
        return Err(err(0, format!("head {head} must not be declared as a node")));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    index.insert(head.as_str(), 0);
    for (i, (n, _, _)) in nodes.iter().enumerate() {
        index.insert(n.as_str(), i + 1);
    }

    let h = nodes.len();
    let zb = bases.z_base_ohm();
    let mut parent = vec![usize::MAX; h + 1];
    let mut fed_on = vec![0usize; h + 1];
    let mut lines = Vec::with_capacity(raw.len());
    for rl in &raw {
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| err(rl.lineno, format!("unknown node {name}")))
        };
        let p = lookup(&rl.parent)?;
        let c = lookup(&rl.child)?;
        if c == 0 {
            return Err(err(rl.lineno, "the feeder head cannot be fed by a segment".into()));
        }
        if p == c {
            return Err(err(rl.lineno, format!("segment connects {} to itself", rl.child)));
        }
        if !(rl.r > 0.0 && rl.x > 0.0) {
            return Err(err(rl.lineno, "resistance and reactance must be positive".into()));
        }
        if parent[c] != usize::MAX {
            return Err(err(
                rl.lineno,
                format!("node {} is already fed by the segment on line {}", rl.child, fed_on[c]),
            ));
        }
        parent[c] = p;
        fed_on[c] = rl.lineno;
        lines.push(Line {
            parent: p,
            child: c,
            r: rl.r * scale / zb,
            x: rl.x * scale / zb,
        });
    }
    for i in 1..=h {
        if parent[i] == usize::MAX {
            return Err(err(
                nodes[i - 1].2,
                format!("node {} is not connected to the feeder head", nodes[i - 1].0),
            ));
        }
    }
    for start in 1..=h {
        let mut n = start;
        for _ in 0..=h {
            if n == 0 {
                break;
            }
            n = parent[n];
        }
        if n != 0 {
            return Err(err(
                fed_on[start],
                format!("node {} lies on a cycle and never reaches the head", nodes[start - 1].0),
            ));
        }
    }

    let names = std::iter::once(head)
        .chain(nodes.iter().map(|(n, _, _)| n.clone()))
        .collect();
    let houses = nodes.iter().map(|(_, c, _)| *c).collect();
    FeederModel::new(names, lines, v0_pu * v0_pu, gamma, houses, bases)
}
