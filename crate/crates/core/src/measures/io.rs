//! Plain-text transport instances and CSV results.
//!
//! ```text
//! # optional comments
//! id two_point          (optional)
//! labels a b
//! coords 0 1            (optional)
//! p 1                   (optional, default 1)
//! 0.7 0.3               weights of mu
//! 0.4 0.6               weights of nu
//! 0 1                   cost matrix, one row per label
//! 1 0
//! ```
//!
//! Several instances may share a file; each starts at its `id` or `labels`
//! line.

use std::fmt::Write as _;

use super::{
    kantorovich_dual, wasserstein_coupling_tv, CostMatrix, DiscreteMeasure, Point,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TransportInstance {
    pub id: String,
    pub mu: DiscreteMeasure,
    pub nu: DiscreteMeasure,
    pub cost: CostMatrix,
    pub p: f64,
}

#[derive(Default)]
struct Partial {
    id: Option<String>,
    labels: Option<Vec<String>>,
    coords: Option<Vec<f64>>,
    p: Option<f64>,
    rows: Vec<Vec<f64>>,
    start_line: usize,
}

fn numbers(line_no: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("`{f}` is not a number"),
            })
        })
        .collect()
}

impl Partial {
    fn finish(self, index: usize) -> Result<TransportInstance> {
        let line = self.start_line;
        let err = |msg: String| Error::Parse { line, msg };
        let labels = self.labels.ok_or_else(|| err("missing `labels` line".into()))?;
        let n = labels.len();
        if self.rows.len() != n + 2 {
            return Err(err(format!(
                "expected 2 weight lines and {n} cost rows, found {} numeric lines",
                self.rows.len()
            )));
        }
        if let Some(r) = self.rows.iter().find(|r| r.len() != n) {
            return Err(err(format!("numeric line has {} entries, expected {n}", r.len())));
        }
        let points: Vec<Point> = match &self.coords {
            Some(c) if c.len() != n => {
                return Err(err(format!("`coords` has {} entries, expected {n}", c.len())))
            }
            Some(c) => labels
                .iter()
                .zip(c)
                .map(|(l, &x)| Point {
                    label: l.clone(),
                    coord: Some(x),
                })
                .collect(),
            None => labels.iter().map(Point::new).collect(),
        };
        let mu = DiscreteMeasure::new(points.clone(), self.rows[0].clone())?;
        let nu = DiscreteMeasure::new(points, self.rows[1].clone())?;
        let entries: Vec<f64> = self.rows[2..].iter().flatten().copied().collect();
        let cost = CostMatrix::metric(n, entries.clone()).or_else(|_| CostMatrix::new(n, n, entries))?;
        Ok(TransportInstance {
            id: self.id.unwrap_or_else(|| format!("instance{index}")),
            mu,
            nu,
            cost,
            p: self.p.unwrap_or(1.0),
        })
    }
}

pub fn parse_instances(text: &str) -> Result<Vec<TransportInstance>> {
    let mut out = Vec::new();
    let mut current: Option<Partial> = None;
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let starts_new = match fields[0] {
            "id" => true,
            "labels" => current.as_ref().is_none_or(|c| c.labels.is_some()),
            _ => false,
        };
        if starts_new {
            if let Some(done) = current.take() {
                out.push(done.finish(out.len())?);
            }
            current = Some(Partial {
                start_line: line_no,
                ..Partial::default()
            });
        }
        let Some(cur) = current.as_mut() else {
            return Err(Error::Parse {
                line: line_no,
                msg: "instance must start with `labels` or `id`".into(),
            });
        };
        match fields[0] {
            "id" => cur.id = Some(fields[1..].join(" ")),
            "labels" => cur.labels = Some(fields[1..].iter().map(|s| s.to_string()).collect()),
            "coords" => cur.coords = Some(numbers(line_no, &fields[1..])?),
            "p" => {
                let v = numbers(line_no, &fields[1..])?;
                cur.p = v.first().copied();
            }
            _ => cur.rows.push(numbers(line_no, &fields)?),
        }
    }
    if let Some(done) = current.take() {
        out.push(done.finish(out.len())?);
    }
    Ok(out)
}

/// One row of the transport results table.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportRow {
    pub instance_id: String,
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    /// NaN when the two measures live on different ground sets.
    pub tv_half: f64,
}

pub const RESULTS_HEADER: &str = "instance_id,primal,dual,gap,tv_half";

/// Solves one instance; `primal` is `W_p^p` so that it is comparable with `dual`.
pub fn evaluate(inst: &TransportInstance) -> Result<TransportRow> {
    let sol = super::solve_transport(&inst.mu, &inst.nu, &inst.cost, inst.p)?;
    let (dual, _) = kantorovich_dual(&inst.mu, &inst.nu, &inst.cost, inst.p)?;
    let tv_half = if inst.mu.same_ground_set(&inst.nu) {
        wasserstein_coupling_tv(&inst.mu, &inst.nu)?.0
    } else {
        f64::NAN
    };
    Ok(TransportRow {
        instance_id: inst.id.clone(),
        primal: sol.cost_p,
        dual,
        gap: (sol.cost_p - dual).abs(),
        tv_half,
    })
}

pub fn results_csv(rows: &[TransportRow]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.15e},{:.15e},{:.3e},{:.15e}",
            r.instance_id, r.primal, r.dual, r.gap, r.tv_half
        );
    }
    s
}
