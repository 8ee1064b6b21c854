use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::panel::ProxyPanel;
use crate::error::{MeError, Result};

/// Transform applied to raw proxy readings on input (and inverted on output).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Identity,
    /// `log(x - shift)`; readings at or below `shift` are rejected.
    LogShift { shift: f64 },
}

impl Transform {
    fn forward(self, v: f64) -> Option<f64> {
        match self {
            Transform::Identity => Some(v),
            Transform::LogShift { shift } => (v > shift).then(|| (v - shift).ln()),
        }
    }

    fn inverse(self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::LogShift { shift } => shift + v.exp(),
        }
    }
}

/// Column layout of a panel file. `proxies[j]` lists the `p` columns of
/// proxy `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSchema {
    #[serde(default)]
    pub id: Option<String>,
    pub y: String,
    #[serde(default)]
    pub z: Vec<String>,
    pub proxies: Vec<Vec<String>>,
    #[serde(default)]
    pub transform: Transform,
}

impl PanelSchema {
    /// Default names: `id`, `y`, `z1..zq`, and `x1..xk` for scalar proxies
    /// or `x{j}_{c}` for vector proxies.
    pub fn default_for(p: usize, q: usize, k: usize) -> Self {
        let proxies = (1..=k)
            .map(|j| {
                if p == 1 {
                    vec![format!("x{j}")]
                } else {
                    (1..=p).map(|c| format!("x{j}_{c}")).collect()
                }
            })
            .collect();
        PanelSchema {
            id: Some("id".into()),
            y: "y".into(),
            z: (1..=q).map(|c| format!("z{c}")).collect(),
            proxies,
            transform: Transform::Identity,
        }
    }

    /// Layout of the two-visit blood-pressure cohort files: four systolic
    /// readings analysed on the `log(SBP - 50)` scale.
    pub fn cohort() -> Self {
        PanelSchema {
            id: Some("id".into()),
            y: "chd".into(),
            z: vec!["age".into(), "smoke".into(), "chol".into()],
            proxies: ["sbp21", "sbp22", "sbp31", "sbp32"]
                .iter()
                .map(|s| vec![s.to_string()])
                .collect(),
            transform: Transform::LogShift { shift: 50.0 },
        }
    }

    /// Infers the default layout from a header row.
    pub fn infer(headers: &[String]) -> Result<Self> {
        let has = |name: &str| headers.iter().any(|h| h == name);
        if !has("y") {
            return Err(MeError::Config("header has no 'y' column".into()));
        }
        let mut q = 0;
        while has(&format!("z{}", q + 1)) {
            q += 1;
        }
        let mut k = 0;
        let mut p = 0;
        if has("x1") {
            while has(&format!("x{}", k + 1)) {
                k += 1;
            }
            p = 1;
        } else if has("x1_1") {
            while has(&format!("x1_{}", p + 1)) {
                p += 1;
            }
            while has(&format!("x{}_1", k + 1)) {
                k += 1;
            }
        }
        if k == 0 {
            return Err(MeError::Config("header has no proxy columns".into()));
        }
        let mut schema = Self::default_for(p, q, k);
        if !has("id") {
            schema.id = None;
        }
        Ok(schema)
    }

    pub fn p(&self) -> usize {
        self.proxies.first().map_or(0, |v| v.len())
    }
}

fn column(headers: &[String], name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| MeError::Config(format!("missing column '{name}'")))
}

/// Reads a panel from any reader. Empty proxy cells become masked entries.
pub fn read_panel<R: Read>(reader: R, schema: Option<&PanelSchema>) -> Result<ProxyPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| MeError::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let schema = match schema {
        Some(s) => s.clone(),
        None => PanelSchema::infer(&headers)?,
    };
    let p = schema.p();
    if p == 0 || schema.proxies.iter().any(|v| v.len() != p) {
        return Err(MeError::Config("every proxy needs the same number of columns".into()));
    }
    let id_col = schema.id.as_deref().map(|c| column(&headers, c)).transpose()?;
    let y_col = column(&headers, &schema.y)?;
    let z_cols: Vec<usize> = schema.z.iter().map(|c| column(&headers, c)).collect::<Result<_>>()?;
    let x_cols: Vec<Vec<usize>> = schema
        .proxies
        .iter()
        .map(|cols| cols.iter().map(|c| column(&headers, c)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let k = x_cols.len();
    let q = z_cols.len();

    let mut ids = Vec::new();
    let mut y = Vec::new();
    let mut zrows: Vec<Vec<f64>> = Vec::new();
    let mut xvals: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut observed: Vec<Vec<bool>> = Vec::new();

    for rec in rdr.records() {
        let rec = rec.map_err(|e| MeError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |col: usize, what: &str| -> Result<f64> {
            let cell = rec.get(col).unwrap_or("");
            if cell.is_empty() {
                return Err(MeError::Data(format!("line {line}: empty {what}")));
            }
            let v: f64 = cell.parse().map_err(|_| MeError::Parse {
                line,
                msg: format!("cannot parse '{cell}' in column '{}'", headers[col]),
            })?;
            if !v.is_finite() {
                return Err(MeError::Data(format!("line {line}: non-finite {what}")));
            }
            Ok(v)
        };
        ids.push(match id_col {
            Some(c) => rec.get(c).unwrap_or("").to_string(),
            None => (y.len() + 1).to_string(),
        });
        y.push(num(y_col, "outcome")?);
        zrows.push(z_cols.iter().map(|&c| num(c, "covariate")).collect::<Result<_>>()?);
        let mut obs = vec![false; k];
        for j in 0..k {
            let empty = x_cols[j].iter().all(|&c| rec.get(c).unwrap_or("").is_empty());
            if empty {
                xvals[j].extend(std::iter::repeat_n(f64::NAN, p));
                continue;
            }
            obs[j] = true;
            for &c in &x_cols[j] {
                let raw = num(c, "proxy")?;
                let v = schema.transform.forward(raw).ok_or_else(|| {
                    MeError::Data(format!(
                        "line {line}: value {raw} in column '{}' is outside the transform domain",
                        headers[c]
                    ))
                })?;
                xvals[j].push(v);
            }
        }
        if obs.iter().all(|&o| !o) {
            return Err(MeError::Data(format!("line {line}: every proxy is empty")));
        }
        observed.push(obs);
    }
    let n = y.len();
    if n == 0 {
        return Err(MeError::Data("panel file has no rows".into()));
    }
    let z = DMatrix::from_fn(n, q, |i, c| zrows[i][c]);
    let proxies = xvals
        .into_iter()
        .map(|v| DMatrix::from_row_slice(n, p, &v))
        .collect();
    ProxyPanel::new(y, z, proxies, &observed)?.with_ids(ids)
}

pub fn read_panel_csv(path: &Path, schema: Option<&PanelSchema>) -> Result<ProxyPanel> {
    let file = std::fs::File::open(path)?;
    read_panel(file, schema)
}

/// Writes a panel; masked cells are left empty and the schema transform is
/// inverted so the file holds raw readings.
pub fn write_panel<W: Write>(panel: &ProxyPanel, writer: W, schema: Option<&PanelSchema>) -> Result<()> {
    let default = PanelSchema::default_for(panel.p(), panel.q(), panel.k());
    let schema = schema.unwrap_or(&default);
    if schema.proxies.len() != panel.k() || schema.z.len() != panel.q() || schema.p() != panel.p() {
        return Err(MeError::Config("schema does not match panel dimensions".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| MeError::Io(std::io::Error::other(e));
    let mut header: Vec<String> = Vec::new();
    if let Some(id) = &schema.id {
        header.push(id.clone());
    }
    header.push(schema.y.clone());
    header.extend(schema.z.iter().cloned());
    for cols in &schema.proxies {
        header.extend(cols.iter().cloned());
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..panel.n() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        if schema.id.is_some() {
            row.push(panel.ids()[i].clone());
        }
        row.push(panel.y()[i].to_string());
        for c in 0..panel.q() {
            row.push(panel.z()[(i, c)].to_string());
        }
        for j in 0..panel.k() {
            for c in 0..panel.p() {
                if panel.observed(i, j) {
                    row.push(schema.transform.inverse(panel.value(i, j, c)).to_string());
                } else {
                    row.push(String::new());
                }
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_panel_csv(panel: &ProxyPanel, path: &Path, schema: Option<&PanelSchema>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_panel(panel, file, schema)
}
