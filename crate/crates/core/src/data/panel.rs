use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MeError, Result};

/// Set of proxies observed for a subject, as a bit mask over proxy indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pattern(pub u32);

impl Pattern {
    pub fn full(k: usize) -> Self {
        Pattern(((1u64 << k) - 1) as u32)
    }

    pub fn from_members(members: &[usize]) -> Self {
        Pattern(members.iter().fold(0u32, |m, &j| m | (1 << j)))
    }

    pub fn contains(self, j: usize) -> bool {
        self.0 & (1 << j) != 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn members(self, k: usize) -> Vec<usize> {
        (0..k).filter(|&j| self.contains(j)).collect()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

/// Subjects sharing one missingness pattern.
#[derive(Debug, Clone)]
pub struct PatternGroup {
    pub pattern: Pattern,
    pub rows: Vec<usize>,
}

/// Observed data: outcome, error-free covariates and `k` proxy series for
/// an error-prone covariate of dimension `p`, with a missingness mask.
///
/// Each proxy series is stored as its own `n x p` column-major matrix.
/// Values under a masked cell are kept (generated panels use them for oracle
/// checks) but no estimator reads them.
#[derive(Debug, Clone)]
pub struct ProxyPanel {
    y: Vec<f64>,
    z: DMatrix<f64>,
    proxies: Vec<DMatrix<f64>>,
    mask: Vec<Pattern>,
    ids: Vec<String>,
    x_true: Option<DMatrix<f64>>,
}

impl ProxyPanel {
    /// Builds a panel; `observed[i][j]` says whether proxy `j` was measured
    /// for subject `i`.
    pub fn new(
        y: Vec<f64>,
        z: DMatrix<f64>,
        proxies: Vec<DMatrix<f64>>,
        observed: &[Vec<bool>],
    ) -> Result<Self> {
        let n = y.len();
        let k = proxies.len();
        if k == 0 {
            return Err(MeError::Config("panel needs at least one proxy".into()));
        }
        if k > 31 {
            return Err(MeError::Config("at most 31 proxies are supported".into()));
        }
        if z.nrows() != n {
            return Err(MeError::Config(format!(
                "z has {} rows, expected {n}",
                z.nrows()
            )));
        }
        let p = proxies[0].ncols();
        if p == 0 {
            return Err(MeError::Config("proxy dimension must be positive".into()));
        }
        for (j, m) in proxies.iter().enumerate() {
            if m.nrows() != n || m.ncols() != p {
                return Err(MeError::Config(format!(
                    "proxy {} has shape {}x{}, expected {n}x{p}",
                    j + 1,
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if observed.len() != n {
            return Err(MeError::Config("mask row count differs from n".into()));
        }
        let mut mask = Vec::with_capacity(n);
        for (i, row) in observed.iter().enumerate() {
            if row.len() != k {
                return Err(MeError::Config(format!("mask row {i} has wrong length")));
            }
            let members: Vec<usize> = (0..k).filter(|&j| row[j]).collect();
            mask.push(Pattern::from_members(&members));
        }
        let panel = ProxyPanel {
            y,
            z,
            proxies,
            mask,
            ids: (1..=n).map(|i| i.to_string()).collect(),
            x_true: None,
        };
        panel.validate()?;
        Ok(panel)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n() {
            if self.mask[i].is_empty() {
                return Err(MeError::Data(format!(
                    "subject {} has no observed proxy",
                    self.ids[i]
                )));
            }
            if !self.y[i].is_finite() {
                return Err(MeError::Data(format!("non-finite outcome for subject {}", self.ids[i])));
            }
            for c in 0..self.q() {
                if !self.z[(i, c)].is_finite() {
                    return Err(MeError::Data(format!(
                        "non-finite covariate for subject {}",
                        self.ids[i]
                    )));
                }
            }
            for j in 0..self.k() {
                if self.observed(i, j) {
                    for c in 0..self.p() {
                        if !self.proxies[j][(i, c)].is_finite() {
                            return Err(MeError::Data(format!(
                                "non-finite proxy {} for subject {}",
                                j + 1,
                                self.ids[i]
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n() {
            return Err(MeError::Config("id count differs from n".into()));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn with_x_true(mut self, x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != self.n() || x.ncols() != self.p() {
            return Err(MeError::Config("true covariate has wrong shape".into()));
        }
        self.x_true = Some(x);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.proxies.len()
    }

    pub fn p(&self) -> usize {
        self.proxies[0].ncols()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Proxy series `j` as an `n x p` matrix (masked rows included).
    pub fn proxy(&self, j: usize) -> &DMatrix<f64> {
        &self.proxies[j]
    }

    pub fn value(&self, i: usize, j: usize, c: usize) -> f64 {
        self.proxies[j][(i, c)]
    }

    pub fn observed(&self, i: usize, j: usize) -> bool {
        self.mask[i].contains(j)
    }

    pub fn pattern(&self, i: usize) -> Pattern {
        self.mask[i]
    }

    /// Number of observed proxies for subject `i`.
    pub fn kappa(&self, i: usize) -> usize {
        self.mask[i].count()
    }

    pub fn x_true(&self) -> Option<&DMatrix<f64>> {
        self.x_true.as_ref()
    }

    pub fn is_complete(&self) -> bool {
        let full = Pattern::full(self.k());
        self.mask.iter().all(|&m| m == full)
    }

    /// Subjects grouped by missingness pattern, ordered by pattern bits.
    pub fn patterns(&self) -> Vec<PatternGroup> {
        let mut map: std::collections::BTreeMap<Pattern, Vec<usize>> = Default::default();
        for (i, &m) in self.mask.iter().enumerate() {
            map.entry(m).or_default().push(i);
        }
        map.into_iter()
            .map(|(pattern, rows)| PatternGroup { pattern, rows })
            .collect()
    }

    /// Panel restricted to (possibly repeated) rows.
    pub fn select_rows(&self, rows: &[usize]) -> ProxyPanel {
        let pick = |m: &DMatrix<f64>| {
            DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
        };
        ProxyPanel {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            z: pick(&self.z),
            proxies: self.proxies.iter().map(pick).collect(),
            mask: rows.iter().map(|&i| self.mask[i]).collect(),
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            x_true: self.x_true.as_ref().map(pick),
        }
    }

    /// Panel keeping only the listed proxies. Subjects left with no observed
    /// proxy are dropped.
    pub fn select_proxies(&self, keep: &[usize]) -> Result<ProxyPanel> {
        if keep.is_empty() || keep.iter().any(|&j| j >= self.k()) {
            return Err(MeError::Config("invalid proxy selection".into()));
        }
        let rows: Vec<usize> = (0..self.n())
            .filter(|&i| keep.iter().any(|&j| self.observed(i, j)))
            .collect();
        let base = self.select_rows(&rows);
        let mask = base
            .mask
            .iter()
            .map(|m| {
                let members: Vec<usize> = keep
                    .iter()
                    .enumerate()
                    .filter(|(_, &j)| m.contains(j))
                    .map(|(new, _)| new)
                    .collect();
                Pattern::from_members(&members)
            })
            .collect();
        Ok(ProxyPanel {
            proxies: keep.iter().map(|&j| base.proxies[j].clone()).collect(),
            mask,
            ..base
        })
    }

    /// Copy whose error-free covariates are dropped.
    pub fn without_z(&self) -> ProxyPanel {
        ProxyPanel {
            z: DMatrix::zeros(self.n(), 0),
            ..self.clone()
        }
    }

    /// Copy with proxy `j` replaced by an affine transform `(x - shift) / scale`
    /// applied componentwise.
    pub fn affine_proxy(&self, j: usize, shift: &[f64], scale: &[f64]) -> ProxyPanel {
        let mut out = self.clone();
        for c in 0..self.p() {
            for i in 0..self.n() {
                out.proxies[j][(i, c)] = (self.proxies[j][(i, c)] - shift[c]) / scale[c];
            }
        }
        out
    }

    /// Mutable access to a stored proxy value. Used by tests that check masked
    /// entries are never read.
    pub fn set_value(&mut self, i: usize, j: usize, c: usize, v: f64) {
        self.proxies[j][(i, c)] = v;
    }

    /// Weighted proxy average for subject `i` with weights renormalised over
    /// the observed proxies. Writes `p` values into `out`.
    pub fn combined_proxy(&self, i: usize, alpha: &[f64], out: &mut [f64]) {
        let m = self.mask[i];
        let total: f64 = (0..self.k()).filter(|&j| m.contains(j)).map(|j| alpha[j]).sum();
        out.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.k() {
            if m.contains(j) {
                let w = alpha[j] / total;
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * self.proxies[j][(i, c)];
                }
            }
        }
    }
}

/// Error structure assumed for a proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorStructure {
    #[default]
    Additive,
    Multiplicative,
}

/// Assumptions about one proxy: its error structure, whether its intercept is
/// known to be zero (`in_j0`), whether its scale is known to be one
/// (`in_j1`), and optional known non-default values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySpec {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub structure: ErrorStructure,
    pub in_j0: bool,
    pub in_j1: bool,
    /// Known intercept. Treated like `in_j0` after shifting the proxy.
    #[serde(default)]
    pub eta0: Option<Vec<f64>>,
    /// Known scale. Treated like `in_j1` after rescaling the proxy.
    #[serde(default)]
    pub eta1: Option<Vec<f64>>,
}

impl ProxySpec {
    pub fn unbiased() -> Self {
        ProxySpec {
            name: None,
            structure: ErrorStructure::Additive,
            in_j0: true,
            in_j1: true,
            eta0: None,
            eta1: None,
        }
    }

    pub fn unrestricted() -> Self {
        ProxySpec {
            in_j0: false,
            in_j1: false,
            ..Self::unbiased()
        }
    }

    pub fn with_flags(in_j0: bool, in_j1: bool) -> Self {
        ProxySpec {
            in_j0,
            in_j1,
            ..Self::unbiased()
        }
    }

    /// Whether the intercept is pinned, either at zero or at a known value.
    pub fn intercept_known(&self) -> bool {
        self.in_j0 || self.eta0.is_some()
    }

    pub fn scale_known(&self) -> bool {
        self.in_j1 || self.eta1.is_some()
    }
}

/// Identification assumptions for all proxies of a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModelSpec {
    pub proxies: Vec<ProxySpec>,
}

impl ErrorModelSpec {
    pub fn all_unbiased(k: usize) -> Self {
        ErrorModelSpec {
            proxies: vec![ProxySpec::unbiased(); k],
        }
    }

    pub fn k(&self) -> usize {
        self.proxies.len()
    }

    pub fn j0(&self) -> Vec<usize> {
        (0..self.k()).filter(|&j| self.proxies[j].intercept_known()).collect()
    }

    pub fn j1(&self) -> Vec<usize> {
        (0..self.k()).filter(|&j| self.proxies[j].scale_known()).collect()
    }

    pub fn in_j0(&self, j: usize) -> bool {
        self.proxies[j].intercept_known()
    }

    pub fn in_j1(&self, j: usize) -> bool {
        self.proxies[j].scale_known()
    }

    /// Checks the identification requirements for a covariate of dimension
    /// `p`, with or without error-free covariates in the identification.
    pub fn validate(&self, p: usize, has_z: bool) -> Result<()> {
        let k = self.k();
        if k < 2 {
            return Err(MeError::Config("at least two proxies are required".into()));
        }
        if self.j0().is_empty() {
            return Err(MeError::Config("at least one proxy must have known intercept".into()));
        }
        let j1 = self.j1().len();
        if has_z && j1 < 1 {
            return Err(MeError::Config("at least one proxy must have known scale".into()));
        }
        if !has_z && j1 < 2 {
            return Err(MeError::Config(
                "without error-free covariates at least two proxies must have known scale".into(),
            ));
        }
        for (j, s) in self.proxies.iter().enumerate() {
            for v in [&s.eta0, &s.eta1].into_iter().flatten() {
                if v.len() != p {
                    return Err(MeError::Config(format!(
                        "known eta for proxy {} has length {}, expected {p}",
                        j + 1,
                        v.len()
                    )));
                }
            }
            if let Some(e1) = &s.eta1 {
                if e1.iter().any(|&v| !(v > 0.0)) {
                    return Err(MeError::Config(format!(
                        "known eta1 for proxy {} must be positive",
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Spec restricted to a subset of proxies.
    pub fn select(&self, keep: &[usize]) -> ErrorModelSpec {
        ErrorModelSpec {
            proxies: keep.iter().map(|&j| self.proxies[j].clone()).collect(),
        }
    }
}
