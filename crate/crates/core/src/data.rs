//! Panel data for a system of regression equations.
//!
//! A [`PanelDataset`] holds `J` response series and a pool of `P` covariate
//! columns over `n` time points. Each equation selects its own covariates
//! from the pool through an [`EquationSpec`]. Designs are prepared once at
//! construction (centered when the equation carries an intercept) and shared
//! by every equation with the same covariate set.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Mapping from one equation to its response and covariates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquationSpec {
    /// Column of [`PanelDataset::responses`] holding `Y_j`.
    pub response_index: usize,
    /// Ordered pool columns forming `X_j`.
    pub covariate_indices: Vec<usize>,
    /// Fit an unpenalized constant by centering.
    pub intercept: bool,
}

impl EquationSpec {
    pub fn new(response_index: usize, covariate_indices: Vec<usize>, intercept: bool) -> Self {
        Self {
            response_index,
            covariate_indices,
            intercept,
        }
    }

    pub fn num_covariates(&self) -> usize {
        self.covariate_indices.len()
    }
}

/// Design matrix of one equation together with its Gram matrix.
#[derive(Debug, Clone)]
pub struct Design {
    x: DMatrix<f64>,
    gram: DMatrix<f64>,
    means: DVector<f64>,
    centered: bool,
}

impl Design {
    /// Builds a design, optionally centering every column.
    pub fn new(mut x: DMatrix<f64>, center: bool) -> Self {
        let k = x.ncols();
        let mut means = DVector::zeros(k);
        if center {
            for c in 0..k {
                let m = x.column(c).mean();
                means[c] = m;
                x.column_mut(c).add_scalar_mut(-m);
            }
        }
        let gram = x.tr_mul(&x);
        Self {
            x,
            gram,
            means,
            centered: center,
        }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Column means removed at construction (zeros when not centered).
    pub fn column_means(&self) -> &DVector<f64> {
        &self.means
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Design restricted to `columns`, in the given order.
    pub fn select(&self, columns: &[usize]) -> Design {
        let n = self.n();
        let x = DMatrix::from_fn(n, columns.len(), |t, c| self.x[(t, columns[c])]);
        let gram = DMatrix::from_fn(columns.len(), columns.len(), |a, b| {
            self.gram[(columns[a], columns[b])]
        });
        let means = DVector::from_fn(columns.len(), |c, _| self.means[columns[c]]);
        Design {
            x,
            gram,
            means,
            centered: self.centered,
        }
    }

    /// Design with column `k` removed.
    pub fn without(&self, k: usize) -> Design {
        let cols: Vec<usize> = (0..self.k()).filter(|&c| c != k).collect();
        self.select(&cols)
    }

    /// `X δ` for a coefficient vector of matching length.
    pub fn predict(&self, delta: &[f64]) -> Result<DVector<f64>> {
        if delta.len() != self.k() {
            return config(format!(
                "coefficient vector has length {} but the design has {} columns",
                delta.len(),
                self.k()
            ));
        }
        let mut out = DVector::zeros(self.n());
        for (c, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                out.axpy(d, &self.x.column(c), 1.0);
            }
        }
        Ok(out)
    }

    /// `[(1/n) Σ_t (X_t' δ)²]^{1/2}`.
    pub fn prediction_norm(&self, delta: &[f64]) -> Result<f64> {
        let fitted = self.predict(delta)?;
        Ok((fitted.norm_squared() / self.n() as f64).sqrt())
    }
}

/// Coefficients of one equation with their exact support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefVector {
    pub equation: usize,
    pub values: Vec<f64>,
    /// Sorted indices `k` with `values[k] != 0`.
    pub support: Vec<usize>,
}

impl CoefVector {
    pub fn new(equation: usize, values: Vec<f64>) -> Self {
        let support = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(k, _)| k)
            .collect();
        Self {
            equation,
            values,
            support,
        }
    }

    pub fn zeros(equation: usize, k: usize) -> Self {
        Self::new(equation, vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self - other`, keeping this vector's equation.
    pub fn difference(&self, other: &[f64]) -> Result<CoefVector> {
        if other.len() != self.len() {
            return config("coefficient vectors differ in length");
        }
        Ok(CoefVector::new(
            self.equation,
            self.values.iter().zip(other).map(|(a, b)| a - b).collect(),
        ))
    }
}

/// Coefficients `β_{jk}` under joint inference. `k` indexes the position in
/// equation `j`'s covariate list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSet {
    targets: Vec<(usize, usize)>,
}

impl TargetSet {
    pub fn new(targets: Vec<(usize, usize)>, data: &PanelDataset) -> Result<Self> {
        let mut seen = HashSet::new();
        for &(j, k) in &targets {
            if j >= data.num_equations() {
                return config(format!("target equation {j} out of range"));
            }
            if k >= data.spec(j).num_covariates() {
                return config(format!("target covariate {k} out of range for equation {j}"));
            }
            if !seen.insert((j, k)) {
                return config(format!("duplicate target ({j}, {k})"));
            }
        }
        if targets.is_empty() {
            return config("target set is empty");
        }
        Ok(Self { targets })
    }

    pub fn targets(&self) -> &[(usize, usize)] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Time-indexed responses and covariate pool of a regression system.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    responses: DMatrix<f64>,
    covariate_pool: DMatrix<f64>,
    equation_specs: Vec<EquationSpec>,
    response_names: Vec<String>,
    covariate_names: Vec<String>,
    /// Pool column each response was read from, when it lives in the pool.
    response_pool_columns: Vec<Option<usize>>,
    designs: Vec<Arc<Design>>,
    prepared_responses: Vec<DVector<f64>>,
}

impl PanelDataset {
    /// Validates and prepares a dataset with default column names.
    pub fn new(
        responses: DMatrix<f64>,
        covariate_pool: DMatrix<f64>,
        equation_specs: Vec<EquationSpec>,
    ) -> Result<Self> {
        let response_names = (1..=responses.ncols()).map(|j| format!("y{j}")).collect();
        let covariate_names = (1..=covariate_pool.ncols()).map(|p| format!("x{p}")).collect();
        let response_pool_columns = vec![None; responses.ncols()];
        Self::assemble(
            responses,
            covariate_pool,
            equation_specs,
            response_names,
            covariate_names,
            response_pool_columns,
        )
    }

    fn assemble(
        responses: DMatrix<f64>,
        covariate_pool: DMatrix<f64>,
        equation_specs: Vec<EquationSpec>,
        response_names: Vec<String>,
        covariate_names: Vec<String>,
        response_pool_columns: Vec<Option<usize>>,
    ) -> Result<Self> {
        let n = responses.nrows();
        if n < 4 {
            return config(format!("at least 4 observations are required, got {n}"));
        }
        if covariate_pool.nrows() != n {
            return config(format!(
                "covariate pool has {} rows but responses have {n}",
                covariate_pool.nrows()
            ));
        }
        if responses.iter().chain(covariate_pool.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("dataset contains non-finite values".into()));
        }
        if equation_specs.is_empty() {
            return config("no equations specified");
        }
        let p = covariate_pool.ncols();
        for (j, spec) in equation_specs.iter().enumerate() {
            if spec.response_index >= responses.ncols() {
                return config(format!("equation {j}: response index {} out of range", spec.response_index));
            }
            if spec.covariate_indices.is_empty() {
                return config(format!("equation {j}: no covariates"));
            }
            let mut seen = HashSet::new();
            for &c in &spec.covariate_indices {
                if c >= p {
                    return config(format!("equation {j}: covariate index {c} >= pool width {p}"));
                }
                if !seen.insert(c) {
                    return config(format!("equation {j}: duplicate covariate index {c}"));
                }
                if response_pool_columns[spec.response_index] == Some(c) {
                    return config(format!("equation {j}: response column used as its own covariate"));
                }
            }
        }

        let mut cache: HashMap<(Vec<usize>, bool), Arc<Design>> = HashMap::new();
        let mut designs = Vec::with_capacity(equation_specs.len());
        let mut prepared_responses = Vec::with_capacity(equation_specs.len());
        for spec in &equation_specs {
            let key = (spec.covariate_indices.clone(), spec.intercept);
            let design = cache
                .entry(key)
                .or_insert_with(|| {
                    let x = DMatrix::from_fn(n, spec.covariate_indices.len(), |t, c| {
                        covariate_pool[(t, spec.covariate_indices[c])]
                    });
                    Arc::new(Design::new(x, spec.intercept))
                })
                .clone();
            designs.push(design);
            let mut y: DVector<f64> = responses.column(spec.response_index).into_owned();
            if spec.intercept {
                let m = y.mean();
                y.add_scalar_mut(-m);
            }
            prepared_responses.push(y);
        }

        Ok(Self {
            responses,
            covariate_pool,
            equation_specs,
            response_names,
            covariate_names,
            response_pool_columns,
            designs,
            prepared_responses,
        })
    }

    /// Replaces the default column names.
    pub fn with_names(self, response_names: Vec<String>, covariate_names: Vec<String>) -> Result<Self> {
        if response_names.len() != self.responses.ncols() || covariate_names.len() != self.covariate_pool.ncols() {
            return config("column name count does not match the data");
        }
        Ok(Self {
            response_names,
            covariate_names,
            ..self
        })
    }

    pub fn n(&self) -> usize {
        self.responses.nrows()
    }

    /// Number of equations `J`.
    pub fn num_equations(&self) -> usize {
        self.equation_specs.len()
    }

    /// Pool width `P`.
    pub fn pool_width(&self) -> usize {
        self.covariate_pool.ncols()
    }

    pub fn responses(&self) -> &DMatrix<f64> {
        &self.responses
    }

    pub fn covariate_pool(&self) -> &DMatrix<f64> {
        &self.covariate_pool
    }

    pub fn specs(&self) -> &[EquationSpec] {
        &self.equation_specs
    }

    pub fn spec(&self, j: usize) -> &EquationSpec {
        &self.equation_specs[j]
    }

    pub fn response_names(&self) -> &[String] {
        &self.response_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Name of the `k`-th covariate of equation `j`.
    pub fn covariate_name(&self, j: usize, k: usize) -> &str {
        &self.covariate_names[self.equation_specs[j].covariate_indices[k]]
    }

    /// Name of equation `j`'s response.
    pub fn response_name(&self, j: usize) -> &str {
        &self.response_names[self.equation_specs[j].response_index]
    }

    /// Design of equation `j` (centered when it has an intercept).
    pub fn design(&self, j: usize) -> &Design {
        &self.designs[j]
    }

    pub fn shared_design(&self, j: usize) -> Arc<Design> {
        self.designs[j].clone()
    }

    /// Response of equation `j` (centered when it has an intercept).
    pub fn response(&self, j: usize) -> &DVector<f64> {
        &self.prepared_responses[j]
    }

    /// Mean of the raw response of equation `j`.
    pub fn response_mean(&self, j: usize) -> f64 {
        self.responses.column(self.equation_specs[j].response_index).mean()
    }

    /// Rows `range` as a new dataset with the same equations.
    pub fn rows(&self, range: std::ops::Range<usize>) -> Result<PanelDataset> {
        if range.end > self.n() || range.start >= range.end {
            return config("row range out of bounds");
        }
        let len = range.end - range.start;
        let responses = self.responses.rows(range.start, len).into_owned();
        let pool = self.covariate_pool.rows(range.start, len).into_owned();
        Self::assemble(
            responses,
            pool,
            self.equation_specs.clone(),
            self.response_names.clone(),
            self.covariate_names.clone(),
            self.response_pool_columns.clone(),
        )
    }
}

/// Prediction norm of `delta` under equation `delta.equation`'s design.
pub fn prediction_norm(delta: &CoefVector, data: &PanelDataset) -> Result<f64> {
    if delta.equation >= data.num_equations() {
        return config(format!("equation {} out of range", delta.equation));
    }
    data.design(delta.equation).prediction_norm(&delta.values)
}

pub fn euclidean_norm(delta: &CoefVector) -> f64 {
    delta.values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Column layout of a panel CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSchema {
    pub equations: Vec<EquationSchema>,
    #[serde(default)]
    pub lags: Vec<LagDirective>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquationSchema {
    pub response: String,
    pub covariates: Vec<String>,
    #[serde(default = "default_true")]
    pub intercept: bool,
}

fn default_true() -> bool {
    true
}

/// Adds columns `<column>_lag1 ..= <column>_lag<order>` to the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagDirective {
    pub column: String,
    pub order: usize,
}

/// Reads a panel CSV file.
pub fn load_panel_csv(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<PanelDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_panel_csv(file, schema)
}

/// Reads a panel from any CSV source. Rows must be in time order.
pub fn read_panel_csv<R: Read>(reader: R, schema: &PanelSchema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() {
        return config("CSV file has no columns");
    }
    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(Error::Ingest {
                row: 1,
                column: h.clone(),
                message: "duplicate column name".into(),
            });
        }
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (i, record) in rdr.records().enumerate() {
        // Row numbers are 1-based file lines; the header is line 1.
        let row = i + 2;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { len, expected_len, .. } => Error::Ingest {
                row,
                column: "*".into(),
                message: format!("ragged row: {len} fields, expected {expected_len}"),
            },
            _ => Error::Ingest {
                row,
                column: "*".into(),
                message: e.to_string(),
            },
        })?;
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let value: f64 = cell.parse().map_err(|_| Error::Ingest {
                row,
                column: headers[c].clone(),
                message: if cell.is_empty() {
                    "missing value".into()
                } else {
                    format!("non-numeric cell '{cell}'")
                },
            })?;
            if !value.is_finite() {
                return Err(Error::Ingest {
                    row,
                    column: headers[c].clone(),
                    message: "non-finite value".into(),
                });
            }
            columns[c].push(value);
        }
    }

    let mut names = headers.clone();
    let mut index: HashMap<String, usize> = headers.iter().enumerate().map(|(i, h)| (h.clone(), i)).collect();
    let mut max_lag = 0;
    for lag in &schema.lags {
        let &src = index.get(&lag.column).ok_or_else(|| Error::Ingest {
            row: 1,
            column: lag.column.clone(),
            message: "unknown column in lag directive".into(),
        })?;
        if lag.order == 0 {
            return config(format!("lag order for '{}' must be positive", lag.column));
        }
        max_lag = max_lag.max(lag.order);
        for l in 1..=lag.order {
            let name = format!("{}_lag{l}", lag.column);
            if index.contains_key(&name) {
                return config(format!("lag column '{name}' already exists"));
            }
            let src_col = &columns[src];
            let shifted: Vec<f64> = (0..src_col.len())
                .map(|t| if t >= l { src_col[t - l] } else { f64::NAN })
                .collect();
            index.insert(name.clone(), names.len());
            names.push(name);
            columns.push(shifted);
        }
    }

    let total = columns[0].len();
    if total <= max_lag {
        return config("not enough rows to materialize lags");
    }
    let n = total - max_lag;
    let pool = DMatrix::from_fn(n, columns.len(), |t, c| columns[c][t + max_lag]);

    let lookup = |name: &str| -> Result<usize> {
        index.get(name).copied().ok_or_else(|| Error::Ingest {
            row: 1,
            column: name.to_string(),
            message: "unknown column name".into(),
        })
    };

    let mut response_names = Vec::new();
    let mut response_pool_columns = Vec::new();
    let mut specs = Vec::new();
    for eq in &schema.equations {
        let rcol = lookup(&eq.response)?;
        let ridx = match response_pool_columns.iter().position(|c| *c == Some(rcol)) {
            Some(i) => i,
            None => {
                response_pool_columns.push(Some(rcol));
                response_names.push(eq.response.clone());
                response_pool_columns.len() - 1
            }
        };
        let covs = eq.covariates.iter().map(|c| lookup(c)).collect::<Result<Vec<_>>>()?;
        specs.push(EquationSpec::new(ridx, covs, eq.intercept));
    }
    let responses = DMatrix::from_fn(n, response_pool_columns.len(), |t, j| {
        pool[(t, response_pool_columns[j].unwrap())]
    });
    PanelDataset::assemble(responses, pool, specs, response_names, names, response_pool_columns)
}

/// Formats a value with 17 significant digits.
pub fn format_exact(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the dataset (lags already materialized) and returns a schema that
/// reloads it exactly.
pub fn write_panel_csv<W: Write>(data: &PanelDataset, writer: W) -> Result<PanelSchema> {
    let mut header: Vec<String> = data.covariate_names.clone();
    // Responses not already present in the pool get their own columns.
    let mut response_columns = Vec::new();
    let mut response_header = Vec::new();
    for (j, pc) in data.response_pool_columns.iter().enumerate() {
        match pc {
            Some(c) => response_header.push(data.covariate_names[*c].clone()),
            None => {
                let mut name = data.response_names[j].clone();
                while header.contains(&name) {
                    name.push('_');
                }
                header.push(name.clone());
                response_columns.push(j);
                response_header.push(name);
            }
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&header)?;
    for t in 0..data.n() {
        let mut row: Vec<String> = (0..data.pool_width()).map(|c| format_exact(data.covariate_pool[(t, c)])).collect();
        row.extend(response_columns.iter().map(|&j| format_exact(data.responses[(t, j)])));
        w.write_record(&row)?;
    }
    w.flush()?;
    let equations = data
        .equation_specs
        .iter()
        .map(|s| EquationSchema {
            response: response_header[s.response_index].clone(),
            covariates: s.covariate_indices.iter().map(|&c| data.covariate_names[c].clone()).collect(),
            intercept: s.intercept,
        })
        .collect();
    Ok(PanelSchema {
        equations,
        lags: Vec::new(),
    })
}

pub fn save_panel_csv(data: &PanelDataset, path: impl AsRef<Path>) -> Result<PanelSchema> {
    let file = std::fs::File::create(path.as_ref())?;
    write_panel_csv(data, std::io::BufWriter::new(file))
}
