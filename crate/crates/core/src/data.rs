//! Column tables, role assignments and the numeric two-stage problem
//! extracted from them.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, column-oriented table of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let t = Self { names, columns };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.columns.len() {
            return Err(Error::DimensionMismatch {
                expected: self.names.len(),
                got: self.columns.len(),
            });
        }
        let n = self.nrows();
        for c in &self.columns {
            if c.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: c.len(),
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("table column"));
            }
        }
        for (i, a) in self.names.iter().enumerate() {
            if self.names[..i].contains(a) {
                return Err(Error::Config(format!("duplicate column `{a}`")));
            }
        }
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    /// Rows × selected columns as a dense matrix.
    pub fn matrix(&self, cols: &[String]) -> Result<DMatrix<f64>> {
        let data: Vec<&[f64]> = cols.iter().map(|c| self.column(c)).collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(self.nrows(), cols.len(), |i, j| {
            data[j][i]
        }))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Table {
        Table {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.names)?;
        for i in 0..self.nrows() {
            wr.write_record(self.columns.iter().map(|c| c[i].to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let names: Vec<String> = rd.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != names.len() {
                return Err(Error::DimensionMismatch {
                    expected: names.len(),
                    got: rec.len(),
                });
            }
            for (c, field) in columns.iter_mut().zip(rec.iter()) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("non-numeric CSV field `{field}`")))?;
                c.push(v);
            }
        }
        Self::new(names, columns)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Assignment of table columns to the outcome and to the W, V, Z roles.
/// An empty `w` means W = ∅.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub y: String,
    #[serde(default)]
    pub w: Vec<String>,
    pub v: Vec<String>,
    pub z: Vec<String>,
}

impl Roles {
    pub fn w_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Observations with roles. In the fusion layout `primary` carries
/// (Y, W, V) and `fusion` carries (V, Z); otherwise `primary` carries all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub primary: Table,
    pub fusion: Option<Table>,
    pub roles: Roles,
}

impl Dataset {
    pub fn new(primary: Table, fusion: Option<Table>, roles: Roles) -> Result<Self> {
        let d = Self {
            primary,
            fusion,
            roles,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn is_fusion(&self) -> bool {
        self.fusion.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        self.primary.validate()?;
        let r = &self.roles;
        if r.v.is_empty() || r.z.is_empty() {
            return Err(Error::Config(
                "roles need at least one V and one Z column".into(),
            ));
        }
        self.primary.column(&r.y)?;
        for c in r.w.iter().chain(&r.v) {
            self.primary.column(c)?;
        }
        let second = self.fusion.as_ref().unwrap_or(&self.primary);
        second.validate()?;
        for c in r.v.iter().chain(&r.z) {
            second.column(c)?;
        }
        if self.primary.nrows() < 1 || second.nrows() < 1 {
            return Err(Error::Config("empty table".into()));
        }
        Ok(())
    }

    /// Numeric arrays for the two regression stages.
    pub fn problem(&self) -> Result<Problem> {
        self.validate()?;
        let r = &self.roles;
        let y = DVector::from_column_slice(self.primary.column(&r.y)?);
        let w1 = if r.w.is_empty() {
            None
        } else {
            Some(self.primary.matrix(&r.w)?)
        };
        let v1 = self.primary.matrix(&r.v)?;
        let second = self.fusion.as_ref().unwrap_or(&self.primary);
        Ok(Problem {
            y,
            w1,
            v1,
            v2: second.matrix(&r.v)?,
            z2: second.matrix(&r.z)?,
            fusion: self.fusion.is_some(),
        })
    }
}

/// Numeric stage-1 data (Y, W, V) and stage-2 data (V, Z). Without fusion
/// both stages share rows and `v2 == v1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub y: DVector<f64>,
    pub w1: Option<DMatrix<f64>>,
    pub v1: DMatrix<f64>,
    pub v2: DMatrix<f64>,
    pub z2: DMatrix<f64>,
    pub fusion: bool,
}

impl Problem {
    pub fn single(
        y: DVector<f64>,
        w: Option<DMatrix<f64>>,
        v: DMatrix<f64>,
        z: DMatrix<f64>,
    ) -> Result<Self> {
        let p = Self {
            y,
            w1: w,
            v2: v.clone(),
            v1: v,
            z2: z,
            fusion: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn fused(
        y: DVector<f64>,
        w1: Option<DMatrix<f64>>,
        v1: DMatrix<f64>,
        v2: DMatrix<f64>,
        z2: DMatrix<f64>,
    ) -> Result<Self> {
        let p = Self {
            y,
            w1,
            v1,
            v2,
            z2,
            fusion: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n1 = self.y.len();
        let check = |got: usize, expected: usize| {
            if got == expected {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected, got })
            }
        };
        check(self.v1.nrows(), n1)?;
        if let Some(w) = &self.w1 {
            check(w.nrows(), n1)?;
        }
        check(self.z2.nrows(), self.v2.nrows())?;
        check(self.v2.ncols(), self.v1.ncols())?;
        if !self.fusion {
            check(self.v2.nrows(), n1)?;
        }
        if n1 == 0 || self.v2.nrows() == 0 {
            return Err(Error::Config("empty problem".into()));
        }
        Ok(())
    }

    pub fn n1(&self) -> usize {
        self.y.len()
    }

    pub fn n2(&self) -> usize {
        self.z2.nrows()
    }

    pub fn w_dim(&self) -> usize {
        self.w1.as_ref().map_or(0, |w| w.ncols())
    }

    pub fn v_dim(&self) -> usize {
        self.v1.ncols()
    }

    pub fn z_dim(&self) -> usize {
        self.z2.ncols()
    }

    /// Row subset. Without fusion `rows2` is ignored and both stages use
    /// `rows1`.
    pub fn select(&self, rows1: &[usize], rows2: &[usize]) -> Problem {
        let pick = |m: &DMatrix<f64>, rows: &[usize]| m.select_rows(rows.iter());
        let rows2 = if self.fusion { rows2 } else { rows1 };
        Problem {
            y: DVector::from_iterator(rows1.len(), rows1.iter().map(|&r| self.y[r])),
            w1: self.w1.as_ref().map(|w| pick(w, rows1)),
            v1: pick(&self.v1, rows1),
            v2: pick(&self.v2, rows2),
            z2: pick(&self.z2, rows2),
            fusion: self.fusion,
        }
    }

    /// Same data seen through the fusion formulas with `D₂ = D₁`.
    pub fn as_fused(&self) -> Problem {
        Problem {
            fusion: true,
            ..self.clone()
        }
    }
}

/// Column-wise sample standard deviations, floored at `floor`.
pub fn column_std(m: &DMatrix<f64>, floor: f64) -> Vec<f64> {
    let n = m.nrows();
    (0..m.ncols())
        .map(|c| {
            let col = m.column(c);
            let mu = col.mean();
            let var = col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
            var.sqrt().max(floor)
        })
        .collect()
}
