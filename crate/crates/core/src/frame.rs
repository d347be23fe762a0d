//! Unit-level tabular data: treatment, outcome, covariates and image keys.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("column {column} has {got} entries, expected {expected}")]
    LengthMismatch { column: String, expected: usize, got: usize },
    #[error("treatment of unit {index} is {value}, expected 0 or 1")]
    NonBinaryTreatment { index: usize, value: f64 },
    #[error("no treated units")]
    NoTreated,
    #[error("no control units")]
    NoControl,
    #[error("covariate column {0} has zero variance")]
    ConstantCovariate(usize),
    #[error("non-finite value in column {column} at unit {index}")]
    NonFinite { column: String, index: usize },
    #[error("missing value in column {column} at unit {index}")]
    Missing { column: String, index: usize },
    #[error("frame csv: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A validated analysis frame: every unit complete, `w ∈ {0, 1}`, both arms
/// present and every covariate column non-constant.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalFrame {
    pub keys: Vec<String>,
    pub w: Vec<f64>,
    pub y: Vec<f64>,
    /// `N × P`; `P` may be zero.
    pub x: DMatrix<f64>,
    pub lon: Option<Vec<f64>>,
    pub lat: Option<Vec<f64>>,
}

impl CausalFrame {
    pub fn new(keys: Vec<String>, w: Vec<f64>, y: Vec<f64>, x: DMatrix<f64>) -> Result<Self, FrameError> {
        let f = Self { keys, w, y, x, lon: None, lat: None };
        f.check()?;
        Ok(f)
    }

    pub fn with_coords(mut self, lon: Vec<f64>, lat: Vec<f64>) -> Result<Self, FrameError> {
        self.lon = Some(lon);
        self.lat = Some(lat);
        self.check()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    fn check(&self) -> Result<(), FrameError> {
        let n = self.w.len();
        let len_check = |column: &str, got: usize| {
            if got != n {
                Err(FrameError::LengthMismatch { column: column.into(), expected: n, got })
            } else {
                Ok(())
            }
        };
        len_check("y", self.y.len())?;
        len_check("key", self.keys.len())?;
        len_check("x", self.x.nrows())?;
        if let Some(v) = &self.lon {
            len_check("lon", v.len())?;
        }
        if let Some(v) = &self.lat {
            len_check("lat", v.len())?;
        }
        for (i, &w) in self.w.iter().enumerate() {
            if w != 0.0 && w != 1.0 {
                return Err(FrameError::NonBinaryTreatment { index: i, value: w });
            }
        }
        if let Some(i) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(FrameError::NonFinite { column: "y".into(), index: i });
        }
        if let Some(i) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(FrameError::NonFinite { column: "x".into(), index: i % n.max(1) });
        }
        if !self.w.contains(&1.0) {
            return Err(FrameError::NoTreated);
        }
        if !self.w.contains(&0.0) {
            return Err(FrameError::NoControl);
        }
        for (j, col) in self.x.column_iter().enumerate() {
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                return Err(FrameError::ConstantCovariate(j));
            }
        }
        Ok(())
    }
}

/// Frame as read from disk, before missing values are handled.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawFrame {
    pub keys: Vec<Option<String>>,
    pub w: Vec<Option<f64>>,
    pub y: Vec<Option<f64>>,
    /// Row-major, one entry per unit.
    pub x: Vec<Vec<Option<f64>>>,
    pub x_names: Vec<String>,
    pub lon: Vec<Option<f64>>,
    pub lat: Vec<Option<f64>>,
}

fn parse_cell(s: &str) -> Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|e| format!("{s:?}: {e}"))
}

impl RawFrame {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Reads `key,w,y,lon,lat,x1..xP`. Empty cells, `NA` and `NaN` are missing.
    pub fn read_csv(reader: impl Read) -> Result<Self, FrameError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let expected = ["key", "w", "y", "lon", "lat"];
        if header.len() < expected.len() || header[..5] != expected {
            return Err(FrameError::Format(format!("header must start with key,w,y,lon,lat; got {}", header.join(","))));
        }
        let mut f = RawFrame { x_names: header[5..].to_vec(), ..Default::default() };
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let cell = |j: usize| parse_cell(rec.get(j).unwrap_or("")).map_err(|e| FrameError::Format(format!("row {}: {e}", line + 1)));
            let key = rec.get(0).map(str::trim).filter(|k| !k.is_empty() && !k.eq_ignore_ascii_case("na"));
            f.keys.push(key.map(str::to_string));
            f.w.push(cell(1)?);
            f.y.push(cell(2)?);
            f.lon.push(cell(3)?);
            f.lat.push(cell(4)?);
            f.x.push((5..header.len()).map(cell).collect::<Result<_, _>>()?);
        }
        Ok(f)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, FrameError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn from_frame(f: &CausalFrame) -> Self {
        let n = f.len();
        let coord = |v: &Option<Vec<f64>>| v.as_ref().map_or(vec![None; n], |v| v.iter().map(|&x| Some(x)).collect());
        RawFrame {
            keys: f.keys.iter().cloned().map(Some).collect(),
            w: f.w.iter().map(|&v| Some(v)).collect(),
            y: f.y.iter().map(|&v| Some(v)).collect(),
            x: (0..n).map(|i| f.x.row(i).iter().map(|&v| Some(v)).collect()).collect(),
            x_names: (1..=f.n_covariates()).map(|j| format!("x{j}")).collect(),
            lon: coord(&f.lon),
            lat: coord(&f.lat),
        }
    }

    pub fn write_csv(&self, out: impl std::io::Write) -> Result<(), FrameError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["key", "w", "y", "lon", "lat"].iter().map(|s| s.to_string()).collect();
        header.extend(self.x_names.iter().cloned());
        w.write_record(&header)?;
        let fmt = |v: &Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        for i in 0..self.len() {
            let mut rec = vec![self.keys[i].clone().unwrap_or_else(|| "NA".into()), fmt(&self.w[i]), fmt(&self.y[i]), fmt(&self.lon[i]), fmt(&self.lat[i])];
            rec.extend(self.x[i].iter().map(fmt));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    fn row_complete(&self, i: usize) -> bool {
        self.keys[i].is_some() && self.w[i].is_some() && self.y[i].is_some() && self.x[i].iter().all(Option::is_some)
    }

    /// Keeps the listed rows, requiring them complete, and builds a frame.
    /// Constant covariate columns are removed first (their original indices
    /// are returned) since they carry no information and break standardization.
    pub fn select_complete(&self, rows: &[usize]) -> Result<(CausalFrame, Vec<usize>), FrameError> {
        for &i in rows {
            if !self.row_complete(i) {
                let column = if self.keys[i].is_none() {
                    "key"
                } else if self.w[i].is_none() {
                    "w"
                } else if self.y[i].is_none() {
                    "y"
                } else {
                    "x"
                };
                return Err(FrameError::Missing { column: column.into(), index: i });
            }
        }
        let p = self.x_names.len();
        let n = rows.len();
        let x = DMatrix::from_fn(n, p, |r, j| self.x[rows[r]][j].unwrap());
        let varying: Vec<usize> = (0..p).filter(|&j| x.column(j).iter().any(|&v| v != x[(0, j)])).collect();
        let dropped_cols: Vec<usize> = (0..p).filter(|j| !varying.contains(j)).collect();
        let x = x.select_columns(varying.iter());
        let keys = rows.iter().map(|&i| self.keys[i].clone().unwrap()).collect();
        let w = rows.iter().map(|&i| self.w[i].unwrap()).collect();
        let y = rows.iter().map(|&i| self.y[i].unwrap()).collect();
        let mut frame = CausalFrame::new(keys, w, y, x)?;
        let lon: Option<Vec<f64>> = rows.iter().map(|&i| self.lon[i]).collect();
        let lat: Option<Vec<f64>> = rows.iter().map(|&i| self.lat[i]).collect();
        if let (Some(lon), Some(lat)) = (lon, lat) {
            frame = frame.with_coords(lon, lat)?;
        }
        Ok((frame, dropped_cols))
    }

    /// Strict conversion: every unit must be complete.
    pub fn into_frame(&self) -> Result<(CausalFrame, Vec<usize>), FrameError> {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.select_complete(&rows)
    }

    /// Indices of units with no missing `key`, `w`, `y` or covariate.
    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.row_complete(i)).collect()
    }
}
