//! Observed time-series, their per-location inputs, and input standardization.
//!
//! File layout is `id,Sx,Sy,H,S,I,y<t1>,...,y<tT>` with one row per location;
//! the numeric suffix of each `y` column is the time of that observation.
//! Internally inputs are held in the column order `H, S, I, Sx, Sy`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::fmt17;

/// Number of input columns (H, S, I, Sx, Sy).
pub const INPUT_DIM: usize = 5;
pub const INPUT_NAMES: [&str; INPUT_DIM] = ["H", "S", "I", "Sx", "Sy"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// T×N observations in ΔE* units; column `i` is location `i`.
    pub y: DMatrix<f64>,
    /// N×5 raw inputs, columns `H, S, I, Sx, Sy`.
    pub x_raw: DMatrix<f64>,
    pub times: Vec<f64>,
    pub location_ids: Vec<String>,
}

impl Dataset {
    pub fn new(
        y: DMatrix<f64>,
        x_raw: DMatrix<f64>,
        times: Vec<f64>,
        location_ids: Vec<String>,
    ) -> Result<Self> {
        let ds = Dataset {
            y,
            x_raw,
            times,
            location_ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let (t, n) = self.y.shape();
        if t < 3 {
            return Err(Error::Dimension(format!(
                "need at least 3 time points, got {t}"
            )));
        }
        if n < 2 {
            return Err(Error::Dimension(format!(
                "need at least 2 locations, got {n}"
            )));
        }
        if self.times.len() != t {
            return Err(Error::Dimension(format!(
                "{} time values for {t} observation rows",
                self.times.len()
            )));
        }
        if self.x_raw.shape() != (n, INPUT_DIM) {
            return Err(Error::Dimension(format!(
                "inputs are {:?}, expected ({n}, {INPUT_DIM})",
                self.x_raw.shape()
            )));
        }
        if self.location_ids.len() != n {
            return Err(Error::Dimension(
                "location id count does not match N".into(),
            ));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Schema("times must be strictly increasing".into()));
        }
        if self
            .y
            .iter()
            .chain(self.x_raw.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Schema("non-finite value in dataset".into()));
        }
        Ok(())
    }

    pub fn n_locations(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_times(&self) -> usize {
        self.y.nrows()
    }

    pub fn location_index(&self, id: &str) -> Option<usize> {
        self.location_ids.iter().position(|l| l == id)
    }

    /// Raw input row for location `i` (`H, S, I, Sx, Sy`).
    pub fn raw_input(&self, i: usize) -> [f64; INPUT_DIM] {
        std::array::from_fn(|d| self.x_raw[(i, d)])
    }

    /// Copy of the dataset with location `i` removed.
    pub fn without_location(&self, i: usize) -> Result<Dataset> {
        let y = self.y.clone().remove_column(i);
        let x = self.x_raw.clone().remove_row(i);
        let mut ids = self.location_ids.clone();
        ids.remove(i);
        Dataset::new(y, x, self.times.clone(), ids)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader(reader: impl Read) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
            .clone();
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
        };
        let id_col = find("id")?;
        let input_cols: Vec<usize> = INPUT_NAMES.iter().map(|n| find(n)).collect::<Result<_>>()?;

        let mut y_cols = Vec::new();
        let mut times = Vec::new();
        for (c, h) in headers.iter().enumerate() {
            if let Some(rest) = h.strip_prefix('y') {
                if let Ok(t) = rest.parse::<f64>() {
                    y_cols.push(c);
                    times.push(t);
                }
            }
        }
        if y_cols.len() < 3 {
            return Err(Error::Dimension(format!(
                "need at least 3 observation columns y<t>, found {}",
                y_cols.len()
            )));
        }

        let mut ids = Vec::new();
        let mut x_vals = Vec::new();
        let mut y_vals = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let row = r + 1;
            let rec = rec.map_err(|e| Error::Parse {
                row,
                column: String::new(),
                message: e.to_string(),
            })?;
            ids.push(rec.get(id_col).unwrap_or_default().to_string());
            for &c in &input_cols {
                x_vals.push(parse_cell(&rec, row, c, &headers)?);
            }
            for &c in &y_cols {
                y_vals.push(parse_cell(&rec, row, c, &headers)?);
            }
        }
        let n = ids.len();
        if n < 2 {
            return Err(Error::Dimension(format!(
                "need at least 2 locations, got {n}"
            )));
        }
        let t = times.len();
        let x_raw = DMatrix::from_row_slice(n, INPUT_DIM, &x_vals);
        // y_vals is row-major by location, i.e. column-major for the T×N matrix.
        let y = DMatrix::from_column_slice(t, n, &y_vals);
        Dataset::new(y, x_raw, times, ids)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut file).map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "id,Sx,Sy,H,S,I")?;
        for t in &self.times {
            write!(w, ",y{}", fmt17(*t))?;
        }
        writeln!(w)?;
        for i in 0..self.n_locations() {
            let x = self.raw_input(i);
            write!(
                w,
                "{},{},{},{},{},{}",
                self.location_ids[i],
                fmt17(x[3]),
                fmt17(x[4]),
                fmt17(x[0]),
                fmt17(x[1]),
                fmt17(x[2])
            )?;
            for t in 0..self.n_times() {
                write!(w, ",{}", fmt17(self.y[(t, i)]))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn parse_cell(
    rec: &csv::StringRecord,
    row: usize,
    col: usize,
    headers: &csv::StringRecord,
) -> Result<f64> {
    let column = headers.get(col).unwrap_or_default().to_string();
    let cell = rec.get(col).ok_or_else(|| Error::Parse {
        row,
        column: column.clone(),
        message: "missing cell".into(),
    })?;
    let v: f64 = cell.parse().map_err(|_| Error::Parse {
        row,
        column: column.clone(),
        message: format!("'{cell}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column,
            message: format!("non-finite value '{cell}'"),
        });
    }
    Ok(v)
}

/// How the two spatial coordinates share one divisor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialPooling {
    /// Standard deviation of all 2N coordinate values about their grand mean.
    #[default]
    GrandMean,
    /// Standard deviation of the 2N values after centering each coordinate separately.
    PerCoordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct StandardizeOptions {
    #[serde(default)]
    pub center: bool,
    #[serde(default)]
    pub spatial_pooling: SpatialPooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedInputs {
    /// N×5 standardized inputs.
    #[serde(skip)]
    pub x: DMatrix<f64>,
    pub offsets: [f64; INPUT_DIM],
    pub scales: [f64; INPUT_DIM],
    pub spatial_common_scale: f64,
}

impl StandardizedInputs {
    /// Maps a raw input row through the recorded offsets and scales.
    pub fn apply(&self, raw: &[f64; INPUT_DIM]) -> [f64; INPUT_DIM] {
        std::array::from_fn(|d| (raw[d] - self.offsets[d]) / self.scales[d])
    }

    pub fn apply_matrix(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(raw.nrows(), raw.ncols(), |i, d| {
            (raw[(i, d)] - self.offsets[d]) / self.scales[d]
        })
    }

    pub fn write_scales(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "column,offset,scale")?;
        for d in 0..INPUT_DIM {
            writeln!(
                w,
                "{},{},{}",
                INPUT_NAMES[d],
                fmt17(self.offsets[d]),
                fmt17(self.scales[d])
            )?;
        }
        Ok(())
    }
}

fn sample_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    values.clone().sum::<f64>() / values.count() as f64
}

/// Divides H, S, I by their own sample standard deviations and both spatial
/// coordinates by one common standard deviation.
pub fn standardize_inputs(
    x_raw: &DMatrix<f64>,
    opts: StandardizeOptions,
) -> Result<StandardizedInputs> {
    let n = x_raw.nrows();
    if x_raw.ncols() != INPUT_DIM {
        return Err(Error::Dimension(format!(
            "expected {INPUT_DIM} input columns"
        )));
    }
    if n < 2 {
        return Err(Error::Dimension(
            "need at least 2 rows to standardize".into(),
        ));
    }
    let degenerate = |s: f64| !(s.is_finite() && s > 1e-300);
    let mut scales = [0.0; INPUT_DIM];
    for d in 0..3 {
        scales[d] = sample_sd(x_raw.column(d).iter().copied());
        if degenerate(scales[d]) {
            return Err(Error::DegenerateInput(format!(
                "column {} has zero variance",
                INPUT_NAMES[d]
            )));
        }
    }
    for d in 3..5 {
        if degenerate(sample_sd(x_raw.column(d).iter().copied())) {
            return Err(Error::DegenerateInput(format!(
                "column {} has zero variance",
                INPUT_NAMES[d]
            )));
        }
    }
    let sx = x_raw.column(3);
    let sy = x_raw.column(4);
    let common = match opts.spatial_pooling {
        SpatialPooling::GrandMean => sample_sd(sx.iter().chain(sy.iter()).copied()),
        SpatialPooling::PerCoordinate => {
            let mx = mean(sx.iter().copied());
            let my = mean(sy.iter().copied());
            let ss: f64 = sx.iter().map(|v| (v - mx).powi(2)).sum::<f64>()
                + sy.iter().map(|v| (v - my).powi(2)).sum::<f64>();
            (ss / (2 * n - 2) as f64).sqrt()
        }
    };
    scales[3] = common;
    scales[4] = common;

    let offsets: [f64; INPUT_DIM] = if opts.center {
        std::array::from_fn(|d| mean(x_raw.column(d).iter().copied()))
    } else {
        [0.0; INPUT_DIM]
    };
    let out = StandardizedInputs {
        x: DMatrix::zeros(0, 0),
        offsets,
        scales,
        spatial_common_scale: common,
    };
    let x = out.apply_matrix(x_raw);
    Ok(StandardizedInputs { x, ..out })
}

/// Map-prediction pixels: `px, py` are raw spatial coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub px: Vec<f64>,
    pub py: Vec<f64>,
    /// M×5 raw inputs in `H, S, I, Sx, Sy` order (Sx = px, Sy = py).
    pub x_raw: DMatrix<f64>,
}

impl PixelGrid {
    pub fn len(&self) -> usize {
        self.px.len()
    }

    pub fn is_empty(&self) -> bool {
        self.px.is_empty()
    }

    pub fn from_rows(rows: &[[f64; 5]]) -> PixelGrid {
        let m = rows.len();
        PixelGrid {
            px: rows.iter().map(|r| r[0]).collect(),
            py: rows.iter().map(|r| r[1]).collect(),
            x_raw: DMatrix::from_fn(m, INPUT_DIM, |i, d| match d {
                0 => rows[i][2],
                1 => rows[i][3],
                2 => rows[i][4],
                3 => rows[i][0],
                _ => rows[i][1],
            }),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PixelGrid> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader(reader: impl Read) -> Result<PixelGrid> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Schema(format!("unreadable grid header: {e}")))?
            .clone();
        let names = ["px", "py", "H", "S", "I"];
        let cols: Vec<usize> = names
            .iter()
            .map(|n| {
                headers
                    .iter()
                    .position(|h| h == *n)
                    .ok_or_else(|| Error::Schema(format!("grid is missing column '{n}'")))
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse {
                row: r + 1,
                column: String::new(),
                message: e.to_string(),
            })?;
            let mut row = [0.0; 5];
            for (k, &c) in cols.iter().enumerate() {
                row[k] = parse_cell(&rec, r + 1, c, &headers)?;
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Schema("grid has no pixels".into()));
        }
        Ok(PixelGrid::from_rows(&rows))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "px,py,H,S,I")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt17(self.px[i]),
                fmt17(self.py[i]),
                fmt17(self.x_raw[(i, 0)]),
                fmt17(self.x_raw[(i, 1)]),
                fmt17(self.x_raw[(i, 2)])
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_text(rows: usize) -> String {
        let mut s = String::from("id,Sx,Sy,H,S,I,y1,y2,y3,y4\n");
        for i in 0..rows {
            let f = i as f64;
            s.push_str(&format!(
                "L{i},{},{},{},{},{},0,{},{},{}\n",
                10.0 + f,
                20.0 - 2.0 * f,
                5.0 + 0.3 * f * f,
                9.0 - f,
                1.0 + (f * 1.7).sin(),
                0.5 * f,
                0.8 * f,
                0.9 * f
            ));
        }
        s
    }

    #[test]
    fn loads_well_formed_file() {
        let ds = Dataset::from_reader(csv_text(13).as_bytes()).unwrap();
        assert_eq!(ds.n_locations(), 13);
        assert_eq!(ds.n_times(), 4);
        assert_eq!(ds.times, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ds.location_ids[2], "L2");
        // Sx lives in column 3 internally.
        assert_eq!(ds.x_raw[(2, 3)], 12.0);
        assert_eq!(ds.y[(2, 2)], 1.6);
    }

    #[test]
    fn single_location_is_dimension_error() {
        let err = Dataset::from_reader(csv_text(1).as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
    }

    #[test]
    fn nan_cell_is_named() {
        let text = csv_text(3).replace("L1,11,18", "L1,NaN,18");
        let err = Dataset::from_reader(text.as_bytes()).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "Sx");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_numeric_cell_is_parse_error() {
        let text = csv_text(3).replace(",0.5,", ",abc,");
        let err = Dataset::from_reader(text.as_bytes()).unwrap_err();
        assert!(
            matches!(err, Error::Parse { ref column, .. } if column == "y2"),
            "{err}"
        );
    }

    #[test]
    fn missing_column_is_schema_error() {
        let text = csv_text(3).replacen("H,", "Hue,", 1);
        assert!(matches!(
            Dataset::from_reader(text.as_bytes()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn too_few_times_is_dimension_error() {
        let text = "id,Sx,Sy,H,S,I,y1,y2\na,1,2,3,4,5,0,1\nb,2,3,4,5,6,0,1\n";
        assert!(matches!(
            Dataset::from_reader(text.as_bytes()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn save_then_load_is_bit_exact() {
        let mut ds = Dataset::from_reader(csv_text(5).as_bytes()).unwrap();
        ds.y[(1, 1)] = 1.0 / 3.0;
        ds.x_raw[(0, 0)] = std::f64::consts::PI * 1e-7;
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn standardized_columns_have_unit_sd() {
        let ds = Dataset::from_reader(csv_text(13).as_bytes()).unwrap();
        let st = standardize_inputs(&ds.x_raw, StandardizeOptions::default()).unwrap();
        for d in 0..3 {
            let sd = sample_sd(st.x.column(d).iter().copied());
            assert!((sd - 1.0).abs() < 1e-12);
        }
        assert_eq!(st.scales[3], st.scales[4]);
        assert_eq!(st.scales[3], st.spatial_common_scale);
    }

    #[test]
    fn scales_equal_independently_computed_sds() {
        let ds = Dataset::from_reader(csv_text(7).as_bytes()).unwrap();
        let st = standardize_inputs(&ds.x_raw, StandardizeOptions::default()).unwrap();
        for d in 0..3 {
            let col: Vec<f64> = (0..7).map(|i| ds.x_raw[(i, d)]).collect();
            let m = col.iter().sum::<f64>() / 7.0;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 6.0;
            assert!((st.scales[d] - v.sqrt()).abs() < 1e-12);
        }
        let pooled: Vec<f64> = (0..7)
            .flat_map(|i| [ds.x_raw[(i, 3)], ds.x_raw[(i, 4)]])
            .collect();
        let m = pooled.iter().sum::<f64>() / 14.0;
        let v = pooled.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 13.0;
        assert!((st.spatial_common_scale - v.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_column_is_degenerate() {
        let mut x = DMatrix::from_fn(4, 5, |i, d| (i * (d + 1)) as f64);
        x.column_mut(1).fill(2.0);
        assert!(matches!(
            standardize_inputs(&x, StandardizeOptions::default()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn per_coordinate_pooling_differs_from_grand_mean() {
        let x = DMatrix::from_row_slice(
            3,
            5,
            &[
                1.0, 2.0, 3.0, 0.0, 10.0, //
                2.0, 1.0, 5.0, 1.0, 11.0, //
                4.0, 0.0, 4.0, 2.0, 12.0,
            ],
        );
        let per = standardize_inputs(
            &x,
            StandardizeOptions {
                spatial_pooling: SpatialPooling::PerCoordinate,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((per.spatial_common_scale - 1.0).abs() < 1e-12);
        let grand = standardize_inputs(&x, StandardizeOptions::default()).unwrap();
        assert!(grand.spatial_common_scale > 5.0);
    }

    #[test]
    fn grid_round_trip() {
        let text = "px,py,H,S,I\n1,2,3,4,5\n6,7,8,9,10\n";
        let g = PixelGrid::from_reader(text.as_bytes()).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.x_raw[(1, 3)], 6.0);
        assert_eq!(g.x_raw[(1, 0)], 8.0);
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }

    #[test]
    fn grid_schema_mismatch() {
        let text = "x,y,H,S,I\n1,2,3,4,5\n";
        assert!(matches!(
            PixelGrid::from_reader(text.as_bytes()),
            Err(Error::Schema(_))
        ));
    }
}
