//! Date-by-tenor yield panels and treasury CSV ingestion.

use std::fmt::Write as _;

use chrono::NaiveDate;

use crate::curve::MaturityGrid;
use crate::error::{Error, Result};

/// Observed yields (percent) on a date × maturity grid. Missing cells are
/// tracked in `mask` and skipped by every likelihood.
#[derive(Debug, Clone)]
pub struct YieldPanel {
    dates: Vec<NaiveDate>,
    grid: MaturityGrid,
    /// Row-major `n × m`; `NaN` wherever `mask` is false.
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl YieldPanel {
    /// Builds a panel from rows of optional yields, one row per date.
    pub fn new(dates: Vec<NaiveDate>, grid: MaturityGrid, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if rows.len() != dates.len() {
            return Err(Error::Validation(format!(
                "{} dates but {} rows",
                dates.len(),
                rows.len()
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "dates must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        let m = grid.len();
        let mut values = Vec::with_capacity(rows.len() * m);
        let mut mask = Vec::with_capacity(rows.len() * m);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != m {
                return Err(Error::Validation(format!(
                    "row {i} has {} cells, expected {m}",
                    row.len()
                )));
            }
            for cell in row {
                match cell {
                    Some(v) if v.is_finite() => {
                        values.push(v);
                        mask.push(true);
                    }
                    _ => {
                        values.push(f64::NAN);
                        mask.push(false);
                    }
                }
            }
        }
        Ok(Self {
            dates,
            grid,
            values,
            mask,
        })
    }

    /// A panel with every cell observed.
    pub fn from_complete(dates: Vec<NaiveDate>, grid: MaturityGrid, rows: Vec<Vec<f64>>) -> Result<Self> {
        let rows = rows
            .into_iter()
            .map(|r| r.into_iter().map(Some).collect())
            .collect();
        Self::new(dates, grid, rows)
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn grid(&self) -> &MaturityGrid {
        &self.grid
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_tenors(&self) -> usize {
        self.grid.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let k = i * self.n_tenors() + j;
        self.mask[k].then(|| self.values[k])
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n_tenors() + j]
    }

    /// Row `i` with missing cells as `None`.
    pub fn row(&self, i: usize) -> Vec<Option<f64>> {
        (0..self.n_tenors()).map(|j| self.get(i, j)).collect()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Iterates observed cells as `(date index, maturity, yield)`.
    pub fn observations(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let m = self.n_tenors();
        let taus = self.grid.taus();
        self.values
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, &obs))| obs)
            .map(move |(k, (&v, _))| (k / m, taus[k % m], v))
    }

    /// Single-date panel for row `i`.
    pub fn single_date(&self, i: usize) -> YieldPanel {
        let m = self.n_tenors();
        YieldPanel {
            dates: vec![self.dates[i]],
            grid: self.grid.clone(),
            values: self.values[i * m..(i + 1) * m].to_vec(),
            mask: self.mask[i * m..(i + 1) * m].to_vec(),
        }
    }

    /// Mean of the observed values in column `j`, if any.
    pub fn column_mean(&self, j: usize) -> Option<f64> {
        let vals: Vec<f64> = (0..self.n_dates()).filter_map(|i| self.get(i, j)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean yield at the shortest and longest maturities that carry data.
    pub(crate) fn short_long_means(&self) -> Option<(f64, f64)> {
        let m = self.n_tenors();
        let short = (0..m).find_map(|j| self.column_mean(j))?;
        let long = (0..m).rev().find_map(|j| self.column_mean(j))?;
        Some((short, long))
    }
}

impl PartialEq for YieldPanel {
    fn eq(&self, other: &Self) -> bool {
        self.dates == other.dates
            && self.grid == other.grid
            && self.mask == other.mask
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.mask)
                .all(|((a, b), &obs)| !obs || a == b)
    }
}

/// Maps a tenor column header to a maturity in years.
///
/// The default recognises treasury labels (`"1 Mo"`, `"6 Mo"`, `"1 Yr"`,
/// `"30 Yr"`, also `Mo`/`Month`/`Y`/`Year` spellings) with months as
/// twelfths of a year, and bare numbers as years (the canonical format).
#[derive(Debug, Clone, Default)]
pub struct TenorMap {
    overrides: Vec<(String, f64)>,
}

impl TenorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an explicit label; explicit labels win over the built-in rules.
    pub fn with(mut self, label: impl Into<String>, years: f64) -> Self {
        self.overrides.push((normalize_label(&label.into()), years));
        self
    }

    pub fn years(&self, label: &str) -> Option<f64> {
        let key = normalize_label(label);
        if let Some((_, y)) = self.overrides.iter().find(|(l, _)| *l == key) {
            return Some(*y);
        }
        if let Ok(y) = key.parse::<f64>() {
            return (y.is_finite() && y > 0.0).then_some(y);
        }
        let split = key.find(|c: char| c.is_ascii_alphabetic())?;
        let (num, unit) = key.split_at(split);
        let n: f64 = num.trim().parse().ok()?;
        if !(n.is_finite() && n > 0.0) {
            return None;
        }
        match unit.trim() {
            "mo" | "m" | "mos" | "month" | "months" => Some(n / 12.0),
            "yr" | "y" | "yrs" | "year" | "years" => Some(n),
            "wk" | "w" | "week" | "weeks" => Some(n / 52.0),
            _ => None,
        }
    }
}

fn normalize_label(label: &str) -> String {
    label.trim().to_ascii_lowercase()
}

/// Parses `MM/DD/YY`, `MM/DD/YYYY` or ISO `YYYY-MM-DD`.
pub fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    if s.contains('-') {
        return NaiveDate::parse_from_str(s, "%Y-%m-%d").ok();
    }
    let year_len = s.rsplit('/').next()?.len();
    match year_len {
        2 => NaiveDate::parse_from_str(s, "%m/%d/%y").ok(),
        4 => NaiveDate::parse_from_str(s, "%m/%d/%Y").ok(),
        _ => None,
    }
}

/// Parses a treasury-style yield CSV: one `Date` column plus tenor columns.
///
/// Lines starting with `#` are comments. Columns whose header is neither the
/// date nor a recognised tenor are ignored. Empty or non-numeric cells are
/// masked as missing. Rows are returned sorted by date.
pub fn parse_treasury_csv(bytes: &[u8], tenor_map: &TenorMap) -> Result<YieldPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::format(format!("cannot read header row: {e}")))?
        .clone();

    let date_col = headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case("date"))
        .ok_or_else(|| Error::Format {
            message: "no Date column in header".into(),
            row: Some(1),
            column: None,
        })?;

    let mut tenor_cols: Vec<(usize, f64, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != date_col)
        .filter_map(|(i, h)| tenor_map.years(h).map(|y| (i, y, h.to_string())))
        .collect();
    if tenor_cols.is_empty() {
        return Err(Error::Format {
            message: "no recognisable tenor columns".into(),
            row: Some(1),
            column: None,
        });
    }
    tenor_cols.sort_by(|a, b| a.1.total_cmp(&b.1));
    if let Some(w) = tenor_cols.windows(2).find(|w| w[0].1 == w[1].1) {
        return Err(Error::Format {
            message: format!("columns {:?} and {:?} map to the same maturity", w[0].2, w[1].2),
            row: Some(1),
            column: Some(w[1].2.clone()),
        });
    }

    let mut rows: Vec<(NaiveDate, Vec<Option<f64>>, usize)> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| Error::Format {
            message: e.to_string(),
            row: Some(line),
            column: None,
        })?;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let raw_date = record.get(date_col).unwrap_or("");
        let date = parse_date(raw_date).ok_or_else(|| Error::Format {
            message: format!("unparseable date {raw_date:?}"),
            row: Some(line),
            column: Some(headers[date_col].to_string()),
        })?;
        let cells = tenor_cols
            .iter()
            .map(|(i, _, _)| {
                record
                    .get(*i)
                    .and_then(|c| c.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
            })
            .collect();
        rows.push((date, cells, line));
    }

    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Format {
            message: format!("duplicate date {}", w[1].0),
            row: Some(w[1].2),
            column: Some(headers[date_col].to_string()),
        });
    }

    let grid = MaturityGrid::new(tenor_cols.iter().map(|c| c.1).collect())?;
    let (dates, cells): (Vec<_>, Vec<_>) = rows.into_iter().map(|(d, c, _)| (d, c)).unzip();
    YieldPanel::new(dates, grid, cells)
}

/// Renders the canonical CSV: `date` (ISO) then one column per maturity in
/// years, yields at 6 decimals, empty cells for missing values. `header`
/// lines are written first as `#` comments.
pub fn render_canonical_csv(panel: &YieldPanel, header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    out.push_str("date");
    for tau in panel.grid().taus() {
        // Shortest round-trip representation keeps the grid exact on re-parse.
        let _ = write!(out, ",{tau}");
    }
    out.push('\n');
    for (i, date) in panel.dates().iter().enumerate() {
        let _ = write!(out, "{}", date.format("%Y-%m-%d"));
        for j in 0..panel.n_tenors() {
            match panel.get(i, j) {
                Some(v) => {
                    let _ = write!(out, ",{v:.6}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Treasury labels of the built-in fixture, shortest first.
pub const FIXTURE_TENORS: [&str; 11] = [
    "1 Mo", "3 Mo", "6 Mo", "1 Yr", "2 Yr", "3 Yr", "5 Yr", "7 Yr", "10 Yr", "20 Yr", "30 Yr",
];

const FIXTURE_CSV: &str = "\
Date,1 Mo,3 Mo,6 Mo,1 Yr,2 Yr,3 Yr,5 Yr,7 Yr,10 Yr,20 Yr,30 Yr
05/01/18,1.68,1.85,2.05,2.26,2.50,2.66,2.82,2.93,2.97,3.03,3.13
05/02/18,1.69,1.84,2.03,2.24,2.49,2.64,2.80,2.92,2.97,3.04,3.14
05/03/18,1.68,1.84,2.02,2.24,2.49,2.62,2.78,2.90,2.94,3.02,3.12
05/04/18,1.67,1.84,2.03,2.24,2.51,2.63,2.78,2.90,2.95,3.02,3.12
05/07/18,1.69,1.86,2.05,2.25,2.49,2.64,2.78,2.90,2.95,3.02,3.12
05/08/18,1.69,1.87,2.05,2.26,2.51,2.66,2.81,2.93,2.97,3.04,3.13
";

/// US Treasury par yields for the first six business days of May 2018,
/// as published in the daily yield-curve table.
pub fn builtin_fixture_may2018() -> YieldPanel {
    parse_treasury_csv(FIXTURE_CSV.as_bytes(), &TenorMap::new())
        .expect("embedded fixture parses")
}

/// The embedded fixture in its original treasury layout.
pub fn fixture_csv() -> &'static str {
    FIXTURE_CSV
}
