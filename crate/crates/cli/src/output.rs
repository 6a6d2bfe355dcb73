//! Exit codes, input loading and staged output files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nsbayes::panel::{builtin_fixture_may2018, parse_treasury_csv, TenorMap};
use nsbayes::{Error, YieldPanel};

use crate::CommonArgs;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_FORMAT: u8 = 4;
pub const EXIT_CONVERGENCE: u8 = 5;
pub const EXIT_SAMPLING: u8 = 6;
pub const EXIT_NUMERICAL: u8 = 7;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => EXIT_IO,
            CliError::Argument(_) => EXIT_FORMAT,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                Error::Io(_) => EXIT_IO,
                Error::Format { .. } | Error::Validation(_) | Error::Domain(_) => EXIT_FORMAT,
                Error::Convergence { .. } => EXIT_CONVERGENCE,
                Error::SamplingQuality { .. } => EXIT_SAMPLING,
                Error::Numerical { .. } => EXIT_NUMERICAL,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn tenor_map(specs: &[String]) -> CliResult<TenorMap> {
    let mut map = TenorMap::new();
    for spec in specs {
        let (label, years) = spec
            .rsplit_once('=')
            .ok_or_else(|| CliError::Argument(format!("tenor mapping {spec:?} is not LABEL=YEARS")))?;
        let years: f64 = years
            .trim()
            .parse()
            .map_err(|_| CliError::Argument(format!("tenor mapping {spec:?} has a non-numeric maturity")))?;
        map = map.with(label.trim(), years);
    }
    Ok(map)
}

pub fn load_panel(args: &CommonArgs) -> CliResult<YieldPanel> {
    match &args.input {
        Some(path) => {
            let bytes = read_file(path)?;
            Ok(parse_treasury_csv(&bytes, &tenor_map(&args.tenors)?)?)
        }
        None if args.fixture => Ok(builtin_fixture_may2018()),
        None => Err(CliError::Usage("one of --input <PATH> or --fixture is required".into())),
    }
}

/// Output files collected in memory and written together, so a failing
/// run leaves nothing behind unless it asks to.
pub struct Outputs {
    dir: PathBuf,
    header: String,
    files: Vec<(String, String)>,
}

impl Outputs {
    pub fn new(dir: &Path, command: &str, seed: u64, model: &str) -> Self {
        Self {
            dir: dir.to_path_buf(),
            header: format!(
                "# nsbayes {command} seed={seed} model={model} version={}",
                env!("CARGO_PKG_VERSION")
            ),
            files: Vec::new(),
        }
    }

    /// Adds a file; the header line is prepended.
    pub fn add(&mut self, name: &str, body: String) {
        self.files.push((name.to_string(), format!("{}\n{body}", self.header)));
    }

    pub fn commit(self) -> CliResult<()> {
        std::fs::create_dir_all(&self.dir).map_err(|source| CliError::Io {
            path: self.dir.clone(),
            source,
        })?;
        for (name, content) in self.files {
            let path = self.dir.join(&name);
            std::fs::write(&path, content).map_err(|source| CliError::Io { path, source })?;
        }
        Ok(())
    }
}

/// Six-decimal rendering; non-finite values become `NA`.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".to_string()
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), num)
}

/// CSV body from a header and rows of cells.
pub fn csv_body(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Fixed-width text table with right-aligned cells.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
