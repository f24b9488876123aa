use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dgpemu::spectra::fmt17;

use crate::error::{CliError, CliResult, Context};

/// Writes via a temporary file in the target directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).ctx(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes).ctx(|| format!("writing {}", path.display()))?;
    tmp.persist(path)
        .map_err(|e| CliError::Usage(format!("renaming into {}: {}", path.display(), e.error)))?;
    Ok(())
}

/// Appends one timestamped line to `run.log` in the output directory. Timestamps live
/// only here so that artifacts stay reproducible.
pub fn log_run(out: &Path, line: &str) {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let res = std::fs::create_dir_all(out).and_then(|_| {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(out.join("run.log"))?;
        writeln!(f, "{secs} {line}")
    });
    if let Err(e) = res {
        log::warn!("could not append to run.log: {e}");
    }
}

/// Sorted `.ext` files of a directory, or the path itself when it is a file.
pub fn collect_inputs(path: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CliError::Usage(format!("input {} does not exist", path.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .ctx(|| format!("listing {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no .{ext} files in {}", path.display())));
    }
    Ok(files)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Rows of `id, v1, v2, ...` with a header naming the value columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Self> {
        let bad = |m: String| CliError::Usage(format!("{}: {m}", path.display()));
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| bad(e.to_string()))?;
        let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.len() < 2 {
            return Err(bad("expected an id column followed by value columns".into()));
        }
        let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != header.len() {
                return Err(bad(format!("row {} has {} fields, expected {}", i + 2, rec.len(), header.len())));
            }
            ids.push(rec[0].to_string());
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("row {}: `{v}`: {e}", i + 2))))
                .collect::<CliResult<Vec<f64>>>()?;
            rows.push(vals);
        }
        Ok(Self { columns, ids, rows })
    }

    /// Value columns parsed as numbers (wavenumber headers).
    pub fn numeric_columns(&self) -> CliResult<Vec<f64>> {
        self.columns
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("column header `{c}` is not a wavenumber")))
            })
            .collect()
    }

    pub fn to_csv(&self, id_name: &str) -> CliResult<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![id_name.to_string()];
        header.extend(self.columns.iter().cloned());
        let err = |e: csv::Error| CliError::Usage(format!("csv: {e}"));
        w.write_record(&header).map_err(err)?;
        for (id, row) in self.ids.iter().zip(&self.rows) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| fmt17(*v)));
            w.write_record(&rec).map_err(err)?;
        }
        w.into_inner().map_err(|e| CliError::Usage(format!("csv: {e}")))
    }
}

/// Writes columns of equal length under the given headers.
pub fn columns_csv(headers: &[&str], cols: &[&[f64]]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Usage(format!("csv: {e}"));
    w.write_record(headers).map_err(err)?;
    let n = cols.first().map_or(0, |c| c.len());
    for i in 0..n {
        w.write_record(cols.iter().map(|c| fmt17(c[i]))).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(format!("csv: {e}")))
}
