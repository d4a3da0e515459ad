use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

pub const OUT_DIR_ENV: &str = "HSFL_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "hsfl-out";

/// Flag, then config file, then environment, then the built-in default.
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&str>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn hash_line(hash: &str) -> String {
    format!("# config_sha256={hash}")
}

/// Writes `rows` under a hash comment and a header, replacing any existing file.
pub fn write_csv(path: &Path, hash: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "{}", hash_line(hash))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Appends one row, creating the file with its comment and header first.
/// An existing file must have been started by the same scenario and columns.
pub fn append_csv(path: &Path, hash: &str, header: &[String], row: &[String]) -> Result<()> {
    if !path.exists() {
        return write_csv(path, hash, header, &[row.to_vec()]);
    }
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    if first != hash_line(hash) {
        bail!(
            "{} was started by a different scenario ({first}); choose another output directory",
            path.display()
        );
    }
    let expected = {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        String::from_utf8(w.into_inner()?)?.trim_end().to_string()
    };
    if lines.next().transpose()?.as_deref() != Some(expected.as_str()) {
        bail!("{} has different columns; choose another output directory", path.display());
    }
    let file = OpenOptions::new().append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(row)?;
    w.flush()?;
    log::info!("appended to {}", path.display());
    Ok(())
}

pub fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

pub fn f(v: f64) -> String {
    v.to_string()
}

pub fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}
