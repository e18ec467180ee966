//! CSV artifacts and run manifests. Every CSV starts with
//! `# roetrace <command> config=<sha256>` followed by a header row.

use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use crate::config::RunConfig;

/// Number formatting shared by every CSV: shortest round-trip form,
/// exponent notation outside `[1e-4, 1e15)`, empty for withheld values.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Output directory of one command invocation.
pub struct Run {
    dir: PathBuf,
    command: String,
    config: RunConfig,
    threads: usize,
    files: Mutex<Vec<String>>,
    timings: Mutex<Vec<(String, f64)>>,
    start: Instant,
}

impl Run {
    pub fn new(dir: &Path, command: &str, config: RunConfig, threads: usize) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Run {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config,
            threads,
            files: Mutex::new(Vec::new()),
            timings: Mutex::new(Vec::new()),
            start: Instant::now(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Writes `<name>.csv`; `rows` must match the header width.
    pub fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> io::Result<PathBuf> {
        let path = self.dir.join(format!("{name}.csv"));
        let mut buf = format!("# roetrace {} config={}\n", self.command, self.config.hash()).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header)?;
            for r in rows {
                if r.len() != header.len() {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, format!("{name}.csv: row width mismatch")));
                }
                w.write_record(r)?;
            }
            w.flush()?;
        }
        std::fs::write(&path, buf)?;
        self.files.lock().expect("file list").push(format!("{name}.csv"));
        Ok(path)
    }

    pub fn time<T>(&self, item: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.lock().expect("timings").push((item.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    /// Writes `manifest.txt` and the canonical `run.config`.
    pub fn finish(&self, status: &str) -> io::Result<PathBuf> {
        std::fs::write(self.dir.join("run.config"), self.config.canonical())?;
        let mut files = self.files.lock().expect("file list").clone();
        files.sort();
        let mut timings = self.timings.lock().expect("timings").clone();
        timings.sort_by(|a, b| a.0.cmp(&b.0));
        let mut m = String::new();
        m.push_str(&format!("command = {}\n", self.command));
        m.push_str(&format!("status = {status}\n"));
        m.push_str(&format!("config_sha256 = {}\n", self.config.hash()));
        m.push_str(&format!("roetrace_version = {}\n", env!("CARGO_PKG_VERSION")));
        m.push_str(&format!("threads = {}\n", self.threads));
        m.push_str(&format!("outputs = {}\n", files.join(",")));
        m.push_str(&format!("wall_seconds = {:.3}\n", self.start.elapsed().as_secs_f64()));
        for (item, secs) in timings {
            m.push_str(&format!("time.{item} = {secs:.3}\n"));
        }
        let path = self.dir.join("manifest.txt");
        std::fs::write(&path, m)?;
        Ok(path)
    }
}
