use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gcnvat::experiment::{write_runs_csv, write_summary_csv, SummaryRow};
use gcnvat::RunRecord;
use serde::Serialize;
use tempfile::NamedTempFile;

/// An output directory whose files are each replaced in one rename.
pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn write_with<F>(&self, name: &str, fill: F) -> Result<()>
    where
        F: FnOnce(&mut NamedTempFile) -> Result<()>,
    {
        let target = self.dir.join(name);
        let mut tmp = NamedTempFile::new_in(&self.dir)
            .with_context(|| format!("creating temporary file in {}", self.dir.display()))?;
        fill(&mut tmp)?;
        tmp.flush()?;
        tmp.persist(&target).with_context(|| format!("writing {}", target.display()))?;
        Ok(())
    }

    /// `results.csv` and `runs.json`.
    pub fn write_runs(&self, records: &[RunRecord]) -> Result<()> {
        self.write_with("results.csv", |f| Ok(write_runs_csv(f, records)?))?;
        self.write_with("runs.json", |f| {
            serde_json::to_writer_pretty(&mut *f, records)?;
            writeln!(f)?;
            Ok(())
        })
    }

    pub fn write_summary(&self, rows: &[SummaryRow]) -> Result<()> {
        self.write_with("summary.csv", |f| Ok(write_summary_csv(f, rows)?))
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        self.write_with(name, |f| {
            let mut w = csv::Writer::from_writer(f);
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
            Ok(())
        })
    }
}
