use std::path::Path;

use anyhow::Context;
use gbmap::persist::write_atomic;

/// Rows of numbers (and optional trailing labels) under a header, written atomically.
pub struct CsvTable {
    writer: csv::Writer<Vec<u8>>,
}

impl CsvTable {
    pub fn new<S: AsRef<str>>(header: &[S]) -> anyhow::Result<Self> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header.iter().map(|h| h.as_ref()))?;
        Ok(CsvTable { writer })
    }

    pub fn row(&mut self, values: &[f64]) -> anyhow::Result<()> {
        self.writer.write_record(values.iter().map(|v| v.to_string()))?;
        Ok(())
    }

    pub fn row_with_label(&mut self, values: &[f64], label: &str) -> anyhow::Result<()> {
        let mut rec: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        rec.push(label.to_string());
        self.writer.write_record(&rec)?;
        Ok(())
    }

    pub fn save(self, path: &Path) -> anyhow::Result<()> {
        let bytes = self.writer.into_inner().map_err(|e| e.into_error())?;
        write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
    }
}
