//! Metrics records and their CSV form.

use std::io::Write;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,epoch,split,l_m,l_r,l_t,accuracy,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: String,
    pub l_m: f64,
    pub l_r: f64,
    pub l_t: f64,
    pub accuracy: f64,
    /// Wall-clock seconds since the run started.
    pub seconds: f64,
}

impl MetricsRecord {
    /// CSV row; with `timing` off the seconds column is written as 0.
    pub fn csv_row(&self, timing: bool) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.split,
            self.l_m,
            self.l_r,
            self.l_t,
            self.accuracy,
            if timing { self.seconds } else { 0.0 }
        )
    }
}

/// Appends records to a CSV stream, writing the header first.
pub struct CsvWriter<W: Write> {
    out: W,
    timing: bool,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W, timing: bool) -> Result<Self> {
        writeln!(out, "{CSV_HEADER}").map_err(|e| Error::Data(format!("metrics: {e}")))?;
        Ok(CsvWriter { out, timing })
    }

    /// Continue an existing stream; no header is written.
    pub fn append(out: W, timing: bool) -> Self {
        CsvWriter { out, timing }
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row(self.timing)).map_err(|e| Error::Data(format!("metrics: {e}")))?;
        self.out.flush().map_err(|e| Error::Data(format!("metrics: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows() {
        let r = MetricsRecord {
            step: 10,
            epoch: 1,
            split: "train".into(),
            l_m: 0.5,
            l_r: 12.25,
            l_t: 0.6,
            accuracy: 0.75,
            seconds: 1.5,
        };
        let mut w = CsvWriter::new(Vec::new(), false).unwrap();
        w.write(&r).unwrap();
        let text = String::from_utf8(w.out).unwrap();
        assert_eq!(text, format!("{CSV_HEADER}\n10,1,train,0.5,12.25,0.6,0.75,0\n"));
        assert!(r.csv_row(true).ends_with(",1.5"));
    }
}
