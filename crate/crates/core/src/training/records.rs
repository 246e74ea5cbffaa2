use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::TrainObserver;
use crate::error::Result;
use crate::losses::{DiscriminatorLossBreakdown, GeneratorLossBreakdown};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Generator,
    Discriminator,
}

/// One structured training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub kind: StepKind,
    /// Step counter of `kind` after the step.
    pub step: u64,
    pub wall_time_s: f64,
    pub terms: Vec<(String, f64)>,
}

impl LogRecord {
    pub fn generator(step: u64, elapsed: Duration, b: &GeneratorLossBreakdown<f64>) -> Self {
        LogRecord {
            kind: StepKind::Generator,
            step,
            wall_time_s: elapsed.as_secs_f64(),
            terms: b.terms().iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn discriminator(step: u64, elapsed: Duration, b: &DiscriminatorLossBreakdown<f64>) -> Self {
        LogRecord {
            kind: StepKind::Discriminator,
            step,
            wall_time_s: elapsed.as_secs_f64(),
            terms: b.terms().iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

/// Appends each record as one JSON line.
pub struct JsonLinesLog {
    out: BufWriter<File>,
}

impl JsonLinesLog {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonLinesLog {
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

impl<T: Scalar> TrainObserver<T> for JsonLinesLog {
    fn record(&mut self, record: &LogRecord) -> Result<()> {
        self.write(record)
    }
}

/// Reads a log written by [`JsonLinesLog`].
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}
