use std::io::Write;

use serde::{Deserialize, Serialize};

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub rein_loss: f64,
    pub mean_reward: f64,
    pub val_acc: Option<f64>,
}

impl IterationRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Appends records as JSON lines.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &IterationRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", record.to_json_line())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
