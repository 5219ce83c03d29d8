//! Per-step training records and their CSV / JSONL forms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    /// Cumulative compute units after this step.
    pub compute: f64,
    pub train_loss: f64,
    pub rounds: usize,
    pub lr: f64,
    /// Held-out log-perplexity keyed by `corpus@r<rounds>`; empty between evaluations.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub eval: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

pub fn eval_key(corpus: &str, rounds: usize) -> String {
    format!("{corpus}@r{rounds}")
}

impl LossTrace {
    /// Appends a record; steps and compute must both increase.
    pub fn push(&mut self, record: TraceRecord) -> Result<(), String> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step || record.compute <= last.compute {
                return Err(format!(
                    "trace must increase: step {} compute {} after step {} compute {}",
                    record.step, record.compute, last.step, last.compute
                ));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn eval_keys(&self) -> Vec<String> {
        let keys: BTreeSet<&String> = self.records.iter().flat_map(|r| r.eval.keys()).collect();
        keys.into_iter().cloned().collect()
    }

    /// `(compute, eval loss)` pairs for one eval series.
    pub fn eval_points(&self, key: &str) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.eval.get(key).map(|&l| (r.compute, l)))
            .collect()
    }

    pub fn final_eval(&self, key: &str) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.eval.get(key).copied())
    }

    pub fn truncate_after(&mut self, step: u64) {
        self.records.retain(|r| r.step <= step);
    }

    /// Moving average of the train loss with the given window (trailing).
    pub fn smoothed_train_loss(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        let mut out = Vec::with_capacity(self.records.len());
        let mut sum = 0.0;
        for (i, r) in self.records.iter().enumerate() {
            sum += r.train_loss;
            if i >= window {
                sum -= self.records[i - window].train_loss;
            }
            out.push(sum / (i + 1).min(window) as f64);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let keys = self.eval_keys();
        let mut out = String::from("step,compute,train_loss,rounds,lr");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{},{},{},{}", r.step, r.compute, r.train_loss, r.rounds, r.lr);
            for k in &keys {
                out.push(',');
                if let Some(v) = r.eval.get(k) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Self> {
        let mut trace = LossTrace::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
            trace
                .push(rec)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        }
        Ok(trace)
    }

    /// Stable digest of the JSONL form, for comparing reruns.
    pub fn jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }
}
