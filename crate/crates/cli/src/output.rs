//! Verdict and plot-data record formats.
//!
//! Verdict CSV: `index,p_0,..,p_{K-1},outcome,cluster,alarm` where `outcome`
//! is `member` or `fault`, `cluster` is empty for faults and `alarm` is
//! `0`/`1`. Verdict JSONL: one object per line with keys `index`,
//! `probabilities`, `outcome`, `cluster` (null for faults) and `alarm`.
//!
//! Plot CSV: `signal,cluster,probability,threshold,failure`, one row per
//! signal per cluster.

use std::io::{self, Write};

use serde::Serialize;
use tcn_core::{ClusterStats, Outcome, Verdict};

use crate::args::Emit;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerdictRecord {
    pub index: usize,
    pub probabilities: Vec<f64>,
    pub outcome: &'static str,
    pub cluster: Option<usize>,
    pub alarm: bool,
}

impl VerdictRecord {
    pub fn new(index: usize, verdict: &Verdict, alarm: bool) -> Self {
        let (outcome, cluster) = match verdict.outcome {
            Outcome::Member(c) => ("member", Some(c)),
            Outcome::Fault => ("fault", None),
        };
        Self {
            index,
            probabilities: verdict.probs.clone(),
            outcome,
            cluster,
            alarm,
        }
    }
}

pub struct VerdictWriter<W: Write> {
    out: W,
    emit: Emit,
    k: usize,
    header_written: bool,
}

impl<W: Write> VerdictWriter<W> {
    pub fn new(out: W, emit: Emit, k: usize) -> Self {
        Self {
            out,
            emit,
            k,
            header_written: false,
        }
    }

    pub fn header(&mut self) -> io::Result<()> {
        if self.emit == Emit::Csv && !self.header_written {
            let probs: Vec<String> = (0..self.k).map(|c| format!("p_{c}")).collect();
            writeln!(self.out, "index,{},outcome,cluster,alarm", probs.join(","))?;
        }
        self.header_written = true;
        Ok(())
    }

    pub fn write(&mut self, r: &VerdictRecord) -> io::Result<()> {
        self.header()?;
        match self.emit {
            Emit::Csv => {
                let probs: Vec<String> = r.probabilities.iter().map(f64::to_string).collect();
                let cluster = r.cluster.map(|c| c.to_string()).unwrap_or_default();
                writeln!(
                    self.out,
                    "{},{},{},{},{}",
                    r.index,
                    probs.join(","),
                    r.outcome,
                    cluster,
                    u8::from(r.alarm)
                )
            }
            Emit::Jsonl => {
                serde_json::to_writer(&mut self.out, r)?;
                writeln!(self.out)
            }
        }
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.header()?;
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_plot_header<W: Write + ?Sized>(out: &mut W) -> io::Result<()> {
    writeln!(out, "signal,cluster,probability,threshold,failure")
}

pub fn write_plot_rows<W: Write + ?Sized>(
    out: &mut W,
    signal: usize,
    probs: &[f64],
    stats: &ClusterStats,
) -> io::Result<()> {
    for (k, (p, s)) in probs.iter().zip(&stats.clusters).enumerate() {
        writeln!(out, "{signal},{k},{p},{},{}", s.threshold, s.failure)?;
    }
    Ok(())
}
