//! Per-step timing statistics and the parallel/serial composition rules.

use serde::{Deserialize, Serialize};

use crate::error::{ResomError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean: f64,
    /// Sample standard deviation, `0` with fewer than two samples.
    pub std: f64,
    pub count: usize,
}

impl StepStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(ResomError::Param(
                "a timing step needs at least one sample".into(),
            ));
        }
        if let Some(s) = samples.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(ResomError::Param(format!(
                "timing samples must be finite and >= 0 (got {s})"
            )));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = if samples.len() < 2 {
            0.0
        } else {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self {
            mean,
            std,
            count: samples.len(),
        })
    }
}

/// Raw seconds recorded per pipeline step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSamples {
    /// One series per node.
    pub activation: Vec<Vec<f64>>,
    /// One entry per node-to-aggregator transfer.
    pub transfer: Vec<f64>,
    pub predict: Vec<f64>,
    /// Wall time of each complete sample, when measured.
    pub sample_wall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub nodes: usize,
    pub activation: Vec<StepStats>,
    /// `None` when there is a single node and nothing to transfer.
    pub transfer: Option<StepStats>,
    pub predict: StepStats,
    pub sample_wall: Option<StepStats>,
    /// `max_i t_act[i] + (n - 1) t_transfer + t_predict`
    pub parallel_estimate: f64,
    /// `sum_i t_act[i] + t_predict`
    pub serial_estimate: f64,
}

/// Summarizes raw step timings for an `n`-node deployment.
pub fn timing_report(samples: &TimingSamples, n: usize) -> Result<TimingReport> {
    if n == 0 {
        return Err(ResomError::Param(
            "timing report needs at least one node".into(),
        ));
    }
    if samples.activation.len() != n {
        return Err(ResomError::Shape {
            context: "activation timing series",
            expected: n,
            actual: samples.activation.len(),
        });
    }
    let activation = samples
        .activation
        .iter()
        .map(|s| StepStats::from_samples(s))
        .collect::<Result<Vec<_>>>()?;
    let transfer = if n > 1 {
        Some(StepStats::from_samples(&samples.transfer)?)
    } else {
        None
    };
    let predict = StepStats::from_samples(&samples.predict)?;
    let sample_wall = if samples.sample_wall.is_empty() {
        None
    } else {
        Some(StepStats::from_samples(&samples.sample_wall)?)
    };
    let max_act = activation.iter().map(|s| s.mean).fold(0.0, f64::max);
    let sum_act: f64 = activation.iter().map(|s| s.mean).sum();
    let t_transfer = transfer.map_or(0.0, |t| t.mean);
    Ok(TimingReport {
        nodes: n,
        parallel_estimate: max_act + (n - 1) as f64 * t_transfer + predict.mean,
        serial_estimate: sum_act + predict.mean,
        activation,
        transfer,
        predict,
        sample_wall,
    })
}

impl TimingReport {
    /// `step,node,mean_s,std_s,count` rows followed by the two estimates.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,node,mean_s,std_s,count\n");
        let mut row = |step: &str, node: String, s: &StepStats| {
            out.push_str(&format!("{step},{node},{},{},{}\n", s.mean, s.std, s.count));
        };
        for (i, s) in self.activation.iter().enumerate() {
            row("activation", i.to_string(), s);
        }
        if let Some(t) = &self.transfer {
            row("transfer", String::new(), t);
        }
        row("predict", String::new(), &self.predict);
        if let Some(w) = &self.sample_wall {
            row("sample_wall", String::new(), w);
        }
        out.push_str(&format!(
            "parallel_estimate,,{},,\n",
            self.parallel_estimate
        ));
        out.push_str(&format!("serial_estimate,,{},,\n", self.serial_estimate));
        out
    }
}
