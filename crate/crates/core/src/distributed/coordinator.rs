//! Drives inference and Hebbian training across a deployment of nodes.
//!
//! Each sample runs as a barrier-synchronized sequence: every node computes
//! its activation, the non-aggregator nodes push theirs to the aggregator,
//! and the aggregator predicts (or applies a Hebbian step).

use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::client::NodeClient;
use super::timing::{timing_report, TimingReport, TimingSamples};
use super::wire::{InitMode, Message};
use crate::error::{check_len, ResomError, Result};
use crate::model::{ClassId, EvaluationReport, SampleOutcome};

/// How `COMPUTE_ACTIVATION` requests are issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FanOut {
    /// All nodes at once, joining on every reply.
    Parallel,
    /// One node after the other.
    Serial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub neurons: usize,
    pub input_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HebbRun {
    pub samples: usize,
    pub timing: Option<TimingReport>,
}

pub struct Coordinator {
    clients: Vec<NodeClient>,
    aggregator: usize,
    aggregator_addr: String,
    info: Vec<NodeInfo>,
    classes: usize,
    next_request: u32,
}

fn unexpected(addr: &str, got: &Message) -> ResomError {
    ResomError::Protocol(format!("{addr}: unexpected {:?} reply", got.msg_type()))
}

fn abort(i: usize, n: usize, e: ResomError) -> ResomError {
    let msg = format!("aborted at sample {i} of {n} ({i} completed): {e}");
    match e {
        ResomError::Transfer(_) => ResomError::Transfer(msg),
        _ => ResomError::Remote(msg),
    }
}

impl Coordinator {
    /// Connects to every node; node `i` of `addrs` must host map `i`.
    pub fn connect(addrs: &[String], aggregator: usize, timeout: Duration) -> Result<Self> {
        if addrs.is_empty() {
            return Err(ResomError::Param("no nodes given".into()));
        }
        if aggregator >= addrs.len() {
            return Err(ResomError::Param(format!(
                "aggregator {aggregator} is not one of the {} nodes",
                addrs.len()
            )));
        }
        let clients = addrs
            .iter()
            .map(|a| NodeClient::connect(a, timeout))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clients,
            aggregator,
            aggregator_addr: addrs[aggregator].clone(),
            info: Vec::new(),
            classes: 0,
            next_request: 1,
        })
    }

    pub fn nodes(&self) -> usize {
        self.clients.len()
    }

    pub fn node_info(&self) -> &[NodeInfo] {
        &self.info
    }

    /// Class count reported by the aggregator at `INIT`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    fn request_id(&mut self) -> u32 {
        let id = self.next_request;
        self.next_request = self.next_request.wrapping_add(1).max(1);
        id
    }

    pub fn init(&mut self, mode: InitMode) -> Result<()> {
        let msg = Message::Init {
            nodes: self.nodes() as u32,
            aggregator: self.aggregator as u32,
            mode,
        };
        let rid = self.request_id();
        let mut info = Vec::with_capacity(self.nodes());
        for (i, c) in self.clients.iter_mut().enumerate() {
            match c.request(rid, &msg)? {
                Message::InitAck {
                    node_id,
                    neurons,
                    input_dim,
                    classes,
                } => {
                    if node_id as usize != i {
                        return Err(ResomError::Param(format!(
                            "node at {} reports id {node_id}, expected {i}",
                            c.addr()
                        )));
                    }
                    if i == self.aggregator {
                        self.classes = classes as usize;
                    }
                    info.push(NodeInfo {
                        neurons: neurons as usize,
                        input_dim: input_dim as usize,
                    });
                }
                other => return Err(unexpected(c.addr(), &other)),
            }
        }
        self.info = info;
        Ok(())
    }

    fn check_sample(&self, sample: &[&[f64]]) -> Result<()> {
        check_len("modalities in sample", self.nodes(), sample.len())?;
        if self.info.len() == self.nodes() {
            for (v, info) in sample.iter().zip(&self.info) {
                check_len("sample input dimension", info.input_dim, v.len())?;
            }
        }
        Ok(())
    }

    /// Every node computes its activation for `rid`; returns per-node
    /// seconds.
    fn compute(&mut self, rid: u32, sample: &[&[f64]], fan: FanOut) -> Result<Vec<f64>> {
        fn one(c: &mut NodeClient, rid: u32, v: &[f64]) -> Result<f64> {
            let start = Instant::now();
            let msg = Message::ComputeActivation { input: v.to_vec() };
            match c.request(rid, &msg)? {
                Message::ActivationResult { .. } => Ok(start.elapsed().as_secs_f64()),
                other => Err(unexpected(c.addr(), &other)),
            }
        }
        match fan {
            FanOut::Serial => self
                .clients
                .iter_mut()
                .zip(sample)
                .map(|(c, v)| one(c, rid, v))
                .collect(),
            FanOut::Parallel => thread::scope(|s| {
                let handles: Vec<_> = self
                    .clients
                    .iter_mut()
                    .zip(sample)
                    .map(|(c, v)| s.spawn(move || one(c, rid, v)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("activation request thread panicked"))
                    .collect()
            }),
        }
    }

    /// Moves every non-aggregator activation to the aggregator.
    fn transfer(&mut self, rid: u32) -> Result<Vec<f64>> {
        let target = Message::PushForward {
            target: self.aggregator_addr.clone(),
        };
        let mut times = Vec::with_capacity(self.nodes().saturating_sub(1));
        for (i, c) in self.clients.iter_mut().enumerate() {
            if i == self.aggregator {
                continue;
            }
            let start = Instant::now();
            match c.request(rid, &target)? {
                Message::PushAck => times.push(start.elapsed().as_secs_f64()),
                other => return Err(unexpected(c.addr(), &other)),
            }
        }
        Ok(times)
    }

    /// Classifies `samples` (one input vector per node) and scores them
    /// against `truth`.
    pub fn run_inference(
        &mut self,
        samples: &[Vec<&[f64]>],
        truth: &[ClassId],
        fan: FanOut,
    ) -> Result<(EvaluationReport, TimingReport)> {
        check_len("test classes", samples.len(), truth.len())?;
        if self.info.is_empty() {
            return Err(ResomError::Protocol(
                "deployment has not been initialized".into(),
            ));
        }
        let n = samples.len();
        let mut timing = TimingSamples {
            activation: vec![Vec::with_capacity(n); self.nodes()],
            ..Default::default()
        };
        let mut outcomes = Vec::with_capacity(n);
        for (i, (sample, &t)) in samples.iter().zip(truth).enumerate() {
            let wall = Instant::now();
            let outcome = self
                .infer_one(sample, t, fan, &mut timing)
                .map_err(|e| abort(i, n, e))?;
            timing.sample_wall.push(wall.elapsed().as_secs_f64());
            outcomes.push(outcome);
        }
        let report = EvaluationReport::from_outcomes(self.classes, outcomes)?;
        Ok((report, timing_report(&timing, self.nodes())?))
    }

    fn infer_one(
        &mut self,
        sample: &[&[f64]],
        truth: ClassId,
        fan: FanOut,
        timing: &mut TimingSamples,
    ) -> Result<SampleOutcome> {
        self.check_sample(sample)?;
        let rid = self.request_id();
        for (series, t) in timing
            .activation
            .iter_mut()
            .zip(self.compute(rid, sample, fan)?)
        {
            series.push(t);
        }
        timing.transfer.extend(self.transfer(rid)?);
        let start = Instant::now();
        let agg = &mut self.clients[self.aggregator];
        let reply = agg.request(rid, &Message::Predict)?;
        timing.predict.push(start.elapsed().as_secs_f64());
        match reply {
            Message::PredictResult { class, map, neuron } => Ok(SampleOutcome {
                truth,
                predicted: class,
                map: map as usize,
                neuron: neuron as usize,
            }),
            other => Err(unexpected(agg.addr(), &other)),
        }
    }

    /// Trains the aggregator's lateral matrices on synchronized samples,
    /// then writes them into `persist_dir` when given.
    pub fn run_hebb_training(
        &mut self,
        samples: &[Vec<&[f64]>],
        persist_dir: Option<&Path>,
    ) -> Result<HebbRun> {
        if self.info.is_empty() {
            return Err(ResomError::Protocol(
                "deployment has not been initialized".into(),
            ));
        }
        let n = samples.len();
        let mut timing = TimingSamples {
            activation: vec![Vec::with_capacity(n); self.nodes()],
            ..Default::default()
        };
        for (i, sample) in samples.iter().enumerate() {
            let wall = Instant::now();
            self.hebb_one(sample, &mut timing)
                .map_err(|e| abort(i, n, e))?;
            timing.sample_wall.push(wall.elapsed().as_secs_f64());
        }
        if let Some(dir) = persist_dir {
            let rid = self.request_id();
            let dir = dir.to_str().ok_or_else(|| {
                ResomError::Param(format!("{} is not valid utf-8", dir.display()))
            })?;
            let agg = &mut self.clients[self.aggregator];
            match agg.request(
                rid,
                &Message::HebbPersist {
                    dir: dir.to_string(),
                },
            )? {
                Message::HebbAck => {}
                other => return Err(unexpected(agg.addr(), &other)),
            }
        }
        let timing = if n > 0 {
            Some(timing_report(&timing, self.nodes())?)
        } else {
            None
        };
        Ok(HebbRun { samples: n, timing })
    }

    fn hebb_one(&mut self, sample: &[&[f64]], timing: &mut TimingSamples) -> Result<()> {
        self.check_sample(sample)?;
        let rid = self.request_id();
        for (series, t) in
            timing
                .activation
                .iter_mut()
                .zip(self.compute(rid, sample, FanOut::Parallel)?)
        {
            series.push(t);
        }
        timing.transfer.extend(self.transfer(rid)?);
        let start = Instant::now();
        let agg = &mut self.clients[self.aggregator];
        match agg.request(rid, &Message::HebbStep)? {
            Message::HebbAck => {
                timing.predict.push(start.elapsed().as_secs_f64());
                Ok(())
            }
            other => Err(unexpected(agg.addr(), &other)),
        }
    }

    /// Asks every node to stop.
    pub fn shutdown(mut self) -> Result<()> {
        let rid = self.request_id();
        let mut first_err = None;
        for c in &mut self.clients {
            if let Err(e) = c.request(rid, &Message::Shutdown) {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }
}
