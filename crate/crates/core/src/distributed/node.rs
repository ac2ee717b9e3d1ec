//! Node service hosting one modality map. The aggregator node additionally
//! holds every lateral matrix and the neuron labels.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::client::NodeClient;
use super::wire::{
    chunk_activation, validate_packet_bytes, FrameReader, Incoming, InitMode, Message, Reassembler,
    DEFAULT_PACKET_BYTES,
};
use crate::error::{ResomError, Result};
use crate::hebbian::LateralMatrix;
use crate::model::{bundle_lateral_path, ResomModel};
use crate::som::{ActivationVector, SomMap};

pub const PACKET_BYTES_ENV: &str = "RESOM_PACKET_BYTES";
const MAX_PENDING_REQUESTS: usize = 4096;

fn default_packet_bytes() -> usize {
    DEFAULT_PACKET_BYTES
}

fn default_timeout_ms() -> u64 {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    /// Also the index of the hosted map within the model.
    pub node_id: u32,
    pub listen_address: String,
    /// RSOM map file. Defaults to `map_<node_id>.bin` inside `bundle`.
    #[serde(default)]
    pub map_file: Option<PathBuf>,
    /// Model bundle with lateral matrices and labels; required on the
    /// aggregator.
    #[serde(default)]
    pub bundle: Option<PathBuf>,
    #[serde(default = "default_packet_bytes")]
    pub packet_payload_bytes: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Artificial delay added to every activation computation.
    #[serde(default)]
    pub activation_delay_ms: u64,
}

impl NodeConfig {
    pub fn new(node_id: u32, listen_address: impl Into<String>) -> Self {
        Self {
            node_id,
            listen_address: listen_address.into(),
            map_file: None,
            bundle: None,
            packet_payload_bytes: DEFAULT_PACKET_BYTES,
            timeout_ms: default_timeout_ms(),
            activation_delay_ms: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Applies `RESOM_PACKET_BYTES` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(PACKET_BYTES_ENV) {
            self.packet_payload_bytes = v.trim().parse().map_err(|_| {
                ResomError::Param(format!("{PACKET_BYTES_ENV}={v:?} is not an integer"))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        validate_packet_bytes(self.packet_payload_bytes)?;
        if self.timeout_ms == 0 {
            return Err(ResomError::Param("timeout_ms must be >= 1".into()));
        }
        if self.map_file.is_none() && self.bundle.is_none() {
            return Err(ResomError::Param(
                "node needs a map_file or a bundle".into(),
            ));
        }
        Ok(())
    }

    fn map_path(&self) -> PathBuf {
        match (&self.map_file, &self.bundle) {
            (Some(p), _) => p.clone(),
            (None, Some(b)) => b.join(format!("map_{}.bin", self.node_id)),
            (None, None) => PathBuf::new(),
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

struct Loaded {
    map: SomMap,
    nodes: u32,
    /// Present on the aggregator only.
    model: Option<ResomModel>,
}

#[derive(Default)]
struct NodeState {
    loaded: Option<Loaded>,
    activations: BTreeMap<u32, BTreeMap<u32, ActivationVector>>,
    reassembler: Reassembler,
}

struct Shared {
    config: NodeConfig,
    local_addr: SocketAddr,
    state: Mutex<NodeState>,
    peers: Mutex<HashMap<String, NodeClient>>,
    shutdown: AtomicBool,
}

pub struct NodeServer {
    listener: TcpListener,
    shared: Arc<Shared>,
}

/// Binds and serves until a `SHUTDOWN` request arrives.
pub fn serve_node(config: NodeConfig) -> Result<()> {
    NodeServer::bind(config)?.run()
}

impl NodeServer {
    pub fn bind(config: NodeConfig) -> Result<Self> {
        config.validate()?;
        SomMap::load(&config.map_path())?;
        let listener = TcpListener::bind(&config.listen_address)?;
        let local_addr = listener.local_addr()?;
        Ok(Self {
            listener,
            shared: Arc::new(Shared {
                config,
                local_addr,
                state: Mutex::new(NodeState::default()),
                peers: Mutex::new(HashMap::new()),
                shutdown: AtomicBool::new(false),
            }),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.shared.local_addr
    }

    pub fn run(self) -> Result<()> {
        info!(
            "node {} listening on {}",
            self.shared.config.node_id, self.shared.local_addr
        );
        for stream in self.listener.incoming() {
            if self.shared.shutdown.load(Ordering::SeqCst) {
                break;
            }
            match stream {
                Ok(s) => {
                    let shared = Arc::clone(&self.shared);
                    thread::spawn(move || {
                        if let Err(e) = serve_connection(&shared, s) {
                            debug!("connection closed: {e}");
                        }
                    });
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
        info!("node {} shut down", self.shared.config.node_id);
        Ok(())
    }
}

fn serve_connection(shared: &Shared, stream: TcpStream) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = FrameReader::new(stream.try_clone()?);
    let mut writer = stream;
    while let Some(incoming) = reader.next_incoming()? {
        let (request_id, reply) = match incoming {
            Incoming::Frame(frame) => {
                let reply = match Message::from_frame(&frame) {
                    Ok(msg) => handle(shared, frame.request_id, msg),
                    Err(e) => Err(e),
                };
                (
                    frame.request_id,
                    reply.unwrap_or_else(|e| Message::Error {
                        text: error_text(&e),
                    }),
                )
            }
            Incoming::Malformed { request_id, reason } => {
                warn!("node {}: malformed input: {reason}", shared.config.node_id);
                (request_id.unwrap_or(0), Message::Error { text: reason })
            }
        };
        writer.write_all(&reply.to_frame(request_id).encode())?;
        writer.flush()?;
        if matches!(reply, Message::Shutdown) {
            shared.shutdown.store(true, Ordering::SeqCst);
            // wake the accept loop
            let _ = TcpStream::connect(shared.local_addr);
            return Ok(());
        }
    }
    Ok(())
}

fn error_text(e: &ResomError) -> String {
    match e {
        ResomError::Prediction(m)
        | ResomError::Protocol(m)
        | ResomError::Remote(m)
        | ResomError::Transfer(m) => m.clone(),
        other => other.to_string(),
    }
}

fn handle(shared: &Shared, request_id: u32, msg: Message) -> Result<Message> {
    let id = shared.config.node_id;
    match msg {
        Message::Init {
            nodes,
            aggregator,
            mode,
        } => {
            let loaded = load_state(&shared.config, nodes, aggregator, mode)?;
            let neurons = loaded.map.neurons() as u32;
            let input_dim = loaded.map.input_dim() as u32;
            let classes = loaded.model.as_ref().map_or(0, |m| m.classes() as u32);
            let mut st = shared.state.lock().unwrap();
            *st = NodeState {
                loaded: Some(loaded),
                ..NodeState::default()
            };
            Ok(Message::InitAck {
                node_id: id,
                neurons,
                input_dim,
                classes,
            })
        }
        Message::ComputeActivation { input } => {
            if shared.config.activation_delay_ms > 0 {
                thread::sleep(Duration::from_millis(shared.config.activation_delay_ms));
            }
            let mut st = shared.state.lock().unwrap();
            let act = loaded(&st)?.map.activation(&input)?;
            let reply = Message::ActivationResult {
                values: act.values.clone(),
                bmu: act.bmu_index as u32,
            };
            store(&mut st, request_id, id, act);
            Ok(reply)
        }
        Message::PushForward { target } => {
            let act = {
                let mut st = shared.state.lock().unwrap();
                loaded(&st)?;
                let entry = st.activations.get_mut(&request_id);
                let act = entry.and_then(|e| e.remove(&id)).ok_or_else(|| {
                    ResomError::Transfer(format!("no activation computed for request {request_id}"))
                })?;
                if st
                    .activations
                    .get(&request_id)
                    .is_some_and(|e| e.is_empty())
                {
                    st.activations.remove(&request_id);
                }
                act
            };
            let chunks = chunk_activation(
                id,
                &act.values,
                act.bmu_index as u32,
                shared.config.packet_payload_bytes,
            )?;
            let mut peers = shared.peers.lock().unwrap();
            if !peers.contains_key(&target) {
                peers.insert(
                    target.clone(),
                    NodeClient::connect(&target, shared.config.timeout())?,
                );
            }
            let client = peers.get_mut(&target).unwrap();
            for c in &chunks {
                if let Err(e) = client.request(request_id, c).and_then(expect_push_ack) {
                    peers.remove(&target);
                    return Err(e);
                }
            }
            Ok(Message::PushAck)
        }
        Message::PushChunk {
            source,
            bmu,
            total_len,
            offset,
            data,
        } => {
            let mut st = shared.state.lock().unwrap();
            let nodes = aggregator_model(&st)?.k() as u32;
            if source >= nodes || source == id {
                return Err(ResomError::Transfer(format!(
                    "unexpected activation source {source}"
                )));
            }
            if let Some(done) = st
                .reassembler
                .accept(request_id, source, bmu, total_len, offset, &data)?
            {
                let expected = aggregator_model(&st)?.map(source as usize).neurons();
                let bmu = done.bmu as usize;
                if done.values.len() != expected || bmu >= expected {
                    return Err(ResomError::Transfer(format!(
                        "activation from node {source} has {} values and bmu {bmu}, expected {expected} values",
                        done.values.len()
                    )));
                }
                let act = ActivationVector {
                    bmu_value: done.values[bmu],
                    bmu_index: bmu,
                    values: done.values,
                };
                store(&mut st, request_id, source, act);
            }
            Ok(Message::PushAck)
        }
        Message::Predict => {
            let mut st = shared.state.lock().unwrap();
            let acts = take_complete(&mut st, request_id)?;
            let model = aggregator_model(&st)?;
            let (map, neuron) = model.winner(&acts)?;
            Ok(Message::PredictResult {
                class: model.labels()[map][neuron],
                map: map as u32,
                neuron: neuron as u32,
            })
        }
        Message::HebbStep => {
            let mut st = shared.state.lock().unwrap();
            let acts = take_complete(&mut st, request_id)?;
            let model = st
                .loaded
                .as_mut()
                .and_then(|l| l.model.as_mut())
                .ok_or_else(|| ResomError::Protocol("this node is not the aggregator".into()))?;
            let pairs = model.pairs();
            for ((l, j), w) in pairs.into_iter().zip(model.laterals_mut()) {
                w.hebb_update(
                    acts[l].bmu_index,
                    acts[l].bmu_value,
                    acts[j].bmu_index,
                    acts[j].bmu_value,
                )?;
            }
            Ok(Message::HebbAck)
        }
        Message::HebbPersist { dir } => {
            let st = shared.state.lock().unwrap();
            let model = aggregator_model(&st)?;
            let dir = PathBuf::from(dir);
            std::fs::create_dir_all(&dir)?;
            for ((l, j), w) in model.pairs().into_iter().zip(model.laterals()) {
                w.save(&bundle_lateral_path(&dir, l, j))?;
            }
            Ok(Message::HebbAck)
        }
        Message::Shutdown => Ok(Message::Shutdown),
        other => Err(ResomError::Protocol(format!(
            "unexpected {:?} request",
            other.msg_type()
        ))),
    }
}

fn expect_push_ack(m: Message) -> Result<()> {
    match m {
        Message::PushAck => Ok(()),
        other => Err(ResomError::Protocol(format!(
            "expected a push ack, got {:?}",
            other.msg_type()
        ))),
    }
}

fn load_state(config: &NodeConfig, nodes: u32, aggregator: u32, mode: InitMode) -> Result<Loaded> {
    if nodes == 0 || config.node_id >= nodes || aggregator >= nodes {
        return Err(ResomError::Param(format!(
            "node {} cannot join a {nodes}-node deployment with aggregator {aggregator}",
            config.node_id
        )));
    }
    let map = SomMap::load(&config.map_path())?;
    if config.node_id != aggregator {
        return Ok(Loaded {
            map,
            nodes,
            model: None,
        });
    }
    let bundle = config
        .bundle
        .as_ref()
        .ok_or_else(|| ResomError::Param("the aggregator needs a model bundle".into()))?;
    let mut model = ResomModel::load(bundle)?;
    if model.k() != nodes as usize {
        return Err(ResomError::Param(format!(
            "bundle holds {} maps but the deployment has {nodes} nodes",
            model.k()
        )));
    }
    if model.map(config.node_id as usize) != &map {
        return Err(ResomError::Param(format!(
            "map file {} differs from map {} of the bundle",
            config.map_path().display(),
            config.node_id
        )));
    }
    if mode == InitMode::Hebbian {
        for w in model.laterals_mut() {
            *w = LateralMatrix::zeros(w.rows(), w.cols(), w.mu())?;
        }
    }
    Ok(Loaded {
        map,
        nodes,
        model: Some(model),
    })
}

fn loaded(st: &NodeState) -> Result<&Loaded> {
    st.loaded
        .as_ref()
        .ok_or_else(|| ResomError::Protocol("node has not been initialized".into()))
}

fn aggregator_model(st: &NodeState) -> Result<&ResomModel> {
    loaded(st)?
        .model
        .as_ref()
        .ok_or_else(|| ResomError::Protocol("this node is not the aggregator".into()))
}

fn store(st: &mut NodeState, request_id: u32, source: u32, act: ActivationVector) {
    st.activations
        .entry(request_id)
        .or_default()
        .insert(source, act);
    while st.activations.len() > MAX_PENDING_REQUESTS {
        let oldest = *st.activations.keys().next().unwrap();
        st.activations.remove(&oldest);
        st.reassembler.discard(oldest);
    }
}

/// Removes and returns the activations of every node for `request_id`,
/// ordered by node id.
fn take_complete(st: &mut NodeState, request_id: u32) -> Result<Vec<ActivationVector>> {
    let nodes = loaded(st)?.nodes;
    aggregator_model(st)?;
    let have = st.activations.get(&request_id).map_or(0, |e| e.len());
    if have != nodes as usize {
        return Err(ResomError::Prediction("incomplete activations".into()));
    }
    Ok(st
        .activations
        .remove(&request_id)
        .unwrap()
        .into_values()
        .collect())
}
