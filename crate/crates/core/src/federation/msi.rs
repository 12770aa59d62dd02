//! Model state information (MSI) messages and the channel they cross.

use serde::{Deserialize, Serialize};

use crate::nn::LabelTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsiKind {
    Gradient,
    Weights,
    LogitTable,
    JacobianTable,
    GpdGradient,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Endpoint {
    Helper,
    Device(usize),
    /// Broadcast from the helper to every device.
    AllDevices,
    /// One device-to-device transmission heard by several neighbors.
    Peers(Vec<usize>),
}

/// Local estimate uploaded by a device in federated tail fitting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpdReport {
    pub sigma: f64,
    pub xi: f64,
    pub grad: [f64; 2],
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Vector(Vec<f64>),
    Table(LabelTable),
    Gpd(GpdReport),
}

impl Payload {
    pub fn element_count(&self) -> usize {
        match self {
            Payload::Vector(v) => v.len(),
            Payload::Table(t) => t.element_count(),
            // two parameters, two gradient entries, one sample count
            Payload::Gpd(_) => 5,
        }
    }

    /// Real-valued entries that quantization and noise act on.
    pub fn values_mut(&mut self) -> Box<dyn Iterator<Item = &mut f64> + '_> {
        match self {
            Payload::Vector(v) => Box::new(v.iter_mut()),
            Payload::Table(t) => Box::new(t.present_values_mut()),
            Payload::Gpd(_) => Box::new(std::iter::empty()),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Payload::Vector(v) => v.clone(),
            Payload::Table(t) => t.present_values().copied().collect(),
            Payload::Gpd(g) => vec![g.sigma, g.xi, g.grad[0], g.grad[1]],
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Payload::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_table(&self) -> Option<&LabelTable> {
        match self {
            Payload::Table(t) => Some(t),
            _ => None,
        }
    }
}

pub const DEFAULT_ELEMENT_BITS: u32 = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct MsiMessage {
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: MsiKind,
    pub payload: Payload,
    pub element_bits: u32,
    /// Sequential exchange phase within a round (GADMM heads then tails).
    pub phase: u8,
}

impl MsiMessage {
    pub fn new(from: Endpoint, to: Endpoint, kind: MsiKind, payload: Payload) -> Self {
        MsiMessage { from, to, kind, payload, element_bits: DEFAULT_ELEMENT_BITS, phase: 0 }
    }

    pub fn upload(device: usize, kind: MsiKind, payload: Payload) -> Self {
        Self::new(Endpoint::Device(device), Endpoint::Helper, kind, payload)
    }

    pub fn broadcast(kind: MsiKind, payload: Payload) -> Self {
        Self::new(Endpoint::Helper, Endpoint::AllDevices, kind, payload)
    }

    pub fn to_device(device: usize, kind: MsiKind, payload: Payload) -> Self {
        Self::new(Endpoint::Helper, Endpoint::Device(device), kind, payload)
    }

    pub fn to_peers(device: usize, peers: Vec<usize>, kind: MsiKind, payload: Payload, phase: u8) -> Self {
        let mut m = Self::new(Endpoint::Device(device), Endpoint::Peers(peers), kind, payload);
        m.phase = phase;
        m
    }

    /// Sent by a device (to the helper or to peers).
    pub fn is_uplink(&self) -> bool {
        matches!(self.from, Endpoint::Device(_))
    }

    pub fn element_count(&self) -> usize {
        self.payload.element_count()
    }

    pub fn bits(&self) -> u64 {
        self.element_count() as u64 * u64::from(self.element_bits)
    }
}

/// Transport between sender and receiver. Returns what the receiver sees.
pub trait Channel {
    fn transmit(&mut self, msg: MsiMessage) -> MsiMessage;
}

/// Delivers every message unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct Lossless;

impl Channel for Lossless {
    fn transmit(&mut self, msg: MsiMessage) -> MsiMessage {
        msg
    }
}

/// All messages emitted during one protocol round, as received.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundMsi {
    pub messages: Vec<MsiMessage>,
}

impl RoundMsi {
    pub fn push(&mut self, msg: MsiMessage) {
        self.messages.push(msg);
    }

    pub fn uplink(&self) -> impl Iterator<Item = &MsiMessage> {
        self.messages.iter().filter(|m| m.is_uplink())
    }

    pub fn downlink(&self) -> impl Iterator<Item = &MsiMessage> {
        self.messages.iter().filter(|m| !m.is_uplink())
    }

    pub fn uplink_bits(&self) -> u64 {
        self.uplink().map(MsiMessage::bits).sum()
    }

    pub fn downlink_bits(&self) -> u64 {
        self.downlink().map(MsiMessage::bits).sum()
    }

    pub fn uplink_elements(&self) -> usize {
        self.uplink().map(MsiMessage::element_count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}
