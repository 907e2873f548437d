//! Newline-delimited message format shared by transcripts and socket mode.
//!
//! Each record is one JSON object:
//!
//! ```text
//! {"kind":"gradient","sender":"worker-3","receiver":"master","seq":12,"time":5300,
//!  "payload":{"worker":3,"samples":10,"basis_version":41,"k":64,"d":9,
//!             "blocks":[[5,[0.1,...]],[17,[...]]]}}
//! ```
//!
//! Floats are written in shortest round-trip form and parsed exactly, so every
//! `f64` survives encode/decode bit for bit. `payload` is `null` for
//! `pull_request` and `shutdown`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, IgnoredAny, MapAccess, Visitor};
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::math::{CompoundInstance, CompoundWeight, Label, MathError, SparseGradient};

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed record: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid payload: {0}")]
    Payload(#[from] MathError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Master,
    Worker(usize),
    Spout,
}

impl NodeId {
    pub fn worker(self) -> Option<usize> {
        match self {
            NodeId::Worker(i) => Some(i),
            _ => None,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Master => f.write_str("master"),
            NodeId::Spout => f.write_str("spout"),
            NodeId::Worker(i) => write!(f, "worker-{i}"),
        }
    }
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "master" => Ok(NodeId::Master),
            "spout" => Ok(NodeId::Spout),
            other => other
                .strip_prefix("worker-")
                .and_then(|n| n.parse().ok())
                .map(NodeId::Worker)
                .ok_or_else(|| format!("unknown node id `{other}`")),
        }
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Data,
    PullRequest,
    Model,
    Gradient,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPayload {
    /// Position in the spout's stream.
    pub index: u64,
    pub task: usize,
    pub y: Label,
    pub x: Vec<f64>,
}

impl DataPayload {
    pub fn new(index: u64, inst: CompoundInstance) -> Self {
        Self {
            index,
            task: inst.task,
            y: inst.label,
            x: inst.features,
        }
    }

    pub fn into_instance(self) -> (u64, CompoundInstance) {
        (self.index, CompoundInstance::new(self.task, self.x, self.y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPayload {
    pub version: u64,
    pub k: usize,
    pub d: usize,
    pub w: Vec<f64>,
}

impl From<&CompoundWeight> for ModelPayload {
    fn from(w: &CompoundWeight) -> Self {
        Self {
            version: w.version(),
            k: w.tasks(),
            d: w.dim(),
            w: w.as_slice().to_vec(),
        }
    }
}

impl TryFrom<ModelPayload> for CompoundWeight {
    type Error = MathError;

    fn try_from(p: ModelPayload) -> Result<Self, MathError> {
        CompoundWeight::from_flat(p.k, p.d, p.w, p.version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientPayload {
    pub worker: usize,
    pub samples: usize,
    pub basis_version: u64,
    pub k: usize,
    pub d: usize,
    /// `[task, block]` pairs in ascending task order.
    pub blocks: Vec<(usize, Vec<f64>)>,
}

impl From<&SparseGradient> for GradientPayload {
    fn from(g: &SparseGradient) -> Self {
        Self {
            worker: g.worker(),
            samples: g.samples(),
            basis_version: g.basis_version(),
            k: g.tasks(),
            d: g.dim(),
            blocks: g.iter().map(|(t, b)| (t, b.to_vec())).collect(),
        }
    }
}

impl TryFrom<GradientPayload> for SparseGradient {
    type Error = MathError;

    fn try_from(p: GradientPayload) -> Result<Self, MathError> {
        let blocks: BTreeMap<usize, Vec<f64>> = p.blocks.into_iter().collect();
        SparseGradient::new(p.k, p.d, blocks, p.samples, p.basis_version, p.worker)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Data(DataPayload),
    PullRequest,
    Model(ModelPayload),
    Gradient(GradientPayload),
    Shutdown,
}

impl Body {
    pub fn kind(&self) -> Kind {
        match self {
            Body::Data(_) => Kind::Data,
            Body::PullRequest => Kind::PullRequest,
            Body::Model(_) => Kind::Model,
            Body::Gradient(_) => Kind::Gradient,
            Body::Shutdown => Kind::Shutdown,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub sender: NodeId,
    pub receiver: NodeId,
    /// Strictly increasing per sender.
    pub seq: u64,
    /// Virtual or wall-clock microseconds at send time.
    pub time: u64,
    pub body: Body,
}

impl Envelope {
    pub fn kind(&self) -> Kind {
        self.body.kind()
    }
}

impl Serialize for Envelope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Envelope", 6)?;
        st.serialize_field("kind", &self.kind())?;
        st.serialize_field("sender", &self.sender)?;
        st.serialize_field("receiver", &self.receiver)?;
        st.serialize_field("seq", &self.seq)?;
        st.serialize_field("time", &self.time)?;
        match &self.body {
            Body::Data(p) => st.serialize_field("payload", p)?,
            Body::Model(p) => st.serialize_field("payload", p)?,
            Body::Gradient(p) => st.serialize_field("payload", p)?,
            Body::PullRequest | Body::Shutdown => st.serialize_field("payload", &())?,
        }
        st.end()
    }
}

fn body_from_value(kind: Kind, v: serde_json::Value) -> Result<Body, serde_json::Error> {
    Ok(match kind {
        Kind::Data => Body::Data(serde_json::from_value(v)?),
        Kind::Model => Body::Model(serde_json::from_value(v)?),
        Kind::Gradient => Body::Gradient(serde_json::from_value(v)?),
        Kind::PullRequest => Body::PullRequest,
        Kind::Shutdown => Body::Shutdown,
    })
}

struct EnvelopeVisitor;

impl<'de> Visitor<'de> for EnvelopeVisitor {
    type Value = Envelope;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("an envelope object")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Envelope, A::Error> {
        let mut kind: Option<Kind> = None;
        let mut sender = None;
        let mut receiver = None;
        let mut seq = None;
        let mut time = None;
        let mut body: Option<Body> = None;
        // Only used when `payload` precedes `kind`.
        let mut deferred: Option<serde_json::Value> = None;

        while let Some(key) = map.next_key::<String>()? {
            match key.as_str() {
                "kind" => kind = Some(map.next_value()?),
                "sender" => sender = Some(map.next_value()?),
                "receiver" => receiver = Some(map.next_value()?),
                "seq" => seq = Some(map.next_value()?),
                "time" => time = Some(map.next_value()?),
                "payload" => match kind {
                    Some(Kind::Data) => body = Some(Body::Data(map.next_value()?)),
                    Some(Kind::Model) => body = Some(Body::Model(map.next_value()?)),
                    Some(Kind::Gradient) => body = Some(Body::Gradient(map.next_value()?)),
                    Some(Kind::PullRequest) => {
                        map.next_value::<IgnoredAny>()?;
                        body = Some(Body::PullRequest);
                    }
                    Some(Kind::Shutdown) => {
                        map.next_value::<IgnoredAny>()?;
                        body = Some(Body::Shutdown);
                    }
                    None => deferred = Some(map.next_value()?),
                },
                other => return Err(de::Error::unknown_field(other, FIELDS)),
            }
        }

        let kind = kind.ok_or_else(|| de::Error::missing_field("kind"))?;
        let body = match (body, deferred) {
            (Some(b), _) => b,
            (None, Some(v)) => body_from_value(kind, v).map_err(de::Error::custom)?,
            (None, None) => match kind {
                Kind::PullRequest => Body::PullRequest,
                Kind::Shutdown => Body::Shutdown,
                _ => return Err(de::Error::missing_field("payload")),
            },
        };
        Ok(Envelope {
            sender: sender.ok_or_else(|| de::Error::missing_field("sender"))?,
            receiver: receiver.ok_or_else(|| de::Error::missing_field("receiver"))?,
            seq: seq.ok_or_else(|| de::Error::missing_field("seq"))?,
            time: time.unwrap_or(0),
            body,
        })
    }
}

const FIELDS: &[&str] = &["kind", "sender", "receiver", "seq", "time", "payload"];

impl<'de> Deserialize<'de> for Envelope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_struct("Envelope", FIELDS, EnvelopeVisitor)
    }
}

/// One record, without the trailing newline.
pub fn encode(env: &Envelope) -> String {
    serde_json::to_string(env).expect("envelopes always serialize")
}

pub fn decode(line: &str) -> Result<Envelope, WireError> {
    Ok(serde_json::from_str(line.trim_end())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(env: &Envelope) -> Envelope {
        let line = encode(env);
        assert!(!line.contains('\n'));
        decode(&line).unwrap()
    }

    #[test]
    fn node_ids() {
        for id in [NodeId::Master, NodeId::Spout, NodeId::Worker(17)] {
            assert_eq!(id.to_string().parse::<NodeId>().unwrap(), id);
        }
        assert!("worker-x".parse::<NodeId>().is_err());
        assert!(NodeId::Master < NodeId::Worker(0));
        assert!(NodeId::Worker(9) < NodeId::Spout);
    }

    #[test]
    fn unit_kinds_roundtrip() {
        for body in [Body::PullRequest, Body::Shutdown] {
            let env = Envelope {
                sender: NodeId::Worker(2),
                receiver: NodeId::Master,
                seq: 4,
                time: 99,
                body,
            };
            assert_eq!(roundtrip(&env), env);
        }
    }

    #[test]
    fn gradient_record_layout() {
        let mut blocks = BTreeMap::new();
        blocks.insert(5, vec![0.1, -2.5e-300]);
        let g = SparseGradient::new(8, 2, blocks, 10, 41, 3).unwrap();
        let env = Envelope {
            sender: NodeId::Worker(3),
            receiver: NodeId::Master,
            seq: 12,
            time: 5300,
            body: Body::Gradient((&g).into()),
        };
        let line = encode(&env);
        assert!(line.starts_with(r#"{"kind":"gradient","sender":"worker-3","receiver":"master""#));
        assert!(line.contains(r#""blocks":[[5,[0.1,-2.5e-300]]]"#), "{line}");
        let back = roundtrip(&env);
        let Body::Gradient(p) = back.body else { panic!() };
        assert_eq!(SparseGradient::try_from(p).unwrap(), g);
    }

    #[test]
    fn payload_before_kind_is_accepted() {
        let line = r#"{"payload":{"index":3,"task":1,"y":-1,"x":[0.5]},"seq":3,"kind":"data","sender":"spout","receiver":"worker-0"}"#;
        let env = decode(line).unwrap();
        assert_eq!(env.kind(), Kind::Data);
        assert_eq!(env.time, 0);
    }

    #[test]
    fn malformed_records_fail() {
        assert!(decode("{}").is_err());
        assert!(decode(r#"{"kind":"model","sender":"master","receiver":"worker-0","seq":1}"#).is_err());
        assert!(decode(r#"{"kind":"data","sender":"spout","receiver":"worker-0","seq":1,"payload":{"index":0,"task":0,"y":2,"x":[]}}"#).is_err());
        assert!(decode("not json").is_err());
        let bad_model = ModelPayload {
            version: 1,
            k: 2,
            d: 2,
            w: vec![0.0; 3],
        };
        assert!(CompoundWeight::try_from(bad_model).is_err());
    }
}
