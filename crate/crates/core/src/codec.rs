//! Canonical encoder/decoder for the cloud record envelope.
//!
//! The encoded form is compact UTF-8 JSON with top-level keys in the fixed
//! order `device_id, timestamp, event_type, seq, data`, and `data` keys in
//! insertion order. Equal records always encode to identical bytes, which is
//! what makes retransmissions deduplicable downstream. Decoding also accepts
//! pretty-printed input and records without `seq`.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{DeviceId, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("malformed JSON: {0}")]
    ParseError(String),
    #[error("schema violation: {0}")]
    SchemaError(String),
    #[error("unknown event type {0:?}")]
    UnknownEventType(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventType {
    AccessGranted,
    AccessDenied,
    FlameDetected,
    FlowAnomaly,
    Status,
    PersonnelScan,
}

impl EventType {
    pub const ALL: [EventType; 6] = [
        EventType::AccessGranted,
        EventType::AccessDenied,
        EventType::FlameDetected,
        EventType::FlowAnomaly,
        EventType::Status,
        EventType::PersonnelScan,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::AccessGranted => "access_granted",
            EventType::AccessDenied => "access_denied",
            EventType::FlameDetected => "flame_detected",
            EventType::FlowAnomaly => "flow_anomaly",
            EventType::Status => "status",
            EventType::PersonnelScan => "personnel_scan",
        }
    }
}

impl FromStr for EventType {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventType::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| CodecError::UnknownEventType(s.to_string()))
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for EventType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EventType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Scalar payload value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataValue {
    Str(String),
    Int(i64),
    Bool(bool),
}

impl fmt::Display for DataValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataValue::Str(s) => f.write_str(s),
            DataValue::Int(i) => write!(f, "{i}"),
            DataValue::Bool(b) => write!(f, "{b}"),
        }
    }
}

impl From<&str> for DataValue {
    fn from(s: &str) -> Self {
        DataValue::Str(s.to_string())
    }
}

impl From<String> for DataValue {
    fn from(s: String) -> Self {
        DataValue::Str(s)
    }
}

impl From<i64> for DataValue {
    fn from(i: i64) -> Self {
        DataValue::Int(i)
    }
}

impl From<bool> for DataValue {
    fn from(b: bool) -> Self {
        DataValue::Bool(b)
    }
}

impl DataValue {
    fn to_json(&self) -> Value {
        match self {
            DataValue::Str(s) => Value::String(s.clone()),
            DataValue::Int(i) => Value::from(*i),
            DataValue::Bool(b) => Value::Bool(*b),
        }
    }
}

pub type DataMap = IndexMap<String, DataValue>;

/// The cloud event envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudRecord {
    pub device_id: DeviceId,
    pub timestamp: Timestamp,
    pub event_type: EventType,
    pub data: DataMap,
    pub seq: u64,
}

impl CloudRecord {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.timestamp.millis() != 0 {
            return Err(CodecError::InvalidRecord(
                "timestamp must have whole-second precision".into(),
            ));
        }
        if self.data.keys().any(|k| k.is_empty()) {
            return Err(CodecError::InvalidRecord("empty data key".into()));
        }
        if self.seq > i64::MAX as u64 {
            return Err(CodecError::InvalidRecord("seq exceeds i64 range".into()));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&DataValue> {
        self.data.get(key)
    }
}

/// Compact canonical bytes for `r`.
pub fn encode(r: &CloudRecord) -> Result<Vec<u8>, CodecError> {
    r.validate()?;
    let mut data = serde_json::Map::new();
    for (k, v) in &r.data {
        data.insert(k.clone(), v.to_json());
    }
    let mut obj = serde_json::Map::new();
    obj.insert("device_id".into(), Value::String(r.device_id.to_string()));
    obj.insert("timestamp".into(), Value::String(r.timestamp.to_iso8601()));
    obj.insert("event_type".into(), Value::String(r.event_type.as_str().into()));
    obj.insert("seq".into(), Value::from(r.seq));
    obj.insert("data".into(), Value::Object(data));
    serde_json::to_vec(&Value::Object(obj)).map_err(|e| CodecError::InvalidRecord(e.to_string()))
}

/// Decodes a record. A missing `seq` decodes as 0; use [`decode_with`] to
/// assign one from arrival order instead.
pub fn decode(bytes: &[u8]) -> Result<CloudRecord, CodecError> {
    decode_with(bytes, |_| 0)
}

/// Decodes a record, calling `missing_seq` to assign a sequence number when
/// the input omits one.
pub fn decode_with(
    bytes: &[u8],
    missing_seq: impl FnOnce(&DeviceId) -> u64,
) -> Result<CloudRecord, CodecError> {
    let raw: RawEnvelope = serde_json::from_slice(bytes).map_err(classify)?;
    let device_id = raw
        .device_id
        .ok_or_else(|| CodecError::SchemaError("missing device_id".into()))?;
    let device_id =
        DeviceId::parse(&device_id).map_err(|e| CodecError::SchemaError(e.to_string()))?;
    let timestamp = raw
        .timestamp
        .ok_or_else(|| CodecError::SchemaError("missing timestamp".into()))?;
    let timestamp =
        Timestamp::parse_iso8601(&timestamp).map_err(|e| CodecError::SchemaError(e.to_string()))?;
    let event_type: EventType = raw
        .event_type
        .ok_or_else(|| CodecError::SchemaError("missing event_type".into()))?
        .parse()?;
    let data = raw
        .data
        .ok_or_else(|| CodecError::SchemaError("missing data".into()))?
        .0;
    if data.keys().any(|k| k.is_empty()) {
        return Err(CodecError::SchemaError("empty data key".into()));
    }
    let seq = match raw.seq {
        Some(s) => s,
        None => missing_seq(&device_id),
    };
    if seq > i64::MAX as u64 {
        return Err(CodecError::SchemaError("seq out of range".into()));
    }
    Ok(CloudRecord {
        device_id,
        timestamp,
        event_type,
        data,
        seq,
    })
}

/// `<device_id>:<seq>`, stable across retransmissions of one logical record.
pub fn idempotency_key(r: &CloudRecord) -> String {
    format!("{}:{}", r.device_id, r.seq)
}

fn classify(e: serde_json::Error) -> CodecError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Syntax | Category::Eof | Category::Io => CodecError::ParseError(e.to_string()),
        Category::Data => CodecError::SchemaError(e.to_string()),
    }
}

#[derive(Default)]
struct RawEnvelope {
    device_id: Option<String>,
    timestamp: Option<String>,
    event_type: Option<String>,
    seq: Option<u64>,
    data: Option<StrictData>,
}

impl<'de> Deserialize<'de> for RawEnvelope {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EnvelopeVisitor;

        impl<'de> Visitor<'de> for EnvelopeVisitor {
            type Value = RawEnvelope;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a cloud record object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawEnvelope, A::Error> {
                fn set<T, E: de::Error>(slot: &mut Option<T>, v: T, key: &str) -> Result<(), E> {
                    if slot.is_some() {
                        return Err(E::custom(format!("duplicate key {key:?}")));
                    }
                    *slot = Some(v);
                    Ok(())
                }
                let mut env = RawEnvelope::default();
                while let Some(key) = map.next_key::<String>()? {
                    match key.as_str() {
                        "device_id" => set(&mut env.device_id, map.next_value()?, &key)?,
                        "timestamp" => set(&mut env.timestamp, map.next_value()?, &key)?,
                        "event_type" => set(&mut env.event_type, map.next_value()?, &key)?,
                        "seq" => set(&mut env.seq, map.next_value()?, &key)?,
                        "data" => set(&mut env.data, map.next_value()?, &key)?,
                        other => {
                            return Err(de::Error::custom(format!("unknown key {other:?}")));
                        }
                    }
                }
                Ok(env)
            }
        }

        deserializer.deserialize_map(EnvelopeVisitor)
    }
}

/// Data object that rejects duplicate keys and non-scalar values.
struct StrictData(DataMap);

impl<'de> Deserialize<'de> for StrictData {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct DataVisitor;

        impl<'de> Visitor<'de> for DataVisitor {
            type Value = StrictData;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object of scalar values")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<StrictData, A::Error> {
                let mut out = DataMap::new();
                while let Some(key) = map.next_key::<String>()? {
                    let v: ScalarValue = map.next_value()?;
                    if out.insert(key.clone(), v.0).is_some() {
                        return Err(de::Error::custom(format!("duplicate data key {key:?}")));
                    }
                }
                Ok(StrictData(out))
            }
        }

        deserializer.deserialize_map(DataVisitor)
    }
}

struct ScalarValue(DataValue);

impl<'de> Deserialize<'de> for ScalarValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ScalarVisitor;

        impl<'de> Visitor<'de> for ScalarVisitor {
            type Value = ScalarValue;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a string, integer or boolean")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<ScalarValue, E> {
                Ok(ScalarValue(DataValue::Str(v.to_string())))
            }

            fn visit_string<E: de::Error>(self, v: String) -> Result<ScalarValue, E> {
                Ok(ScalarValue(DataValue::Str(v)))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<ScalarValue, E> {
                Ok(ScalarValue(DataValue::Int(v)))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<ScalarValue, E> {
                i64::try_from(v)
                    .map(|i| ScalarValue(DataValue::Int(i)))
                    .map_err(|_| E::custom("integer out of range"))
            }

            fn visit_bool<E: de::Error>(self, v: bool) -> Result<ScalarValue, E> {
                Ok(ScalarValue(DataValue::Bool(v)))
            }
        }

        deserializer.deserialize_any(ScalarVisitor)
    }
}

/// Assigns per-device sequence numbers to outgoing records.
#[derive(Debug, Clone)]
pub struct RecordStamper {
    device_id: DeviceId,
    next_seq: u64,
}

impl RecordStamper {
    pub fn new(device_id: DeviceId) -> Self {
        Self {
            device_id,
            next_seq: 0,
        }
    }

    pub fn device_id(&self) -> &DeviceId {
        &self.device_id
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Builds the next record; the timestamp is truncated to whole seconds.
    pub fn stamp(&mut self, event_type: EventType, at: Timestamp, data: DataMap) -> CloudRecord {
        let seq = self.next_seq;
        self.next_seq += 1;
        CloudRecord {
            device_id: self.device_id.clone(),
            timestamp: at.truncate_to_second(),
            event_type,
            data,
            seq,
        }
    }
}
