//! Slice payloads: `u32` LE header length, a JSON header, then each layer's
//! values little-endian, concatenated in header order. Values are laid out
//! `x + nx * y`.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl LayerData {
    fn dtype(&self) -> &'static str {
        match self {
            LayerData::U8(_) => "u8",
            LayerData::U16(_) => "u16",
            LayerData::F32(_) => "f32",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            LayerData::U8(v) => v.len(),
            LayerData::U16(v) => 2 * v.len(),
            LayerData::F32(v) => 4 * v.len(),
        }
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        let b: Box<dyn Iterator<Item = f64>> = match self {
            LayerData::U8(v) => Box::new(v.iter().map(|&a| a as f64)),
            LayerData::U16(v) => Box::new(v.iter().map(|&a| a as f64)),
            LayerData::F32(v) => Box::new(v.iter().map(|&a| a as f64)),
        };
        b
    }

    fn value_range(&self) -> [f64; 2] {
        let (lo, hi) = self
            .values()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo > hi {
            [0.0, 0.0]
        } else {
            [lo, hi]
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            LayerData::U8(v) => out.extend_from_slice(v),
            LayerData::U16(v) => v.iter().for_each(|a| out.extend_from_slice(&a.to_le_bytes())),
            LayerData::F32(v) => v.iter().for_each(|a| out.extend_from_slice(&a.to_le_bytes())),
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            LayerData::U8(v) => serde_json::json!(v),
            LayerData::U16(v) => serde_json::json!(v),
            LayerData::F32(v) => serde_json::json!(v),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: &'static str,
    pub data: LayerData,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SliceMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub series_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view: Option<String>,
    /// `[window, level]` applied to windowed layers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<[f64; 2]>,
    pub z: usize,
    pub dims: [usize; 2],
}

#[derive(Debug, Serialize)]
struct LayerHeader {
    name: &'static str,
    dtype: &'static str,
    value_range: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    offset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    byte_length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<serde_json::Value>,
}

#[derive(Debug, Serialize)]
struct Header<'a> {
    #[serde(flatten)]
    meta: &'a SliceMeta,
    order: &'static str,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Clone)]
pub struct SlicePayload {
    pub meta: SliceMeta,
    pub layers: Vec<Layer>,
}

impl SlicePayload {
    fn header(&self, inline: bool) -> Header<'_> {
        let mut offset = 0;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let bytes = l.data.byte_len();
                let h = LayerHeader {
                    name: l.name,
                    dtype: l.data.dtype(),
                    value_range: l.data.value_range(),
                    offset: (!inline).then_some(offset),
                    byte_length: (!inline).then_some(bytes),
                    values: inline.then(|| l.data.to_json()),
                };
                offset += bytes;
                h
            })
            .collect();
        Header {
            meta: &self.meta,
            order: "x_fastest",
            layers,
        }
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header(false)).expect("header serialises");
        let mut out = Vec::with_capacity(4 + header.len());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for l in &self.layers {
            l.data.write_le(&mut out);
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.header(true)).expect("header serialises")
    }
}
