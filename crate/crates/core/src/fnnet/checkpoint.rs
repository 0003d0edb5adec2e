use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{FnNet, FnNetConfig, FnNetError};
use crate::diffcore::{RunningStats, Tensor};
use crate::jsonfmt::{push_f64_array, push_string};

/// A model snapshot: `{config, epoch, params: {name: {shape, data}},
/// bn: {name: {mean, var}}}`. Floats are written with 17 significant
/// digits, so a reload is bit-exact.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub net: FnNet,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCheckpoint {
    config: FnNetConfig,
    epoch: usize,
    params: BTreeMap<String, RawTensor>,
    bn: BTreeMap<String, RawStats>,
}

fn bad(message: impl Into<String>) -> FnNetError {
    FnNetError::Checkpoint(message.into())
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let w = &self.net.weights;
        let mut out = String::from("{\"config\":");
        out.push_str(&serde_json::to_string(self.net.config()).expect("config serializes"));
        out.push_str(&format!(",\"epoch\":{},\"params\":{{", self.epoch));
        for (i, p) in w.params.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            push_string(&mut out, &p.name);
            out.push_str(":{\"shape\":");
            out.push_str(&serde_json::to_string(p.value.shape()).expect("shape serializes"));
            out.push_str(",\"data\":");
            push_f64_array(&mut out, p.value.data().iter().copied());
            out.push('}');
        }
        out.push_str("},\"bn\":{");
        for (i, (name, s)) in w.stats.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            push_string(&mut out, name);
            out.push_str(":{\"mean\":");
            push_f64_array(&mut out, s.mean.iter().copied());
            out.push_str(",\"var\":");
            push_f64_array(&mut out, s.var.iter().copied());
            out.push('}');
        }
        out.push_str("}}\n");
        out
    }

    /// Rebuilds the model from its config and checks that every parameter
    /// and statistic is present with the expected shape, and nothing else.
    pub fn from_json(text: &str) -> Result<Self, FnNetError> {
        let raw: RawCheckpoint = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let mut net = FnNet::new(raw.config, 0)?;
        let mut params = raw.params;
        for p in net.weights.params.iter_mut() {
            let t = params.remove(&p.name).ok_or_else(|| bad(format!("missing parameter `{}`", p.name)))?;
            if t.shape != p.value.shape() {
                return Err(bad(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(t.shape, t.data).map_err(|e| bad(format!("parameter `{}`: {e}", p.name)))?;
        }
        if let Some(extra) = params.keys().next() {
            return Err(bad(format!("unknown parameter `{extra}`")));
        }
        let mut bn = raw.bn;
        for (name, stats) in net.weights.stats.iter_mut() {
            let s = bn.remove(name).ok_or_else(|| bad(format!("missing batch-norm stats `{name}`")))?;
            if s.mean.len() != stats.len() || s.var.len() != stats.len() {
                return Err(bad(format!("batch-norm stats `{name}` have the wrong length")));
            }
            if s.var.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || s.mean.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("batch-norm stats `{name}` are not finite and nonnegative")));
            }
            *stats = RunningStats { mean: s.mean, var: s.var };
        }
        if let Some(extra) = bn.keys().next() {
            return Err(bad(format!("unknown batch-norm stats `{extra}`")));
        }
        Ok(Self { epoch: raw.epoch, net })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> FnNetError {
    FnNetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_checkpoint(net: &FnNet, epoch: usize, path: impl AsRef<Path>) -> Result<(), FnNetError> {
    let path = path.as_ref();
    let ck = Checkpoint { epoch, net: net.clone() };
    std::fs::write(path, ck.to_json()).map_err(|e| io_err(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, FnNetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Checkpoint::from_json(&text)
}
