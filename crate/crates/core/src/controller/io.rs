//! JSON weight files.
//!
//! ```json
//! {
//!   "format": "lambdarc-controller",
//!   "format_version": 1,
//!   "seed": 7,
//!   "delta_max": 0.2,
//!   "hidden_size": 64,
//!   "parameter_count": 71041,
//!   "shapes": { "embed_b.l1.weight": [64, 5], ... },
//!   "tensors": { "embed_b.l1.weight": [[...], ...], "embed_b.l1.bias": [...], ... }
//! }
//! ```
//!
//! Matrices are row-major nested arrays; vectors are flat arrays.

use std::io::{Read, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{range, ControllerWeights, HIDDEN, PARAMETER_COUNT, TENSORS};
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "lambdarc-controller";
pub const FORMAT_VERSION: u64 = 1;

fn tensor_value(data: &[f64], shape: &[usize]) -> Value {
    match shape {
        [_] => json!(data),
        [_, cols] => Value::Array(data.chunks(*cols).map(|row| json!(row)).collect()),
        _ => unreachable!("tensors are 1-D or 2-D"),
    }
}

pub fn write_weights<W: Write>(weights: &ControllerWeights, mut w: W) -> Result<()> {
    let mut shapes = Map::new();
    let mut tensors = Map::new();
    for (i, t) in TENSORS.iter().enumerate() {
        shapes.insert(t.name.into(), json!(t.shape));
        tensors.insert(t.name.into(), tensor_value(&weights.params()[range(i)], t.shape));
    }
    let doc = json!({
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "seed": weights.seed,
        "delta_max": weights.delta_max,
        "hidden_size": HIDDEN,
        "parameter_count": PARAMETER_COUNT,
        "shapes": shapes,
        "tensors": tensors,
    });
    serde_json::to_writer(&mut w, &doc)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn save_weights(weights: &ControllerWeights, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    write_weights(weights, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ControllerWeights> {
    let file = std::fs::File::open(path)?;
    read_weights(std::io::BufReader::new(file))
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::WeightFormat(msg.into())
}

/// Shape of a nested numeric array, plus its values in row-major order.
fn flatten(name: &str, v: &Value) -> Result<(Vec<usize>, Vec<f64>)> {
    let number = |x: &Value| -> Result<f64> {
        let f = x
            .as_f64()
            .ok_or_else(|| format_err(format!("tensor `{name}` contains a non-numeric entry")))?;
        if !f.is_finite() {
            return Err(format_err(format!("tensor `{name}` contains a non-finite value")));
        }
        Ok(f)
    };
    let outer = v
        .as_array()
        .ok_or_else(|| format_err(format!("tensor `{name}` is not an array")))?;
    if outer.first().is_some_and(Value::is_array) {
        let cols = outer[0].as_array().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(outer.len() * cols);
        for row in outer {
            let row = row
                .as_array()
                .ok_or_else(|| format_err(format!("tensor `{name}` mixes rows and scalars")))?;
            if row.len() != cols {
                return Err(Error::WeightShape {
                    tensor: name.into(),
                    expected: vec![outer.len(), cols],
                    found: vec![outer.len(), row.len()],
                });
            }
            for x in row {
                data.push(number(x)?);
            }
        }
        Ok((vec![outer.len(), cols], data))
    } else {
        let data = outer.iter().map(number).collect::<Result<Vec<_>>>()?;
        Ok((vec![data.len()], data))
    }
}

pub fn read_weights<R: Read>(r: R) -> Result<ControllerWeights> {
    let doc: Value = serde_json::from_reader(r)?;
    let obj = doc.as_object().ok_or_else(|| format_err("top level must be an object"))?;
    match obj.get("format").and_then(Value::as_str) {
        Some(FORMAT_NAME) => {}
        other => return Err(format_err(format!("expected format `{FORMAT_NAME}`, found {other:?}"))),
    }
    match obj.get("format_version").and_then(Value::as_u64) {
        Some(FORMAT_VERSION) => {}
        other => {
            return Err(format_err(format!(
                "unsupported format_version {other:?} (expected {FORMAT_VERSION})"
            )))
        }
    }
    let delta_max = obj
        .get("delta_max")
        .and_then(Value::as_f64)
        .filter(|d| d.is_finite() && *d > 0.0)
        .ok_or_else(|| format_err("`delta_max` must be a positive number"))?;
    let seed = obj.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let tensors = obj
        .get("tensors")
        .and_then(Value::as_object)
        .ok_or_else(|| format_err("missing `tensors` object"))?;
    if let Some(unknown) = tensors.keys().find(|k| !TENSORS.iter().any(|t| t.name == k.as_str())) {
        return Err(format_err(format!("unknown tensor `{unknown}`")));
    }
    let mut params = vec![0.0; PARAMETER_COUNT];
    for (i, t) in TENSORS.iter().enumerate() {
        let v = tensors
            .get(t.name)
            .ok_or_else(|| format_err(format!("missing tensor `{}`", t.name)))?;
        let (shape, data) = flatten(t.name, v)?;
        if shape != t.shape {
            return Err(Error::WeightShape {
                tensor: t.name.into(),
                expected: t.shape.to_vec(),
                found: shape,
            });
        }
        params[range(i)].copy_from_slice(&data);
    }
    Ok(ControllerWeights::from_parts(params, delta_max, seed))
}
