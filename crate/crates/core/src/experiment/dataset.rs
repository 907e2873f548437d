//! Line-oriented dataset files.
//!
//! ```text
//! {"k":64,"sigma":0.3,"seed":1,"count":128000}
//! {"task":0,"y":1,"x":[...9 reals...]}
//! ```
//!
//! Records appear in spout order, so replaying a file with the same seed
//! reproduces a generated run exactly.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::math::{CompoundInstance, Label};

use super::ExperimentError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub k: usize,
    pub sigma: f64,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task: usize,
    y: Label,
    x: Vec<f64>,
}

pub fn write_dataset<W: Write>(
    mut out: W,
    header: &DatasetHeader,
    instances: &[CompoundInstance],
) -> Result<(), ExperimentError> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for inst in instances {
        let r = Record {
            task: inst.task,
            y: inst.label,
            x: inst.features.clone(),
        };
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<(DatasetHeader, Vec<CompoundInstance>), ExperimentError> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| ExperimentError::Dataset("empty file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first)
        .map_err(|e| ExperimentError::Dataset(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)
            .map_err(|e| ExperimentError::Dataset(format!("record {}: {e}", i + 1)))?;
        if r.task >= header.k {
            return Err(ExperimentError::Dataset(format!(
                "record {}: task {} out of range for k = {}",
                i + 1,
                r.task,
                header.k
            )));
        }
        out.push(CompoundInstance::new(r.task, r.x, r.y));
    }
    if out.len() != header.count {
        return Err(ExperimentError::Dataset(format!(
            "header announces {} records, found {}",
            header.count,
            out.len()
        )));
    }
    Ok((header, out))
}
