//! Task instances as JSON lines.

use std::path::Path;

use serde_json::Value;

use crate::codec::{Codec, TaskInstance};
use crate::error::{Error, Result};

const FIELDS: [&str; 6] = ["id", "task", "source", "gold", "input_text", "target_text"];

pub fn instances_to_jsonl(instances: &[TaskInstance]) -> Result<String> {
    let mut out = String::new();
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(|e| Error::contract(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Parses and validates every non-blank line; errors carry 1-based line numbers.
pub fn instances_from_jsonl(text: &str, codec: &Codec) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let Value::Object(map) = &value else {
            return Err(Error::Parse {
                line,
                msg: "expected a JSON object".into(),
            });
        };
        if let Some(field) = FIELDS.iter().find(|f| !map.contains_key(**f)) {
            return Err(Error::MissingField {
                line,
                field: field.to_string(),
            });
        }
        let inst: TaskInstance = serde_json::from_value(value).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        inst.validate(codec).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn read_instances(path: &Path, codec: &Codec) -> Result<Vec<TaskInstance>> {
    instances_from_jsonl(&std::fs::read_to_string(path)?, codec)
}

pub fn write_instances(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    std::fs::write(path, instances_to_jsonl(instances)?)?;
    Ok(())
}
