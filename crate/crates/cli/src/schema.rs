//! Versioned record schema. Every record the runner emits is validated
//! against `schemas/records-v1.json` before it is written, and each record
//! carries a `schema` tag naming its kind and version.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;
use serde_json::Value;

use crate::CliError;

pub const SCHEMA_TEXT: &str = include_str!("../schemas/records-v1.json");

#[derive(Debug, Deserialize)]
struct SchemaDoc {
    version: u32,
    records: BTreeMap<String, BTreeMap<String, String>>,
}

fn schema() -> &'static SchemaDoc {
    static DOC: OnceLock<SchemaDoc> = OnceLock::new();
    DOC.get_or_init(|| serde_json::from_str(SCHEMA_TEXT).expect("schema file is valid JSON"))
}

pub fn schema_tag(kind: &str) -> String {
    format!("{kind}/v{}", schema().version)
}

fn type_matches(expected: &str, value: &Value) -> bool {
    match expected {
        "integer" => value.is_i64() || value.is_u64(),
        "number" => value.is_number(),
        "string" => value.is_string(),
        "boolean" => value.is_boolean(),
        "array" => value.is_array(),
        "object" => value.is_object(),
        "nullable-object" => value.is_object() || value.is_null(),
        _ => false,
    }
}

/// Checks that `value` is an object carrying every field the schema
/// requires for `kind`, with the right JSON type.
pub fn validate(kind: &str, value: &Value) -> Result<(), CliError> {
    let doc = schema();
    let fields = doc
        .records
        .get(kind)
        .ok_or_else(|| CliError::Runtime(format!("unknown record kind {kind:?}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CliError::Runtime(format!("{kind} record is not an object")))?;
    for (field, expected) in fields {
        let got = obj
            .get(field)
            .ok_or_else(|| CliError::Runtime(format!("{kind} record missing field {field:?}")))?;
        if !type_matches(expected, got) {
            return Err(CliError::Runtime(format!(
                "{kind} record field {field:?} is not a {expected}"
            )));
        }
    }
    Ok(())
}

/// Tags a record with its schema id and validates it.
pub fn tagged(kind: &str, record: Value) -> Result<Value, CliError> {
    validate(kind, &record)?;
    let mut obj = record
        .as_object()
        .cloned()
        .ok_or_else(|| CliError::Runtime(format!("{kind} record is not an object")))?;
    obj.insert("schema".into(), Value::String(schema_tag(kind)));
    Ok(Value::Object(obj))
}
