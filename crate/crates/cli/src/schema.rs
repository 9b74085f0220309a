//! Minimal structural validator for the published report schema. Supports
//! the subset of JSON Schema the asset uses: `type` (with union arrays),
//! `required`, `properties`, and `items`.

use serde_json::Value;

pub const EVAL_REPORT_SCHEMA: &str = include_str!("../assets/report.schema.json");

pub fn validate(schema: &Value, value: &Value, path: &str) -> Result<(), String> {
    if let Some(ty) = schema.get("type") {
        let allowed: Vec<&str> = match ty {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(|v| v.as_str()).collect(),
            _ => return Err(format!("{path}: malformed schema type")),
        };
        let actual = json_type(value);
        let ok = allowed.contains(&actual)
            || (actual == "integer" && allowed.contains(&"number"));
        if !ok {
            return Err(format!(
                "{path}: expected type {allowed:?}, found {actual}"
            ));
        }
    }
    if let Some(required) = schema.get("required").and_then(|r| r.as_array()) {
        if let Some(obj) = value.as_object() {
            for key in required.iter().filter_map(|k| k.as_str()) {
                if !obj.contains_key(key) {
                    return Err(format!("{path}: missing required field {key:?}"));
                }
            }
        }
    }
    if let (Some(props), Some(obj)) = (
        schema.get("properties").and_then(|p| p.as_object()),
        value.as_object(),
    ) {
        for (key, sub) in props {
            if let Some(v) = obj.get(key) {
                validate(sub, v, &format!("{path}.{key}"))?;
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), value.as_array()) {
        for (i, v) in arr.iter().enumerate() {
            validate(items, v, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}

fn json_type(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) => {
            if n.is_i64() || n.is_u64() {
                "integer"
            } else {
                "number"
            }
        }
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

pub fn validate_eval_report(report: &Value) -> Result<(), String> {
    let schema: Value =
        serde_json::from_str(EVAL_REPORT_SCHEMA).map_err(|e| format!("schema parse: {e}"))?;
    validate(&schema, report, "$")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn type_and_required_checks_fire() {
        let schema = json!({
            "type": "object",
            "required": ["a"],
            "properties": {"a": {"type": "integer"}}
        });
        assert!(validate(&schema, &json!({"a": 1}), "$").is_ok());
        assert!(validate(&schema, &json!({"a": "x"}), "$").is_err());
        assert!(validate(&schema, &json!({}), "$").is_err());
        assert!(validate(&schema, &json!(3), "$").is_err());
    }

    #[test]
    fn union_types_accept_null() {
        let schema = json!({"type": ["integer", "null"]});
        assert!(validate(&schema, &json!(null), "$").is_ok());
        assert!(validate(&schema, &json!(2), "$").is_ok());
        assert!(validate(&schema, &json!("x"), "$").is_err());
    }

    #[test]
    fn integers_satisfy_number_but_not_conversely() {
        let schema = json!({"type": "number"});
        assert!(validate(&schema, &json!(1.5), "$").is_ok());
        assert!(validate(&schema, &json!(2), "$").is_ok());
        let schema_int = json!({"type": "integer"});
        assert!(validate(&schema_int, &json!(2), "$").is_ok());
        assert!(validate(&schema_int, &json!(2.5), "$").is_err());
    }
}
