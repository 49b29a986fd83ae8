use mpan_core::harness::TrainConfig;
use serde_json::Value;

fn schema() -> Value {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config.schema.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Walks a config value and its schema in step, checking that every key is
/// declared, every required key is present, and enum strings are listed.
fn conforms(value: &Value, schema: &Value, path: &str, errors: &mut Vec<String>) {
    if let Some(options) = schema.get("oneOf").and_then(Value::as_array) {
        let matching = options
            .iter()
            .filter(|s| {
                let mut e = Vec::new();
                conforms(value, s, path, &mut e);
                e.is_empty()
            })
            .count();
        if matching != 1 {
            errors.push(format!("{path}: {matching} alternatives match"));
        }
        return;
    }
    if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
        if !allowed.contains(value) {
            errors.push(format!("{path}: {value} not in enum"));
        }
        return;
    }
    if let (Some(props), Some(obj)) = (schema.get("properties").and_then(Value::as_object), value.as_object()) {
        for (k, v) in obj {
            match props.get(k) {
                Some(s) => conforms(v, s, &format!("{path}.{k}"), errors),
                None => errors.push(format!("{path}.{k}: not declared")),
            }
        }
        for r in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !obj.contains_key(r.as_str().unwrap()) {
                errors.push(format!("{path}.{r}: missing"));
            }
        }
        for k in props.keys() {
            if !obj.contains_key(k) {
                errors.push(format!("{path}.{k}: declared but never serialized"));
            }
        }
    } else if schema.get("properties").is_some() {
        errors.push(format!("{path}: expected an object"));
    }
}

#[test]
fn schema_covers_the_default_and_smoke_configs() {
    let schema = schema();
    for (name, cfg) in [("default", TrainConfig::default()), ("smoke", TrainConfig::smoke())] {
        let mut errors = Vec::new();
        conforms(&serde_json::to_value(&cfg).unwrap(), &schema, name, &mut errors);
        assert!(errors.is_empty(), "{errors:?}");
    }
}

#[test]
fn schema_alternatives_parse_as_configs() {
    let mut v = serde_json::to_value(TrainConfig::default()).unwrap();
    v["data"]["source"] = serde_json::json!({ "directory": "/tmp/ds" });
    v["attention"] = serde_json::json!({ "manual": [1.0, 1.5, 1.5, 2.0] });
    v["gc"]["propagation"] = serde_json::json!("mean");
    let cfg: TrainConfig = serde_json::from_value(v.clone()).unwrap();
    let mut errors = Vec::new();
    conforms(&serde_json::to_value(&cfg).unwrap(), &schema(), "alt", &mut errors);
    assert!(errors.is_empty(), "{errors:?}");
}
