use posebench::patch_pnp::{LossMode, RotMode};
use posebench_cli::config::RunConfig;
use serde_json::Value;

fn schema() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn schema_lists_exactly_the_config_keys_with_their_defaults() {
    let s = schema();
    assert_eq!(s["additionalProperties"], Value::Bool(false));
    let props = s["properties"].as_object().unwrap();
    let mut documented: Vec<&String> = props.keys().collect();
    let mut keys = RunConfig::keys();
    documented.sort();
    keys.sort();
    assert_eq!(documented, keys.iter().collect::<Vec<_>>());

    let defaults: serde_json::Map<String, Value> =
        props.iter().map(|(k, p)| (k.clone(), p["default"].clone())).collect();
    let cfg: RunConfig = serde_json::from_value(Value::Object(defaults)).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn schema_enums_match_the_modes() {
    let s = schema();
    let names = |k: &str| -> Vec<String> {
        s["properties"][k]["enum"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect()
    };
    assert_eq!(names("rot_mode"), RotMode::ALL.iter().map(|m| m.name().to_string()).collect::<Vec<_>>());
    assert_eq!(names("loss_mode"), LossMode::ALL.iter().map(|m| m.name().to_string()).collect::<Vec<_>>());
}
