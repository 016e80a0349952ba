//! Test double for the tool boundary shim.
//!
//! Usage: `toolforge-fixture-shim <manifest-path>` with a wire input document
//! on stdin. Fixture callables are implemented natively here, so engine tests
//! can launch real tool processes without any tool runtime installed.
//! Callables prefixed `unchecked_` skip input validation, standing in for
//! tools that bypass the contract.

use std::io::Read;
use std::process::ExitCode;
use std::time::Duration;

use serde_json::{json, Map, Value};
use toolforge_core::registry::invoke::{WireInput, WireOutput};
use toolforge_core::registry::schema::check_record;
use toolforge_core::registry::{SemanticType, ToolManifest};

struct Raised {
    error_type: &'static str,
    message: String,
}

fn raise(error_type: &'static str, message: impl Into<String>) -> Raised {
    Raised {
        error_type,
        message: message.into(),
    }
}

fn num(inputs: &Map<String, Value>, key: &str) -> Result<f64, Raised> {
    inputs
        .get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| raise("TypeError", format!("`{key}` must be a number")))
}

fn placeholder(t: &SemanticType) -> Value {
    match t {
        SemanticType::Integer => json!(0),
        SemanticType::Number => json!(0.0),
        SemanticType::Boolean => json!(false),
        SemanticType::Enum { values } => json!(values.first().cloned().unwrap_or_default()),
        SemanticType::List { .. } => json!([]),
        SemanticType::Record { fields } => Value::Object(
            fields
                .iter()
                .map(|f| (f.name.clone(), placeholder(&f.semantic_type)))
                .collect(),
        ),
        SemanticType::String | SemanticType::FilePath => json!(""),
    }
}

fn call(manifest: &ToolManifest, inputs: &Map<String, Value>) -> Result<Option<Value>, Raised> {
    let out = match manifest.entrypoint.callable.as_str() {
        "add" => {
            let a = inputs["a"].as_i64().unwrap_or_default();
            let b = inputs["b"].as_i64().unwrap_or_default();
            json!({ "sum": a + b })
        }
        "stats" => {
            let xs: Vec<f64> = inputs["values"]
                .as_array()
                .map(|a| a.iter().filter_map(Value::as_f64).collect())
                .unwrap_or_default();
            if xs.len() < 2 {
                return Err(raise("ValueError", "need at least two values"));
            }
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            json!({ "mean": mean, "std": var.sqrt() })
        }
        "divide" => {
            let (a, b) = (num(inputs, "a")?, num(inputs, "b")?);
            if b == 0.0 {
                return Err(raise("ZeroDivisionError", "division by zero"));
            }
            json!({ "quotient": a / b })
        }
        "slow" => {
            std::thread::sleep(Duration::from_secs_f64(num(inputs, "seconds")?));
            json!({})
        }
        "noop" => json!({}),
        "noop_record" => Value::Object(
            manifest
                .outputs
                .iter()
                .map(|p| (p.name.clone(), placeholder(&p.semantic_type)))
                .collect(),
        ),
        "fail_always" => return Err(raise("RuntimeError", "this tool always fails")),
        "bad_output" => json!({ "unexpected": 1 }),
        "unchecked_silent_fallback" => match inputs.get("x").and_then(Value::as_f64) {
            Some(x) => json!({ "result": x * 2.0 }),
            None => json!({ "result": 0 }),
        },
        "unchecked_empty_exit" => match inputs.get("x").and_then(Value::as_f64) {
            Some(x) => json!({ "result": x }),
            None => return Ok(None),
        },
        other => return Err(raise("AttributeError", format!("no callable `{other}`"))),
    };
    Ok(Some(out))
}

fn fail(error_type: &str, message: impl Into<String>) -> WireOutput {
    WireOutput::Failure {
        error_type: error_type.into(),
        message: message.into(),
        detail: None,
    }
}

fn run() -> Option<WireOutput> {
    let Some(manifest_path) = std::env::args().nth(1) else {
        return Some(fail("UsageError", "usage: toolforge-fixture-shim <manifest-path>"));
    };
    let manifest = match std::fs::read(&manifest_path)
        .map_err(|e| e.to_string())
        .and_then(|b| ToolManifest::from_json(&b).map_err(|e| e.to_string()))
    {
        Ok(m) => m,
        Err(e) => return Some(fail("ManifestError", e)),
    };
    let mut raw = Vec::new();
    if let Err(e) = std::io::stdin().read_to_end(&mut raw) {
        return Some(fail("WireParseError", e.to_string()));
    }
    let wire: WireInput = match serde_json::from_slice(&raw) {
        Ok(w) => w,
        Err(e) => return Some(fail("WireParseError", e.to_string())),
    };
    let checked = !manifest.entrypoint.callable.starts_with("unchecked_");
    if checked {
        let violations = check_record(&manifest.inputs, &wire.inputs, "inputs");
        if !violations.is_empty() {
            return Some(fail("InputValidationError", violations.join("; ")));
        }
    }
    let empty = Map::new();
    let inputs = wire.inputs.as_object().unwrap_or(&empty);
    match call(&manifest, inputs) {
        Err(r) => Some(fail(r.error_type, r.message)),
        Ok(None) => None,
        Ok(Some(outputs)) => {
            if checked {
                let violations = check_record(&manifest.outputs, &outputs, "outputs");
                if !violations.is_empty() {
                    return Some(fail("OutputValidationError", violations.join("; ")));
                }
            }
            Some(WireOutput::Success {
                outputs: outputs.as_object().cloned().unwrap_or_default(),
            })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        None => ExitCode::SUCCESS,
        Some(doc) => {
            println!("{}", doc.to_json());
            if doc.is_success() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
