use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;
use serde_json::{json, Value};
use toolforge_core::executor::LocalExecutor;
use toolforge_core::fixtures;
use toolforge_core::forge::{contract_check, ContractVerdict};
use toolforge_core::registry::invoke::{invoke_tool, parse_wire_output, InvokeError, ToolRunner, WireOutput};
use toolforge_core::registry::Registry;

const SHIM: &str = env!("CARGO_BIN_EXE_toolforge-fixture-shim");

fn corpus(dir: &Path) -> Registry {
    let reg = Registry::create(dir.join("tools")).unwrap();
    fixtures::install(&reg, &fixtures::core_corpus()).unwrap();
    reg
}

fn runner(dir: &Path) -> ToolRunner {
    ToolRunner::new(Arc::new(LocalExecutor::new()), vec![SHIM.into()], dir.join("logs"))
}

/// Runs the shim directly and returns (stdout, exit code).
fn shim_raw(manifest: &Path, stdin: &[u8]) -> (Vec<u8>, i32) {
    let mut child = Command::new(SHIM)
        .arg(manifest)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin).unwrap();
    let out = child.wait_with_output().unwrap();
    (out.stdout, out.status.code().unwrap())
}

#[test]
fn add_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let reg = corpus(dir.path());
    let out = invoke_tool(&reg, "add", &json!({"a": 2, "b": 3}), &runner(dir.path())).unwrap();
    assert_eq!(out, json!({"sum": 5}));
}

#[test]
fn invalid_input_is_a_structured_failure() {
    let dir = tempfile::tempdir().unwrap();
    let reg = corpus(dir.path());
    let entry = reg.resolve("add").unwrap();
    let (stdout, code) = shim_raw(&entry.manifest_path, br#"{"tool":"add","inputs":{"a":"x"}}"#);
    assert_eq!(code, 1);
    match parse_wire_output(&stdout).unwrap() {
        WireOutput::Failure { error_type, .. } => assert_eq!(error_type, "InputValidationError"),
        other => panic!("{other:?}"),
    }
    // the engine refuses the same input before launching anything
    let err = invoke_tool(&reg, "add", &json!({"a": "x"}), &runner(dir.path())).unwrap_err();
    assert!(matches!(err, InvokeError::InputSchemaViolation(_)));
}

#[test]
fn raised_errors_carry_the_exception_name() {
    let dir = tempfile::tempdir().unwrap();
    let reg = corpus(dir.path());
    let err = invoke_tool(&reg, "divide", &json!({"a": 1.0, "b": 0.0}), &runner(dir.path())).unwrap_err();
    match err {
        InvokeError::ToolError { error_type, message, .. } => {
            assert_eq!(error_type, "ZeroDivisionError");
            assert!(message.contains("division by zero"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn slow_tool_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let reg = corpus(dir.path());
    let r = runner(dir.path()).with_timeout(Duration::from_millis(300));
    let err = invoke_tool(&reg, "slow", &json!({"seconds": 5.0}), &r).unwrap_err();
    assert!(matches!(err, InvokeError::TimedOut), "{err:?}");
}

#[test]
fn contract_check_catches_contract_breakers() {
    let dir = tempfile::tempdir().unwrap();
    let reg = corpus(dir.path());
    let r = runner(dir.path());
    assert_eq!(contract_check("add", &reg, &r).unwrap(), ContractVerdict::Pass);
    assert_eq!(contract_check("stats", &reg, &r).unwrap(), ContractVerdict::Pass);
    match contract_check("silent_scale", &reg, &r).unwrap() {
        ContractVerdict::Fail(reasons) => assert!(reasons[0].contains("silent fallback"), "{reasons:?}"),
        ContractVerdict::Pass => panic!("silent fallback passed"),
    }
    match contract_check("quiet_echo", &reg, &r).unwrap() {
        ContractVerdict::Fail(reasons) => assert!(reasons[0].contains("no structured error"), "{reasons:?}"),
        ContractVerdict::Pass => panic!("empty exit passed"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_stdin_yields_one_document(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::create(dir.path().join("tools")).unwrap();
        fixtures::install(&reg, &[fixtures::add_manifest()]).unwrap();
        let entry = reg.resolve("add").unwrap();
        let (stdout, code) = shim_raw(&entry.manifest_path, &bytes);
        let text = String::from_utf8(stdout).unwrap();
        prop_assert_eq!(text.lines().count(), 1);
        let doc: Value = serde_json::from_str(&text).unwrap();
        let ok = doc["ok"].as_bool().unwrap();
        prop_assert_eq!(ok, code == 0);
        if !ok {
            prop_assert!(doc.get("outputs").is_none());
            if serde_json::from_slice::<Value>(&bytes).is_err() {
                prop_assert_eq!(doc["error_type"].as_str(), Some("WireParseError"));
            }
        }
    }
}
