//! Calling registered tools through the boundary shim.
//!
//! The engine never runs a tool source directly. It launches
//! `<shim…> <manifest-path>` through a [`JobExecutor`], writes one
//! [`WireInput`] document to stdin and reads exactly one [`WireOutput`]
//! document from stdout. Success is exit 0 with `ok: true`; any failure is a
//! nonzero exit with `ok: false` and the error's type name and message.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::schema::check_record;
use super::{Registry, RegistryError, ToolEntry};
use crate::executor::{ExecError, JobExecutor, JobRequest, JobResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireInput {
    pub tool: String,
    pub inputs: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireOutput {
    Success {
        outputs: Map<String, Value>,
    },
    Failure {
        error_type: String,
        message: String,
        detail: Option<String>,
    },
}

impl WireOutput {
    pub fn to_json(&self) -> Value {
        match self {
            Self::Success { outputs } => serde_json::json!({"ok": true, "outputs": outputs}),
            Self::Failure {
                error_type,
                message,
                detail,
            } => {
                let mut v = serde_json::json!({
                    "ok": false,
                    "error_type": error_type,
                    "message": message,
                });
                if let Some(d) = detail {
                    v["detail"] = Value::from(d.clone());
                }
                v
            }
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, Self::Success { .. })
    }
}

/// Strictly parses one wire document.
pub fn parse_wire_output(bytes: &[u8]) -> Result<WireOutput, String> {
    let text = std::str::from_utf8(bytes).map_err(|_| "output is not UTF-8".to_string())?;
    if text.trim().is_empty() {
        return Err("no output document".into());
    }
    let mut stream = serde_json::Deserializer::from_str(text).into_iter::<Value>();
    let doc = match stream.next() {
        Some(Ok(v)) => v,
        Some(Err(e)) => return Err(format!("unparseable output: {e}")),
        None => return Err("no output document".into()),
    };
    if stream.next().is_some() {
        return Err("more than one output document".into());
    }
    let obj = doc.as_object().ok_or("output document is not an object")?;
    match obj.get("ok") {
        Some(Value::Bool(true)) => {
            if obj.contains_key("error_type") {
                return Err("success document carries error_type".into());
            }
            let outputs = obj
                .get("outputs")
                .and_then(Value::as_object)
                .ok_or("success document without an outputs record")?;
            Ok(WireOutput::Success {
                outputs: outputs.clone(),
            })
        }
        Some(Value::Bool(false)) => {
            if obj.contains_key("outputs") {
                return Err("failure document carries outputs".into());
            }
            let field = |k: &str| obj.get(k).and_then(Value::as_str).map(String::from);
            Ok(WireOutput::Failure {
                error_type: field("error_type").ok_or("failure document without error_type")?,
                message: field("message").ok_or("failure document without message")?,
                detail: field("detail"),
            })
        }
        _ => Err("`ok` flag missing or not boolean".into()),
    }
}

#[derive(Debug, Error)]
pub enum InvokeError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("input violates the tool schema: {}", .0.join("; "))]
    InputSchemaViolation(Vec<String>),
    #[error("{error_type}: {message}")]
    ToolError {
        error_type: String,
        message: String,
        detail: Option<String>,
    },
    #[error("output violates the tool schema: {}", .0.join("; "))]
    OutputSchemaViolation(Vec<String>),
    #[error("tool broke the wire contract (exit {exit_code}): {detail}")]
    MalformedOutput { exit_code: i32, detail: String },
    #[error("tool timed out")]
    TimedOut,
    #[error("executor failure: {0}")]
    Executor(#[from] ExecError),
}

/// What came back from one shim launch, before any interpretation.
#[derive(Debug, Clone)]
pub struct Dispatch {
    pub job: JobResult,
    pub output: Result<WireOutput, String>,
}

/// Launches tools through the shim on a job executor.
#[derive(Clone)]
pub struct ToolRunner {
    executor: Arc<dyn JobExecutor>,
    shim: Vec<String>,
    logs_dir: PathBuf,
    timeout: Duration,
}

impl ToolRunner {
    pub fn new(executor: Arc<dyn JobExecutor>, shim: Vec<String>, logs_dir: impl Into<PathBuf>) -> Self {
        Self {
            executor,
            shim,
            logs_dir: logs_dir.into(),
            timeout: Duration::from_secs(600),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_logs_dir(&self, logs_dir: impl Into<PathBuf>) -> Self {
        Self {
            logs_dir: logs_dir.into(),
            ..self.clone()
        }
    }

    pub fn shim(&self) -> &[String] {
        &self.shim
    }

    /// Sends `inputs` to the tool without any engine-side checking.
    pub fn dispatch(&self, entry: &ToolEntry, inputs: &Value) -> Result<Dispatch, ExecError> {
        if self.shim.is_empty() {
            return Err(ExecError::InvalidRequest("no tool shim configured".into()));
        }
        let mut command = self.shim.clone();
        command.push(entry.manifest_path.to_string_lossy().into_owned());
        let wire = WireInput {
            tool: entry.manifest.name.clone(),
            inputs: inputs.clone(),
        };
        let workdir = entry
            .manifest_path
            .parent()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."));
        let job = JobRequest::new(command, workdir, format!("tool_{}", entry.manifest.name))
            .with_timeout(self.timeout)
            .with_stdin(serde_json::to_vec(&wire).expect("wire input serializes"));
        let result = self.executor.submit(&job, &self.logs_dir)?;
        let output = result
            .read_stdout()
            .map_err(|e| format!("cannot read stdout log: {e}"))
            .and_then(|b| parse_wire_output(&b));
        Ok(Dispatch { job: result, output })
    }
}

/// Calls tool `name` with `input`, checking both sides of the boundary.
///
/// Tool-raised errors come back verbatim as [`InvokeError::ToolError`].
pub fn invoke_tool(
    registry: &Registry,
    name: &str,
    input: &Value,
    runner: &ToolRunner,
) -> Result<Value, InvokeError> {
    let entry = registry.resolve(name)?;
    let violations = check_record(&entry.manifest.inputs, input, "inputs");
    if !violations.is_empty() {
        return Err(InvokeError::InputSchemaViolation(violations));
    }
    let dispatch = runner.dispatch(&entry, input)?;
    if dispatch.job.timed_out {
        return Err(InvokeError::TimedOut);
    }
    let exit_code = dispatch.job.exit_code;
    match dispatch.output {
        Ok(WireOutput::Success { outputs }) if exit_code == 0 => {
            let outputs = Value::Object(outputs);
            let violations = check_record(&entry.manifest.outputs, &outputs, "outputs");
            if violations.is_empty() {
                Ok(outputs)
            } else {
                Err(InvokeError::OutputSchemaViolation(violations))
            }
        }
        Ok(WireOutput::Failure {
            error_type,
            message,
            detail,
        }) if exit_code != 0 => Err(InvokeError::ToolError {
            error_type,
            message,
            detail,
        }),
        Ok(_) => Err(InvokeError::MalformedOutput {
            exit_code,
            detail: "exit code disagrees with the ok flag".into(),
        }),
        Err(detail) => Err(InvokeError::MalformedOutput { exit_code, detail }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_success_and_failure() {
        let ok = parse_wire_output(br#"{"ok":true,"outputs":{"sum":5}}"#).unwrap();
        assert!(ok.is_success());
        let err = parse_wire_output(br#"{"ok":false,"error_type":"ZeroDivisionError","message":"division by zero"}"#)
            .unwrap();
        assert_eq!(
            err,
            WireOutput::Failure {
                error_type: "ZeroDivisionError".into(),
                message: "division by zero".into(),
                detail: None
            }
        );
    }

    #[test]
    fn rejects_contract_breaches() {
        for bad in [
            &b""[..],
            b"{}",
            b"[1]",
            br#"{"ok":"yes"}"#,
            br#"{"ok":true}"#,
            br#"{"ok":false,"message":"m"}"#,
            br#"{"ok":false,"error_type":"E","message":"m","outputs":{}}"#,
            br#"{"ok":true,"outputs":{}} {"ok":true,"outputs":{}}"#,
        ] {
            assert!(parse_wire_output(bad).is_err(), "{}", String::from_utf8_lossy(bad));
        }
    }

    proptest! {
        #[test]
        fn wire_output_round_trips(ok in any::<bool>(), msg in ".*", n in any::<i64>()) {
            let doc = if ok {
                let mut m = Map::new();
                m.insert("n".into(), Value::from(n));
                WireOutput::Success { outputs: m }
            } else {
                WireOutput::Failure { error_type: "E".into(), message: msg, detail: None }
            };
            let bytes = serde_json::to_vec(&doc.to_json()).unwrap();
            prop_assert_eq!(parse_wire_output(&bytes).unwrap(), doc);
        }
    }
}
