//! Typed parameter declarations and the checks run against them at the tool
//! boundary.

use std::collections::BTreeSet;
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub semantic_type: SemanticType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
    #[serde(default = "default_required")]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<Constraint>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

fn default_required() -> bool {
    true
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, semantic_type: SemanticType) -> Self {
        Self {
            name: name.into(),
            semantic_type,
            units: None,
            required: true,
            constraints: None,
            description: String::new(),
        }
    }

    pub fn optional(mut self) -> Self {
        self.required = false;
        self
    }

    pub fn with_constraint(mut self, c: Constraint) -> Self {
        self.constraints = Some(c);
        self
    }

    pub fn with_units(mut self, units: impl Into<String>) -> Self {
        self.units = Some(units.into());
        self
    }

    pub fn with_description(mut self, d: impl Into<String>) -> Self {
        self.description = d.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SemanticType {
    Integer,
    Number,
    String,
    Boolean,
    Enum { values: Vec<String> },
    List { item: Box<ParamSpec> },
    Record { fields: Vec<ParamSpec> },
    FilePath,
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Integer => f.write_str("integer"),
            Self::Number => f.write_str("number"),
            Self::String => f.write_str("string"),
            Self::Boolean => f.write_str("boolean"),
            Self::FilePath => f.write_str("file-path"),
            Self::Enum { values } => write!(f, "enum({})", values.join("|")),
            Self::List { item } => write!(f, "list({})", item.semantic_type),
            Self::Record { fields } => {
                f.write_str("record{")?;
                for (i, p) in fields.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{}: {}", p.name, p.semantic_type)?;
                }
                f.write_str("}")
            }
        }
    }
}

/// Machine-checkable constraint. `Note` carries a description only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Constraint {
    Range {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
    },
    Pattern { regex: String },
    OneOf { values: Vec<Value> },
    Note { text: String },
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Structural problems with a parameter declaration.
pub fn spec_violations(spec: &ParamSpec, path: &str) -> Vec<String> {
    let mut out = Vec::new();
    if spec.name.is_empty() {
        out.push(format!("{path}.name: empty"));
    } else if !is_identifier(&spec.name) {
        out.push(format!("{path}.name: `{}` is not an identifier", spec.name));
    }
    match &spec.semantic_type {
        SemanticType::Enum { values } => {
            if values.is_empty() {
                out.push(format!("{path}.type: enum has no values"));
            }
            let unique: BTreeSet<_> = values.iter().collect();
            if unique.len() != values.len() {
                out.push(format!("{path}.type: enum values are not unique"));
            }
        }
        SemanticType::List { item } => out.extend(spec_violations(item, &format!("{path}.item"))),
        SemanticType::Record { fields } => out.extend(list_violations(fields, path)),
        _ => {}
    }
    if let Some(c) = &spec.constraints {
        let numeric = matches!(spec.semantic_type, SemanticType::Integer | SemanticType::Number);
        let textual = matches!(spec.semantic_type, SemanticType::String | SemanticType::FilePath);
        match c {
            Constraint::Range { min, max } => {
                if !numeric {
                    out.push(format!("{path}.constraints: range on non-numeric type"));
                }
                if let (Some(lo), Some(hi)) = (min, max) {
                    if lo > hi {
                        out.push(format!("{path}.constraints: range min > max"));
                    }
                }
            }
            Constraint::Pattern { regex } => {
                if !textual {
                    out.push(format!("{path}.constraints: pattern on non-string type"));
                }
                if let Err(e) = Regex::new(regex) {
                    out.push(format!("{path}.constraints: bad regex: {e}"));
                }
            }
            Constraint::OneOf { values } if values.is_empty() => {
                out.push(format!("{path}.constraints: one-of has no values"));
            }
            _ => {}
        }
    }
    out
}

/// Checks a list of parameters, including name uniqueness.
pub fn list_violations(params: &[ParamSpec], path: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for p in params {
        let p_path = if p.name.is_empty() {
            format!("{path}[?]")
        } else {
            format!("{path}.{}", p.name)
        };
        out.extend(spec_violations(p, &p_path));
        if !p.name.is_empty() && !seen.insert(p.name.as_str()) {
            out.push(format!("{path}: duplicate parameter `{}`", p.name));
        }
    }
    out
}

/// Checks a record value (tool inputs or outputs) against its declaration.
/// Unknown keys are rejected; `null` counts as absent.
pub fn check_record(params: &[ParamSpec], value: &Value, path: &str) -> Vec<String> {
    let Some(obj) = value.as_object() else {
        return vec![format!("{path}: expected record, got {}", kind_of(value))];
    };
    let mut out = Vec::new();
    for p in params {
        match obj.get(&p.name) {
            None | Some(Value::Null) => {
                if p.required {
                    out.push(format!("{path}.{}: required value missing", p.name));
                }
            }
            Some(v) => out.extend(check_value(p, v, &format!("{path}.{}", p.name))),
        }
    }
    for key in obj.keys() {
        if !params.iter().any(|p| &p.name == key) {
            out.push(format!("{path}.{key}: unexpected field"));
        }
    }
    out
}

pub fn check_value(spec: &ParamSpec, value: &Value, path: &str) -> Vec<String> {
    let mismatch = || vec![format!("{path}: expected {}, got {}", spec.semantic_type, kind_of(value))];
    let mut out = match &spec.semantic_type {
        SemanticType::Integer if value.is_i64() || value.is_u64() => vec![],
        SemanticType::Number if value.is_number() => vec![],
        SemanticType::String | SemanticType::FilePath if value.is_string() => vec![],
        SemanticType::Boolean if value.is_boolean() => vec![],
        SemanticType::Enum { values } => match value.as_str() {
            Some(s) if values.iter().any(|v| v == s) => vec![],
            Some(s) => vec![format!("{path}: `{s}` is not one of {}", values.join("|"))],
            None => mismatch(),
        },
        SemanticType::List { item } => match value.as_array() {
            Some(items) => items
                .iter()
                .enumerate()
                .flat_map(|(i, v)| check_value(item, v, &format!("{path}[{i}]")))
                .collect(),
            None => mismatch(),
        },
        SemanticType::Record { fields } => check_record(fields, value, path),
        _ => mismatch(),
    };
    if out.is_empty() {
        if let Some(c) = &spec.constraints {
            out.extend(check_constraint(c, value, path));
        }
    }
    out
}

fn check_constraint(c: &Constraint, value: &Value, path: &str) -> Vec<String> {
    match c {
        Constraint::Range { min, max } => {
            let Some(x) = value.as_f64() else { return vec![] };
            let mut out = vec![];
            if min.is_some_and(|lo| x < lo) {
                out.push(format!("{path}: {x} below minimum {}", min.unwrap()));
            }
            if max.is_some_and(|hi| x > hi) {
                out.push(format!("{path}: {x} above maximum {}", max.unwrap()));
            }
            out
        }
        Constraint::Pattern { regex } => match (value.as_str(), Regex::new(regex)) {
            (Some(s), Ok(re)) if !re.is_match(s) => {
                vec![format!("{path}: `{s}` does not match /{regex}/")]
            }
            _ => vec![],
        },
        Constraint::OneOf { values } if !values.contains(value) => {
            vec![format!("{path}: value not in allowed set")]
        }
        _ => vec![],
    }
}

pub(crate) fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_f64() => "number",
        Value::Number(_) => "integer",
        Value::String(_) => "string",
        Value::Array(_) => "list",
        Value::Object(_) => "record",
    }
}

/// A value of the wrong type for `spec`, used to probe tools for silent
/// fallbacks.
pub fn wrong_type_value(spec: &ParamSpec) -> Value {
    match spec.semantic_type {
        SemanticType::String | SemanticType::FilePath | SemanticType::Enum { .. } => {
            Value::from(12345)
        }
        SemanticType::Record { .. } | SemanticType::List { .. } => Value::from("not-a-collection"),
        _ => Value::from("not-a-number"),
    }
}
