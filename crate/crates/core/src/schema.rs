//! Extraction schemas: loading, prompt rendering and response validation.
//!
//! A schema file is a YAML or JSON document:
//!
//! ```yaml
//! name: commodity_prices
//! container: list-of-records        # or single-record (default)
//! system_prompt: You extract structured data.
//! prompt_template: |
//!   Extract the following fields:
//!   {field_docs}
//!   ---
//!   {chunk_text}
//! fields:
//!   - name: good
//!     kind: string                  # boolean | integer | number | string | enum | list<KIND>
//!     description: Commodity named in the text
//!     required: true                # default true
//!   - name: unit
//!     kind: enum
//!     values: [barrel, tonne]
//!     required: false
//! ```
//!
//! Unknown keys are rejected. `list<...>` may nest at most twice and
//! `enum` kinds (including `list<enum>`) take their allowed values from
//! `values`.

use crate::canonical::{canonical_json, sha256_hex};
use crate::ingest::Chunk;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::OnceLock;
use thiserror::Error;

pub const CHUNK_TEXT: &str = "chunk_text";
pub const FIELD_DOCS: &str = "field_docs";

const MAX_LIST_DEPTH: usize = 2;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema parse error: {0}")]
    Parse(String),
    #[error("schema has no fields")]
    NoFields,
    #[error("duplicate field `{0}`")]
    DuplicateField(String),
    #[error("invalid identifier `{0}`")]
    BadIdentifier(String),
    #[error("field `{field}`: unknown kind `{kind}`")]
    UnknownKind { field: String, kind: String },
    #[error("field `{0}`: enum kinds need at least one allowed value")]
    EmptyEnum(String),
    #[error("field `{0}`: `values` given for a kind without enum")]
    StrayValues(String),
    #[error("field `{0}`: list nesting deeper than {MAX_LIST_DEPTH}")]
    TooDeep(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown placeholder `{{{0}}}`")]
    UnknownPlaceholder(String),
    #[error("placeholder `{{{name}}}` must appear exactly once, found {count}")]
    PlaceholderCount { name: String, count: usize },
    #[error("chunk text is empty")]
    EmptyChunk,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldKind {
    Boolean,
    Integer,
    Number,
    String,
    Enum(Vec<String>),
    List(Box<FieldKind>),
}

impl FieldKind {
    fn parse(field: &str, text: &str, values: Option<&[String]>) -> Result<Self, SchemaError> {
        let kind = Self::parse_inner(field, text.trim(), values, 0)?;
        if values.is_some() && !kind.has_enum() {
            return Err(SchemaError::StrayValues(field.to_string()));
        }
        Ok(kind)
    }

    fn parse_inner(
        field: &str,
        text: &str,
        values: Option<&[String]>,
        depth: usize,
    ) -> Result<Self, SchemaError> {
        if let Some(inner) = text.strip_prefix("list<").and_then(|t| t.strip_suffix('>')) {
            if depth + 1 > MAX_LIST_DEPTH {
                return Err(SchemaError::TooDeep(field.to_string()));
            }
            let inner = Self::parse_inner(field, inner.trim(), values, depth + 1)?;
            return Ok(FieldKind::List(Box::new(inner)));
        }
        match text {
            "boolean" => Ok(FieldKind::Boolean),
            "integer" => Ok(FieldKind::Integer),
            "number" => Ok(FieldKind::Number),
            "string" => Ok(FieldKind::String),
            "enum" => match values {
                Some(v) if !v.is_empty() => Ok(FieldKind::Enum(v.to_vec())),
                _ => Err(SchemaError::EmptyEnum(field.to_string())),
            },
            other => Err(SchemaError::UnknownKind {
                field: field.to_string(),
                kind: other.to_string(),
            }),
        }
    }

    fn has_enum(&self) -> bool {
        match self {
            FieldKind::Enum(_) => true,
            FieldKind::List(inner) => inner.has_enum(),
            _ => false,
        }
    }

    fn enum_values(&self) -> Option<&[String]> {
        match self {
            FieldKind::Enum(v) => Some(v),
            FieldKind::List(inner) => inner.enum_values(),
            _ => None,
        }
    }

    /// Spelling used in schema files (`enum` values live in a sibling key).
    pub fn spec_name(&self) -> String {
        match self {
            FieldKind::Boolean => "boolean".into(),
            FieldKind::Integer => "integer".into(),
            FieldKind::Number => "number".into(),
            FieldKind::String => "string".into(),
            FieldKind::Enum(_) => "enum".into(),
            FieldKind::List(inner) => format!("list<{}>", inner.spec_name()),
        }
    }

    fn json_schema(&self) -> Value {
        match self {
            FieldKind::Boolean => serde_json::json!({"type": "boolean"}),
            FieldKind::Integer => serde_json::json!({"type": "integer"}),
            FieldKind::Number => serde_json::json!({"type": "number"}),
            FieldKind::String => serde_json::json!({"type": "string"}),
            FieldKind::Enum(values) => serde_json::json!({"type": "string", "enum": values}),
            FieldKind::List(inner) => serde_json::json!({"type": "array", "items": inner.json_schema()}),
        }
    }
}

/// Rendered in field docs; enum values are listed inline.
impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::Enum(values) => write!(f, "enum[{}]", values.join("|")),
            FieldKind::List(inner) => write!(f, "list<{inner}>"),
            other => f.write_str(&other.spec_name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub description: String,
    pub required: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Container {
    #[default]
    SingleRecord,
    ListOfRecords,
}

/// How string values are treated when a boolean or number is expected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coercion {
    #[default]
    Strict,
    /// Accepts `"true"`/`"false"` and numeric strings.
    Lenient,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    name: String,
    #[serde(default)]
    container: Container,
    #[serde(default)]
    system_prompt: String,
    prompt_template: String,
    fields: Vec<FieldFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldFile {
    name: String,
    kind: String,
    #[serde(default)]
    description: String,
    #[serde(default = "default_required")]
    required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<String>>,
}

fn default_required() -> bool {
    true
}

/// Immutable after load; share freely across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionSchema {
    pub name: String,
    pub fields: Vec<FieldSpec>,
    pub container: Container,
    pub prompt_template: String,
    pub system_prompt: String,
    digest: String,
}

fn identifier_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_]*$").unwrap())
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap())
}

/// Checks that every `{name}` placeholder in `template` is in `known` and
/// that each of `exactly_once` appears a single time.
pub fn check_placeholders(
    template: &str,
    known: &[&str],
    exactly_once: &[&str],
) -> Result<(), TemplateError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for cap in placeholder_re().captures_iter(template) {
        let name = cap.get(1).unwrap().as_str();
        if !known.contains(&name) {
            return Err(TemplateError::UnknownPlaceholder(name.to_string()));
        }
        *counts.entry(name).or_default() += 1;
    }
    for name in exactly_once {
        let count = counts.get(name).copied().unwrap_or(0);
        if count != 1 {
            return Err(TemplateError::PlaceholderCount {
                name: name.to_string(),
                count,
            });
        }
    }
    Ok(())
}

/// Single-pass substitution: replacement text is never rescanned.
pub fn fill_placeholders(template: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, TemplateError> {
    let mut err = None;
    let out = placeholder_re().replace_all(template, |cap: &regex::Captures<'_>| {
        let name = &cap[1];
        match lookup(name) {
            Some(v) => v,
            None => {
                err.get_or_insert_with(|| TemplateError::UnknownPlaceholder(name.to_string()));
                String::new()
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out.into_owned()),
    }
}

impl ExtractionSchema {
    /// Parses a YAML or JSON schema document.
    pub fn load(spec_text: &str) -> Result<Self, SchemaError> {
        let file: SchemaFile =
            serde_yaml::from_str(spec_text).map_err(|e| SchemaError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    fn from_file(file: SchemaFile) -> Result<Self, SchemaError> {
        if !identifier_re().is_match(&file.name) {
            return Err(SchemaError::BadIdentifier(file.name));
        }
        if file.fields.is_empty() {
            return Err(SchemaError::NoFields);
        }
        let mut seen = HashSet::new();
        let mut fields = Vec::with_capacity(file.fields.len());
        for f in &file.fields {
            if !identifier_re().is_match(&f.name) {
                return Err(SchemaError::BadIdentifier(f.name.clone()));
            }
            if !seen.insert(f.name.clone()) {
                return Err(SchemaError::DuplicateField(f.name.clone()));
            }
            fields.push(FieldSpec {
                name: f.name.clone(),
                kind: FieldKind::parse(&f.name, &f.kind, f.values.as_deref())?,
                description: f.description.clone(),
                required: f.required,
            });
        }
        check_placeholders(&file.prompt_template, &[CHUNK_TEXT, FIELD_DOCS], &[CHUNK_TEXT])?;

        let mut schema = ExtractionSchema {
            name: file.name,
            fields,
            container: file.container,
            prompt_template: file.prompt_template,
            system_prompt: file.system_prompt,
            digest: String::new(),
        };
        schema.digest = sha256_hex(schema.canonical_text());
        Ok(schema)
    }

    fn to_file(&self) -> SchemaFile {
        SchemaFile {
            name: self.name.clone(),
            container: self.container,
            system_prompt: self.system_prompt.clone(),
            prompt_template: self.prompt_template.clone(),
            fields: self
                .fields
                .iter()
                .map(|f| FieldFile {
                    name: f.name.clone(),
                    kind: f.kind.spec_name(),
                    description: f.description.clone(),
                    required: f.required,
                    values: f.kind.enum_values().map(|v| v.to_vec()),
                })
                .collect(),
        }
    }

    /// Sorted-key, whitespace-free JSON form; the digest is taken over it.
    pub fn canonical_text(&self) -> String {
        canonical_json(&serde_json::to_value(self.to_file()).expect("schema serializes"))
    }

    /// Hex SHA-256 of [`canonical_text`](Self::canonical_text).
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// One line per field in schema order:
    /// `- <name> (<kind>, required|optional): <description>`.
    pub fn field_docs(&self) -> String {
        self.fields
            .iter()
            .map(|f| {
                format!(
                    "- {} ({}, {}): {}",
                    f.name,
                    f.kind,
                    if f.required { "required" } else { "optional" },
                    f.description
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn render_prompt(&self, chunk: &Chunk) -> Result<String, TemplateError> {
        self.render_text(&chunk.text)
    }

    pub fn render_text(&self, chunk_text: &str) -> Result<String, TemplateError> {
        if chunk_text.is_empty() {
            return Err(TemplateError::EmptyChunk);
        }
        let docs = self.field_docs();
        fill_placeholders(&self.prompt_template, |name| match name {
            CHUNK_TEXT => Some(chunk_text.to_string()),
            FIELD_DOCS => Some(docs.clone()),
            _ => None,
        })
    }

    /// JSON Schema description sent to providers that support structured output.
    pub fn json_schema(&self) -> Value {
        let mut properties = Map::new();
        let mut required = Vec::new();
        for f in &self.fields {
            let mut prop = f.kind.json_schema();
            if !f.description.is_empty() {
                prop["description"] = Value::String(f.description.clone());
            }
            properties.insert(f.name.clone(), prop);
            if f.required {
                required.push(Value::String(f.name.clone()));
            }
        }
        let record = serde_json::json!({
            "type": "object",
            "title": self.name,
            "properties": properties,
            "required": required,
        });
        match self.container {
            Container::SingleRecord => record,
            Container::ListOfRecords => serde_json::json!({"type": "array", "items": record}),
        }
    }

    /// Validates a provider response body. Records come back unaligned
    /// (empty `chunk_id`); see [`ValidatedRecord::aligned`].
    pub fn validate_output(
        &self,
        raw: &str,
        coercion: Coercion,
    ) -> Result<Vec<ValidatedRecord>, ValidationFailure> {
        let parsed: Value = serde_json::from_str(raw).map_err(|e| ValidationFailure {
            violations: vec![Violation {
                record: None,
                location: Location::Json {
                    line: e.line(),
                    column: e.column(),
                },
                problem: Problem::MalformedJson(e.to_string()),
            }],
        })?;

        let objects: Vec<(Option<usize>, &Value)> = match self.container {
            Container::SingleRecord => vec![(None, &parsed)],
            Container::ListOfRecords => match &parsed {
                Value::Array(items) => items.iter().enumerate().map(|(i, v)| (Some(i), v)).collect(),
                other => {
                    return Err(ValidationFailure::single(
                        None,
                        Location::Root,
                        Problem::WrongType {
                            expected: "array".into(),
                            found: json_type(other).into(),
                        },
                    ))
                }
            },
        };

        let mut violations = Vec::new();
        let mut records = Vec::with_capacity(objects.len());
        for (index, obj) in objects {
            match self.validate_object(obj, coercion) {
                Ok(values) => records.push(ValidatedRecord {
                    chunk_id: String::new(),
                    doc_id: String::new(),
                    index: index.unwrap_or(0),
                    values,
                    schema_digest: self.digest.clone(),
                    raw_text: raw.to_string(),
                }),
                Err(mut v) => {
                    for violation in &mut v {
                        violation.record = index;
                    }
                    violations.extend(v);
                }
            }
        }
        if violations.is_empty() {
            Ok(records)
        } else {
            Err(ValidationFailure { violations })
        }
    }

    fn validate_object(
        &self,
        value: &Value,
        coercion: Coercion,
    ) -> Result<BTreeMap<String, Value>, Vec<Violation>> {
        let obj = match value {
            Value::Object(obj) => obj,
            other => {
                return Err(vec![Violation {
                    record: None,
                    location: Location::Root,
                    problem: Problem::WrongType {
                        expected: "object".into(),
                        found: json_type(other).into(),
                    },
                }])
            }
        };
        let mut violations = Vec::new();
        let mut values = BTreeMap::new();
        for field in &self.fields {
            match obj.get(&field.name) {
                None | Some(Value::Null) => {
                    if field.required {
                        violations.push(Violation {
                            record: None,
                            location: Location::Field(field.name.clone()),
                            problem: Problem::MissingField,
                        });
                    }
                }
                Some(v) => match check_value(&field.kind, v, coercion, &field.name) {
                    Ok(typed) => {
                        values.insert(field.name.clone(), typed);
                    }
                    Err(v) => violations.push(v),
                },
            }
        }
        if violations.is_empty() {
            Ok(values)
        } else {
            Err(violations)
        }
    }
}

fn json_type(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn check_value(kind: &FieldKind, v: &Value, coercion: Coercion, path: &str) -> Result<Value, Violation> {
    let wrong = |expected: &str| Violation {
        record: None,
        location: Location::Field(path.to_string()),
        problem: Problem::WrongType {
            expected: expected.to_string(),
            found: json_type(v).to_string(),
        },
    };
    let lenient = coercion == Coercion::Lenient;
    match kind {
        FieldKind::Boolean => match v {
            Value::Bool(b) => Ok(Value::Bool(*b)),
            Value::String(s) if lenient => match s.trim().to_ascii_lowercase().as_str() {
                "true" => Ok(Value::Bool(true)),
                "false" => Ok(Value::Bool(false)),
                _ => Err(wrong("boolean")),
            },
            _ => Err(wrong("boolean")),
        },
        FieldKind::Integer => match v {
            Value::Number(n) if n.is_i64() => Ok(v.clone()),
            Value::String(s) if lenient => s
                .trim()
                .parse::<i64>()
                .map(Value::from)
                .map_err(|_| wrong("integer")),
            _ => Err(wrong("integer")),
        },
        FieldKind::Number => match v {
            Value::Number(n) => n
                .as_f64()
                .filter(|x| x.is_finite())
                .map(Value::from)
                .ok_or_else(|| wrong("number")),
            Value::String(s) if lenient => s
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .map(Value::from)
                .ok_or_else(|| wrong("number")),
            _ => Err(wrong("number")),
        },
        FieldKind::String => match v {
            Value::String(_) => Ok(v.clone()),
            _ => Err(wrong("string")),
        },
        FieldKind::Enum(allowed) => match v {
            Value::String(s) if allowed.iter().any(|a| a == s) => Ok(v.clone()),
            Value::String(s) => Err(Violation {
                record: None,
                location: Location::Field(path.to_string()),
                problem: Problem::NotInEnum {
                    value: s.clone(),
                    allowed: allowed.clone(),
                },
            }),
            _ => Err(wrong("string")),
        },
        FieldKind::List(inner) => match v {
            Value::Array(items) => items
                .iter()
                .enumerate()
                .map(|(i, item)| check_value(inner, item, coercion, &format!("{path}[{i}]")))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array),
            _ => Err(wrong("array")),
        },
    }
}

/// One extracted record, aligned to the chunk it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedRecord {
    pub chunk_id: String,
    pub doc_id: String,
    /// Position within a list-of-records body; 0 for single records.
    pub index: usize,
    pub values: BTreeMap<String, Value>,
    pub schema_digest: String,
    pub raw_text: String,
}

impl ValidatedRecord {
    pub fn aligned(mut self, chunk: &Chunk) -> Self {
        self.chunk_id = chunk.chunk_id.clone();
        self.doc_id = chunk.doc_id.clone();
        self
    }

    /// The record's values as a JSON object body.
    pub fn values_json(&self) -> String {
        serde_json::to_string(&self.values).expect("values serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "at", content = "value", rename_all = "snake_case")]
pub enum Location {
    Root,
    Field(String),
    Json { line: usize, column: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "snake_case")]
pub enum Problem {
    MalformedJson(String),
    MissingField,
    WrongType { expected: String, found: String },
    NotInEnum { value: String, allowed: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Element index for list-of-records bodies.
    pub record: Option<usize>,
    pub location: Location,
    pub problem: Problem,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(i) = self.record {
            write!(f, "record {i}: ")?;
        }
        match &self.location {
            Location::Root => f.write_str("body: ")?,
            Location::Field(name) => write!(f, "field `{name}`: ")?,
            Location::Json { line, column } => write!(f, "line {line} column {column}: ")?,
        }
        match &self.problem {
            Problem::MalformedJson(msg) => write!(f, "malformed JSON ({msg})"),
            Problem::MissingField => f.write_str("missing required field"),
            Problem::WrongType { expected, found } => write!(f, "expected {expected}, found {found}"),
            Problem::NotInEnum { value, allowed } => {
                write!(f, "`{value}` not one of [{}]", allowed.join(", "))
            }
        }
    }
}

/// Returned, never raised: a failed body is a first-class run output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationFailure {
    pub violations: Vec<Violation>,
}

impl ValidationFailure {
    fn single(record: Option<usize>, location: Location, problem: Problem) -> Self {
        Self {
            violations: vec![Violation {
                record,
                location,
                problem,
            }],
        }
    }

    pub fn is_malformed_json(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v.problem, Problem::MalformedJson(_)))
    }
}

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOOL_SCHEMA: &str = r#"
name: price_expectations
system_prompt: You label text.
prompt_template: "Extract: {field_docs}\n---\n{chunk_text}"
fields:
  - name: price_expectation
    kind: boolean
    description: Whether a price expectation is stated
"#;

    fn chunk(text: &str) -> Chunk {
        Chunk {
            chunk_id: "d:00000".into(),
            doc_id: "d".into(),
            ordinal: 0,
            text: text.into(),
            relevance_score: None,
        }
    }

    #[test]
    fn loads_single_boolean_field() {
        let s = ExtractionSchema::load(BOOL_SCHEMA).unwrap();
        assert_eq!(s.fields.len(), 1);
        assert_eq!(s.fields[0].kind, FieldKind::Boolean);
        assert!(s.fields[0].required);
        assert_eq!(s.digest().len(), 64);
    }

    #[test]
    fn empty_fields_rejected() {
        let text = "name: x\nprompt_template: '{chunk_text}'\nfields: []\n";
        assert!(matches!(ExtractionSchema::load(text), Err(SchemaError::NoFields)));
    }

    #[test]
    fn reordered_keys_share_a_digest() {
        let a = ExtractionSchema::load(BOOL_SCHEMA).unwrap();
        let json = r#"{"fields":[{"description":"Whether a price expectation is stated","kind":"boolean","name":"price_expectation"}],
            "prompt_template":"Extract: {field_docs}\n---\n{chunk_text}","system_prompt":"You label text.","name":"price_expectations"}"#;
        let b = ExtractionSchema::load(json).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn canonical_round_trip_keeps_digest() {
        let a = ExtractionSchema::load(BOOL_SCHEMA).unwrap();
        let b = ExtractionSchema::load(&a.canonical_text()).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a, b);
    }

    #[test]
    fn structural_errors() {
        let dup = "name: x\nprompt_template: '{chunk_text}'\nfields:\n  - {name: a, kind: string}\n  - {name: a, kind: boolean}\n";
        assert!(matches!(ExtractionSchema::load(dup), Err(SchemaError::DuplicateField(_))));
        let empty_enum = "name: x\nprompt_template: '{chunk_text}'\nfields:\n  - {name: a, kind: enum, values: []}\n";
        assert!(matches!(ExtractionSchema::load(empty_enum), Err(SchemaError::EmptyEnum(_))));
        let deep = "name: x\nprompt_template: '{chunk_text}'\nfields:\n  - {name: a, kind: 'list<list<list<string>>>'}\n";
        assert!(matches!(ExtractionSchema::load(deep), Err(SchemaError::TooDeep(_))));
        let ok_deep = "name: x\nprompt_template: '{chunk_text}'\nfields:\n  - {name: a, kind: 'list<list<string>>'}\n";
        assert!(ExtractionSchema::load(ok_deep).is_ok());
        let unknown = "name: x\nprompt_template: '{chunk_text}'\nfields:\n  - {name: a, kind: date}\n";
        assert!(matches!(ExtractionSchema::load(unknown), Err(SchemaError::UnknownKind { .. })));
        assert!(matches!(ExtractionSchema::load("name: [oops"), Err(SchemaError::Parse(_))));
    }

    #[test]
    fn template_needs_chunk_text_once() {
        let missing = "name: x\nprompt_template: 'no text'\nfields:\n  - {name: a, kind: string}\n";
        assert!(matches!(
            ExtractionSchema::load(missing),
            Err(SchemaError::Template(TemplateError::PlaceholderCount { count: 0, .. }))
        ));
        let twice = "name: x\nprompt_template: '{chunk_text} {chunk_text}'\nfields:\n  - {name: a, kind: string}\n";
        assert!(ExtractionSchema::load(twice).is_err());
        let unknown = "name: x\nprompt_template: '{chunk_text} {other}'\nfields:\n  - {name: a, kind: string}\n";
        assert!(matches!(
            ExtractionSchema::load(unknown),
            Err(SchemaError::Template(TemplateError::UnknownPlaceholder(_)))
        ));
    }

    #[test]
    fn render_substitutes_both_placeholders() {
        let s = ExtractionSchema::load(BOOL_SCHEMA).unwrap();
        let out = s.render_prompt(&chunk("oil at $70")).unwrap();
        assert_eq!(
            out,
            "Extract: - price_expectation (boolean, required): Whether a price expectation is stated\n---\noil at $70"
        );
        assert_eq!(out, s.render_prompt(&chunk("oil at $70")).unwrap());
        assert_eq!(s.render_prompt(&chunk("")), Err(TemplateError::EmptyChunk));
    }

    #[test]
    fn chunk_text_is_not_rescanned() {
        let s = ExtractionSchema::load(BOOL_SCHEMA).unwrap();
        let out = s.render_text("literal {field_docs} here").unwrap();
        assert!(out.ends_with("literal {field_docs} here"));
    }

    #[test]
    fn strict_and_lenient_booleans() {
        let s = ExtractionSchema::load(BOOL_SCHEMA).unwrap();
        let recs = s.validate_output(r#"{"price_expectation": true}"#, Coercion::Strict).unwrap();
        assert_eq!(recs[0].values["price_expectation"], Value::Bool(true));

        let err = s.validate_output(r#"{"price_expectation": "yes"}"#, Coercion::Strict).unwrap_err();
        assert!(matches!(err.violations[0].problem, Problem::WrongType { .. }));
        let err = s.validate_output(r#"{"price_expectation": "true"}"#, Coercion::Strict).unwrap_err();
        assert_eq!(err.violations[0].location, Location::Field("price_expectation".into()));
        let ok = s.validate_output(r#"{"price_expectation": "TRUE"}"#, Coercion::Lenient).unwrap();
        assert_eq!(ok[0].values["price_expectation"], Value::Bool(true));
    }

    #[test]
    fn list_container_yields_one_record_per_element() {
        let text = "name: c\ncontainer: list-of-records\nprompt_template: '{chunk_text}'\nfields:\n  - {name: good, kind: string}\n";
        let s = ExtractionSchema::load(text).unwrap();
        let recs = s
            .validate_output(r#"[{"good":"oil"},{"good":"gas"}]"#, Coercion::Strict)
            .unwrap();
        let expected: Vec<BTreeMap<String, Value>> = vec![
            BTreeMap::from([("good".to_string(), Value::from("oil"))]),
            BTreeMap::from([("good".to_string(), Value::from("gas"))]),
        ];
        assert_eq!(recs.iter().map(|r| r.values.clone()).collect::<Vec<_>>(), expected);
        assert_eq!(recs[1].index, 1);
    }

    #[test]
    fn malformed_json_names_a_position() {
        let s = ExtractionSchema::load(BOOL_SCHEMA).unwrap();
        let err = s.validate_output("{\"price_expectation\": tru", Coercion::Strict).unwrap_err();
        assert!(err.is_malformed_json());
        assert!(matches!(err.violations[0].location, Location::Json { line: 1, .. }));
    }

    #[test]
    fn json_schema_marks_required_fields() {
        let s = ExtractionSchema::load(BOOL_SCHEMA).unwrap();
        let js = s.json_schema();
        assert_eq!(js["required"][0], "price_expectation");
        assert_eq!(js["properties"]["price_expectation"]["type"], "boolean");
    }
}
