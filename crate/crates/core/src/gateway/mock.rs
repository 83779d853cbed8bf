//! Deterministic scripted provider for offline runs and tests.
//!
//! Script format (YAML or JSON):
//!
//! ```yaml
//! mode: collect            # first_match (default) | collect
//! on_miss: empty           # error (default) | empty
//! empty_body: "[]"         # body returned on a miss when on_miss = empty
//! match_after: "\n---\n"   # rules only see the user prompt after this marker
//! rules:
//!   - pattern: '(?i)\boil\b'
//!     body: '{"good": "oil"}'
//!   - pattern: 'scenario'
//!     unless: 'conditional-statements'   # skipped when this matches the whole prompt
//!     body: '{"price_expectation": true}'
//!   - pattern: '(?s)Prompt:\n(.*)$'
//!     expand: true                       # `$1` etc. refer to capture groups
//!     body: "$1 (refined)"
//! fixed:                                  # sha256(user_prompt) -> body, checked first
//!   3b1f...: '{"good": "gas"}'
//! ```
//!
//! In `collect` mode every matching rule contributes: JSON array bodies are
//! flattened, other JSON values appended, and the result is one JSON array.
//! A matching body that is not JSON is returned verbatim on its own.

use super::{ErrorClass, Provider, ProviderError, ProviderRequest, RawReply};
use crate::canonical::sha256_hex;
use crate::cost::{approx_tokens, TokenUsage};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    #[default]
    FirstMatch,
    Collect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissPolicy {
    #[default]
    Error,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unless: Option<String>,
    pub body: String,
    #[serde(default)]
    pub expand: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub mode: MockMode,
    #[serde(default)]
    pub on_miss: MissPolicy,
    #[serde(default = "default_empty_body")]
    pub empty_body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_after: Option<String>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub fixed: BTreeMap<String, String>,
    /// Simulated per-call latency.
    #[serde(default)]
    pub latency_ms: u64,
}

fn default_empty_body() -> String {
    "{}".to_string()
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            mode: MockMode::default(),
            on_miss: MissPolicy::default(),
            empty_body: default_empty_body(),
            match_after: None,
            rules: Vec::new(),
            fixed: BTreeMap::new(),
            latency_ms: 0,
        }
    }
}

impl MockScript {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_yaml::from_str(text).map_err(|e| format!("mock script: {e}"))
    }
}

#[derive(Debug)]
struct CompiledRule {
    pattern: Regex,
    unless: Option<Regex>,
    body: String,
    expand: bool,
}

#[derive(Debug)]
pub struct MockProvider {
    script: MockScript,
    rules: Vec<CompiledRule>,
    faults: Mutex<VecDeque<ProviderError>>,
    calls: AtomicU64,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Result<Self, String> {
        let rules = script
            .rules
            .iter()
            .map(|r| {
                Ok(CompiledRule {
                    pattern: Regex::new(&r.pattern).map_err(|e| format!("rule `{}`: {e}", r.pattern))?,
                    unless: r
                        .unless
                        .as_deref()
                        .map(Regex::new)
                        .transpose()
                        .map_err(|e| format!("rule `{}`: {e}", r.pattern))?,
                    body: r.body.clone(),
                    expand: r.expand,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(Self {
            script,
            rules,
            faults: Mutex::new(VecDeque::new()),
            calls: AtomicU64::new(0),
        })
    }

    /// Queues errors returned, in order, by the next calls.
    pub fn inject_faults(&self, faults: impl IntoIterator<Item = ProviderError>) {
        self.faults.lock().unwrap().extend(faults);
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Body for `req` under the script; a pure function of the request.
    pub fn respond(&self, req: &ProviderRequest) -> Result<String, ProviderError> {
        let prompt = &req.user_prompt;
        if let Some(body) = self.script.fixed.get(&sha256_hex(prompt)) {
            return Ok(body.clone());
        }
        let scope = match &self.script.match_after {
            Some(marker) => prompt.rfind(marker.as_str()).map_or(prompt.as_str(), |i| &prompt[i + marker.len()..]),
            None => prompt.as_str(),
        };
        let mut bodies = Vec::new();
        for rule in &self.rules {
            if rule.unless.as_ref().is_some_and(|u| u.is_match(prompt)) {
                continue;
            }
            let Some(caps) = rule.pattern.captures(scope) else {
                continue;
            };
            let body = if rule.expand {
                let mut out = String::new();
                caps.expand(&rule.body, &mut out);
                out
            } else {
                rule.body.clone()
            };
            if self.script.mode == MockMode::FirstMatch {
                return Ok(body);
            }
            bodies.push(body);
        }
        if bodies.is_empty() {
            return match self.script.on_miss {
                MissPolicy::Empty => Ok(self.script.empty_body.clone()),
                MissPolicy::Error => Err(ProviderError::new(ErrorClass::ScriptMiss, "no mock rule matched")),
            };
        }
        let mut items = Vec::new();
        for body in bodies {
            match serde_json::from_str::<Value>(&body) {
                Ok(Value::Array(xs)) => items.extend(xs),
                Ok(v) => items.push(v),
                Err(_) => return Ok(body),
            }
        }
        Ok(serde_json::to_string(&Value::Array(items)).expect("JSON values serialize"))
    }
}

impl Provider for MockProvider {
    fn call(&self, req: &ProviderRequest) -> Result<RawReply, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.script.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.script.latency_ms));
        }
        if let Some(fault) = self.faults.lock().unwrap().pop_front() {
            return Err(fault);
        }
        let body = self.respond(req)?;
        // Real providers stop at max_output_tokens; the mock reports the same cap.
        let output = approx_tokens(&body).min(req.params.max_output_tokens as u64);
        Ok(RawReply {
            usage: Some(TokenUsage {
                input_tokens: req.approx_input_tokens(),
                output_tokens: output,
                estimated: true,
            }),
            body,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::GenerationParams;

    fn req(user: &str) -> ProviderRequest {
        ProviderRequest {
            provider_id: "mock".into(),
            model_id: "m".into(),
            system_prompt: String::new(),
            user_prompt: user.into(),
            schema_digest: String::new(),
            params: GenerationParams::default(),
            response_schema: None,
        }
    }

    fn provider(yaml: &str) -> MockProvider {
        MockProvider::new(MockScript::parse(yaml).unwrap()).unwrap()
    }

    #[test]
    fn rule_hit_and_determinism() {
        let p = provider("rules:\n  - {pattern: 'oil', body: '{\"good\":\"oil\"}'}\n");
        let a = p.call(&req("crude oil rose")).unwrap();
        let b = p.call(&req("crude oil rose")).unwrap();
        assert_eq!(a.body, r#"{"good":"oil"}"#);
        assert_eq!(a, b);
        assert!(a.usage.unwrap().estimated);
    }

    #[test]
    fn miss_policies() {
        let p = provider("rules: []\n");
        let e = p.call(&req("x")).unwrap_err();
        assert_eq!(e.class, ErrorClass::ScriptMiss);
        let p = provider("on_miss: empty\nempty_body: '[]'\n");
        assert_eq!(p.call(&req("x")).unwrap().body, "[]");
    }

    #[test]
    fn collect_mode_and_scope_marker() {
        let p = provider(
            "mode: collect\nmatch_after: '---'\nrules:\n  - {pattern: 'oil', body: '{\"good\":\"oil\"}'}\n  - {pattern: 'gas', body: '[{\"good\":\"gas\"}]'}\n",
        );
        assert_eq!(p.respond(&req("fields: oil, gas\n---\ngas then oil")).unwrap(), r#"[{"good":"oil"},{"good":"gas"}]"#);
        assert_eq!(p.respond(&req("oil in the header\n---\ngas")).unwrap(), r#"[{"good":"gas"}]"#);
    }

    #[test]
    fn unless_and_expand() {
        let p = provider(
            "rules:\n  - {pattern: 'scenario', unless: 'FIXED', body: 'true'}\n  - {pattern: '(?s)Prompt:\\n(.*)$', expand: true, body: '$1 FIXED'}\n  - {pattern: '.', body: 'false'}\n",
        );
        assert_eq!(p.respond(&req("a scenario")).unwrap(), "true");
        assert_eq!(p.respond(&req("a scenario FIXED")).unwrap(), "false");
        assert_eq!(p.respond(&req("Prompt:\nbe careful")).unwrap(), "be careful FIXED");
    }

    #[test]
    fn fixed_bodies_take_precedence() {
        let yaml = format!("fixed:\n  {}: 'pinned'\nrules:\n  - {{pattern: '.', body: 'rule'}}\n", sha256_hex("exact"));
        let p = provider(&yaml);
        assert_eq!(p.respond(&req("exact")).unwrap(), "pinned");
        assert_eq!(p.respond(&req("other")).unwrap(), "rule");
    }

    #[test]
    fn output_usage_is_capped() {
        let p = provider("rules:\n  - {pattern: '.', body: 'xxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxx'}\n");
        let mut r = req("a");
        r.params.max_output_tokens = 3;
        assert_eq!(p.call(&r).unwrap().usage.unwrap().output_tokens, 3);
    }
}
