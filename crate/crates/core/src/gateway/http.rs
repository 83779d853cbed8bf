//! Generic JSON-over-HTTP provider profile.
//!
//! Request and response locations are JSON pointers, so one profile type
//! covers most structured-output APIs. The API key is read from the
//! environment variable named in the profile at call time and never stored.

use super::{ErrorClass, Provider, ProviderError, ProviderRequest, RawReply};
use crate::cost::TokenUsage;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsageFields {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpProfile {
    pub provider_id: String,
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    /// Prefix placed before the key, e.g. `Bearer`. Empty for none.
    #[serde(default = "default_auth_scheme")]
    pub auth_scheme: String,
    #[serde(default = "default_model_field")]
    pub model_field: String,
    #[serde(default = "default_prompt_field")]
    pub prompt_field: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens_field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_field: Option<String>,
    /// Where the structured output sits in the response.
    #[serde(default = "default_body_field")]
    pub body_field: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage_fields: Option<UsageFields>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_auth_header() -> String {
    "Authorization".into()
}
fn default_auth_scheme() -> String {
    "Bearer".into()
}
fn default_model_field() -> String {
    "/model".into()
}
fn default_prompt_field() -> String {
    "/input".into()
}
fn default_body_field() -> String {
    "/output".into()
}
fn default_timeout_ms() -> u64 {
    60_000
}

impl HttpProfile {
    pub fn new(provider_id: &str, base_url: &str) -> Self {
        Self {
            provider_id: provider_id.into(),
            base_url: base_url.into(),
            auth_env_var: None,
            auth_header: default_auth_header(),
            auth_scheme: default_auth_scheme(),
            model_field: default_model_field(),
            prompt_field: default_prompt_field(),
            system_field: None,
            schema_field: None,
            temperature_field: None,
            max_tokens_field: None,
            seed_field: None,
            body_field: default_body_field(),
            usage_fields: None,
            timeout_ms: default_timeout_ms(),
        }
    }
}

/// Sets `value` at a JSON pointer, creating intermediate objects.
fn set_pointer(root: &mut Value, pointer: &str, value: Value) {
    let parts: Vec<String> = pointer
        .trim_start_matches('/')
        .split('/')
        .map(|p| p.replace("~1", "/").replace("~0", "~"))
        .collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            obj.insert(part.clone(), value);
            return;
        }
        cur = obj.entry(part.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
}

#[derive(Debug)]
pub struct HttpProvider {
    profile: HttpProfile,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(profile: HttpProfile) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(profile.timeout_ms))
            .build();
        Self { profile, agent }
    }

    pub fn request_body(&self, req: &ProviderRequest) -> Value {
        let p = &self.profile;
        let mut body = Value::Object(Map::new());
        set_pointer(&mut body, &p.model_field, Value::from(req.model_id.clone()));
        set_pointer(&mut body, &p.prompt_field, Value::from(req.user_prompt.clone()));
        if let Some(f) = &p.system_field {
            set_pointer(&mut body, f, Value::from(req.system_prompt.clone()));
        }
        if let (Some(f), Some(schema)) = (&p.schema_field, &req.response_schema) {
            set_pointer(&mut body, f, (**schema).clone());
        }
        if let Some(f) = &p.temperature_field {
            set_pointer(&mut body, f, Value::from(req.params.temperature));
        }
        if let Some(f) = &p.max_tokens_field {
            set_pointer(&mut body, f, Value::from(req.params.max_output_tokens));
        }
        if let (Some(f), Some(seed)) = (&p.seed_field, req.params.seed) {
            set_pointer(&mut body, f, Value::from(seed));
        }
        body
    }

    fn parse_reply(&self, resp: Value) -> Result<RawReply, ProviderError> {
        let body = match resp.pointer(&self.profile.body_field) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Null) | None => {
                return Err(ProviderError::new(
                    ErrorClass::InvalidRequest,
                    format!("response has no `{}`", self.profile.body_field),
                ))
            }
            Some(other) => other.to_string(),
        };
        let usage = self.profile.usage_fields.as_ref().and_then(|u| {
            Some(TokenUsage {
                input_tokens: resp.pointer(&u.input)?.as_u64()?,
                output_tokens: resp.pointer(&u.output)?.as_u64()?,
                estimated: false,
            })
        });
        Ok(RawReply { body, usage })
    }
}

fn classify_transport(t: &ureq::Transport) -> ErrorClass {
    let text = t.to_string().to_ascii_lowercase();
    if text.contains("timed out") || text.contains("timeout") {
        ErrorClass::Timeout
    } else {
        ErrorClass::Transport
    }
}

impl Provider for HttpProvider {
    fn call(&self, req: &ProviderRequest) -> Result<RawReply, ProviderError> {
        let mut request = self.agent.post(&self.profile.base_url);
        if let Some(var) = &self.profile.auth_env_var {
            let key = std::env::var(var)
                .map_err(|_| ProviderError::new(ErrorClass::Auth, format!("environment variable {var} is not set")))?;
            let value = if self.profile.auth_scheme.is_empty() {
                key
            } else {
                format!("{} {key}", self.profile.auth_scheme)
            };
            request = request.set(&self.profile.auth_header, &value);
        }
        match request.send_json(self.request_body(req)) {
            Ok(resp) => {
                let json: Value = resp
                    .into_json()
                    .map_err(|e| ProviderError::new(ErrorClass::InvalidRequest, format!("response is not JSON: {e}")))?;
                self.parse_reply(json)
            }
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                Err(ProviderError::status(code, text.chars().take(500).collect::<String>()))
            }
            Err(ureq::Error::Transport(t)) => Err(ProviderError::new(classify_transport(&t), t.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, GatewayError, GenerationParams, RecordingSleeper, RetryPolicy};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{mpsc, Arc};

    fn req() -> ProviderRequest {
        ProviderRequest {
            provider_id: "api".into(),
            model_id: "m-1".into(),
            system_prompt: "sys".into(),
            user_prompt: "oil at $70".into(),
            schema_digest: "d".into(),
            params: GenerationParams { temperature: 0.5, max_output_tokens: 64, seed: Some(3) },
            response_schema: Some(Arc::new(serde_json::json!({"type": "object"}))),
        }
    }

    /// Serves canned `(status, body)` replies, one per connection, and
    /// reports each received request body.
    fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/extract", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line["authorization:".len()..].trim().to_string();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((String::from_utf8(buf).unwrap(), auth)).unwrap();
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (url, rx)
    }

    fn profile(url: &str) -> HttpProfile {
        HttpProfile {
            system_field: Some("/system".into()),
            schema_field: Some("/response_format/schema".into()),
            temperature_field: Some("/temperature".into()),
            max_tokens_field: Some("/max_tokens".into()),
            body_field: "/choices/0/text".into(),
            usage_fields: Some(UsageFields { input: "/usage/in".into(), output: "/usage/out".into() }),
            auth_env_var: Some("EXTRACTKIT_TEST_KEY".into()),
            ..HttpProfile::new("api", url)
        }
    }

    #[test]
    fn maps_fields_both_ways() {
        std::env::set_var("EXTRACTKIT_TEST_KEY", "sekrit");
        let (url, rx) = serve(vec![(200, r#"{"choices":[{"text":"{\"good\":\"oil\"}"}],"usage":{"in":12,"out":5}}"#.into())]);
        let p = HttpProvider::new(profile(&url));
        let reply = p.call(&req()).unwrap();
        assert_eq!(reply.body, r#"{"good":"oil"}"#);
        assert_eq!(reply.usage, Some(TokenUsage { input_tokens: 12, output_tokens: 5, estimated: false }));
        let (sent, auth) = rx.recv().unwrap();
        let sent: Value = serde_json::from_str(&sent).unwrap();
        assert_eq!(sent["model"], "m-1");
        assert_eq!(sent["input"], "oil at $70");
        assert_eq!(sent["system"], "sys");
        assert_eq!(sent["response_format"]["schema"]["type"], "object");
        assert_eq!(sent["max_tokens"], 64);
        assert_eq!(auth, "Bearer sekrit");
    }

    #[test]
    fn retries_429_then_succeeds() {
        std::env::set_var("EXTRACTKIT_TEST_KEY", "sekrit");
        let (url, _rx) = serve(vec![
            (429, "{}".into()),
            (200, r#"{"choices":[{"text":"ok"}]}"#.into()),
        ]);
        let g = Gateway::new(2).with_sleeper(Arc::new(RecordingSleeper::default()));
        g.register_provider("api", Arc::new(HttpProvider::new(profile(&url)))).unwrap();
        let r = g.send(&req(), &RetryPolicy::default()).unwrap();
        assert_eq!((r.attempts, r.body.as_str()), (2, "ok"));
        assert!(r.usage.estimated);
    }

    #[test]
    fn client_errors_are_not_retried() {
        std::env::set_var("EXTRACTKIT_TEST_KEY", "sekrit");
        let (url, _rx) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        let g = Gateway::new(2).with_sleeper(Arc::new(RecordingSleeper::default()));
        g.register_provider("api", Arc::new(HttpProvider::new(profile(&url)))).unwrap();
        let err = g.send(&req(), &RetryPolicy::default()).unwrap_err();
        assert!(matches!(err, GatewayError::NonRetryable(ProviderError { status: Some(400), .. })));
    }

    #[test]
    fn unreachable_base_url_is_transport() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let g = Gateway::new(2).with_sleeper(Arc::new(RecordingSleeper::default()));
        let p = HttpProfile::new("api", &format!("http://127.0.0.1:{port}/"));
        g.register_provider("api", Arc::new(HttpProvider::new(p))).unwrap();
        let err = g.send(&req(), &RetryPolicy::default()).unwrap_err();
        assert!(matches!(err, GatewayError::Transport(_)), "{err}");
    }

    #[test]
    fn pointer_writes_nest() {
        let mut v = Value::Object(Map::new());
        set_pointer(&mut v, "/a/b", Value::from(1));
        set_pointer(&mut v, "/a/c", Value::from(2));
        assert_eq!(v, serde_json::json!({"a": {"b": 1, "c": 2}}));
    }
}
