use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use super::{Backend, GenerationError, GenerationRequest, RawResponse, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// One HTTP POST of a JSON body with bearer authentication. An `Err` is a
/// transport-level failure (no status received).
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: &str, body: &Json) -> std::result::Result<HttpResponse, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, api_key: &str, body: &Json) -> std::result::Result<HttpResponse, String> {
        let mut resp = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {api_key}"))
            .send_json(body)
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Exponential backoff: the wait before attempt `k + 1` is `base * factor^(k - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub base_delay_ms: u64,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay_ms: 1000,
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        let k = attempt.saturating_sub(2) as i32;
        Duration::from_secs_f64(self.base_delay_ms as f64 / 1000.0 * self.factor.powi(k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".to_string(),
            api_key_env: "OPENAI_API_KEY".to_string(),
            timeout_secs: 120,
            retry: RetryPolicy::default(),
        }
    }
}

/// Chat-completions client.
pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: String,
    transport: Box<dyn Transport>,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("config", &self.config).finish_non_exhaustive()
    }
}

impl RemoteBackend {
    /// Reads the credential from the configured environment variable.
    pub fn from_env(config: RemoteConfig, transport: Box<dyn Transport>) -> Result<Self> {
        match std::env::var(&config.api_key_env) {
            Ok(key) if !key.trim().is_empty() => Ok(Self::with_key(config, key, transport)),
            _ => Err(GenerationError::MissingCredential(config.api_key_env.clone())),
        }
    }

    pub fn with_key(config: RemoteConfig, api_key: String, transport: Box<dyn Transport>) -> Self {
        Self {
            config,
            api_key,
            transport,
        }
    }

    pub fn request_body(request: &GenerationRequest<'_>) -> Json {
        json!({
            "model": request.params.model_id,
            "messages": [
                {"role": "system", "content": request.prompt.system_role},
                {"role": "user", "content": request.prompt.user_body},
            ],
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
            "max_tokens": request.params.max_tokens,
        })
    }
}

fn completion_text(body: &str) -> Result<String> {
    let v: Json = serde_json::from_str(body).map_err(|e| GenerationError::MalformedResponse(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Json::as_str)
        .map(str::to_string)
        .ok_or_else(|| GenerationError::MalformedResponse("missing choices[0].message.content".into()))
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

impl Backend for RemoteBackend {
    fn generate_raw(&self, request: &GenerationRequest<'_>) -> Result<RawResponse> {
        let body = Self::request_body(request);
        let policy = &self.config.retry;
        let attempts = policy.max_attempts.max(1);
        let mut cause = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(policy.delay_before(attempt));
                log::warn!("retrying completion request (attempt {attempt}/{attempts}): {cause}");
            }
            match self.transport.post_json(&self.config.endpoint, &self.api_key, &body) {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return Ok(RawResponse {
                        text: completion_text(&resp.body)?,
                        retries: attempt - 1,
                    });
                }
                Ok(resp) if retryable(resp.status) => {
                    cause = format!("HTTP status {}: {}", resp.status, resp.body);
                }
                Ok(resp) => {
                    return Err(GenerationError::Http {
                        status: resp.status,
                        body: resp.body,
                    });
                }
                Err(e) => cause = format!("transport: {e}"),
            }
        }
        Err(GenerationError::RetriesExhausted { attempts, cause })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::SamplingParams;
    use crate::prompting::PromptText;
    use std::sync::Mutex;

    struct Script {
        replies: Mutex<Vec<std::result::Result<HttpResponse, String>>>,
        bodies: Mutex<Vec<Json>>,
    }

    impl Script {
        fn new(mut replies: Vec<std::result::Result<HttpResponse, String>>) -> Self {
            replies.reverse();
            Self {
                replies: Mutex::new(replies),
                bodies: Mutex::new(Vec::new()),
            }
        }
    }

    impl Transport for &'static Script {
        fn post_json(&self, _: &str, _: &str, body: &Json) -> std::result::Result<HttpResponse, String> {
            self.bodies.lock().unwrap().push(body.clone());
            self.replies.lock().unwrap().pop().expect("script exhausted")
        }
    }

    fn ok(content: &str) -> std::result::Result<HttpResponse, String> {
        Ok(HttpResponse {
            status: 200,
            body: json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string(),
        })
    }

    fn status(code: u16) -> std::result::Result<HttpResponse, String> {
        Ok(HttpResponse { status: code, body: "err".into() })
    }

    fn backend(script: &'static Script) -> RemoteBackend {
        let config = RemoteConfig {
            retry: RetryPolicy { base_delay_ms: 0, ..RetryPolicy::default() },
            ..RemoteConfig::default()
        };
        RemoteBackend::with_key(config, "k".into(), Box::new(script))
    }

    fn call(b: &RemoteBackend) -> Result<RawResponse> {
        let prompt = PromptText { system_role: "sys".into(), user_body: "user".into() };
        let params = SamplingParams::default();
        b.generate_raw(&GenerationRequest { prompt: &prompt, params: &params, refinement_count: 0, seed: 0 })
    }

    #[test]
    fn two_transport_failures_then_success() {
        let script = Box::leak(Box::new(Script::new(vec![Err("reset".into()), Err("reset".into()), ok("a,b")])));
        let raw = call(&backend(script)).unwrap();
        assert_eq!(raw, RawResponse { text: "a,b".into(), retries: 2 });
        let body = &script.bodies.lock().unwrap()[0];
        assert_eq!(body["model"], "gpt-4o");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "user");
        assert_eq!(body["temperature"], 0.9);
    }

    #[test]
    fn non_retryable_status_fails_at_once() {
        let script = Box::leak(Box::new(Script::new(vec![status(400)])));
        assert!(matches!(call(&backend(script)), Err(GenerationError::Http { status: 400, .. })));
    }

    #[test]
    fn retry_budget_exhaustion_keeps_last_cause() {
        let script = Box::leak(Box::new(Script::new(vec![status(429), status(503), status(500), status(502), status(500)])));
        match call(&backend(script)) {
            Err(GenerationError::RetriesExhausted { attempts: 5, cause }) => assert!(cause.contains("500")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_credential_before_network() {
        let script = Box::leak(Box::new(Script::new(Vec::new())));
        let config = RemoteConfig {
            api_key_env: "FAIRSYNTH_TEST_KEY_THAT_IS_NOT_SET".into(),
            ..RemoteConfig::default()
        };
        let err = RemoteBackend::from_env(config, Box::new(&*script)).unwrap_err();
        assert!(err.to_string().contains("FAIRSYNTH_TEST_KEY_THAT_IS_NOT_SET"));
        assert!(script.bodies.lock().unwrap().is_empty());
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_before(2), Duration::from_secs(1));
        assert_eq!(p.delay_before(3), Duration::from_secs(2));
        assert_eq!(p.delay_before(5), Duration::from_secs(8));
    }

    #[test]
    fn malformed_body() {
        let script = Box::leak(Box::new(Script::new(vec![Ok(HttpResponse { status: 200, body: "{}".into() })])));
        assert!(matches!(call(&backend(script)), Err(GenerationError::MalformedResponse(_))));
    }
}
