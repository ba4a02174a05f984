use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::tokenizer::Vocab;
use crate::zoo::{generate, ChatTemplate, GenerationConfig, LmModel, RuleBasedResponder};

use super::http::{post_chat, ChatRequest};
use super::ChatError;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const TIMEOUT_ENV: &str = "TRAP_BBIV_TIMEOUT_MS";
pub const DEFAULT_INFLIGHT_CAP: usize = 4;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, backoff_ms: 50 }
    }
}

enum Backend {
    /// In-process model. `whitebox` gates the capability downcast.
    Neural { model: Arc<LmModel>, vocab: Arc<Vocab>, whitebox: bool },
    Rule(RuleBasedResponder),
    Remote { url: String, bearer: Option<String> },
}

/// Chat-only access to a model, local or remote. This is the only surface
/// verification code sees: prompt in, text out. Gradients and token
/// probabilities exist solely behind [`ChatEndpoint::as_whitebox`], which
/// succeeds only for local endpoints explicitly flagged reference-capable.
pub struct ChatEndpoint {
    id: String,
    backend: Backend,
    template: ChatTemplate,
    timeout: Duration,
    retry: RetryPolicy,
    gate: Gate,
}

/// Successful chat plus how many attempts the retry loop used.
#[derive(Clone, Debug)]
pub struct ChatDetail {
    pub text: String,
    pub attempts: u32,
}

fn default_timeout() -> Duration {
    let ms = std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.parse::<u64>().ok())
        .unwrap_or(DEFAULT_TIMEOUT_MS);
    Duration::from_millis(ms)
}

impl ChatEndpoint {
    pub fn local(
        id: impl Into<String>,
        model: Arc<LmModel>,
        vocab: Arc<Vocab>,
        template: ChatTemplate,
        whitebox: bool,
    ) -> ChatEndpoint {
        ChatEndpoint {
            id: id.into(),
            backend: Backend::Neural { model, vocab, whitebox },
            template,
            timeout: default_timeout(),
            retry: RetryPolicy::default(),
            gate: Gate::new(DEFAULT_INFLIGHT_CAP),
        }
    }

    pub fn rule_based(
        id: impl Into<String>,
        responder: RuleBasedResponder,
        template: ChatTemplate,
    ) -> ChatEndpoint {
        ChatEndpoint {
            id: id.into(),
            backend: Backend::Rule(responder),
            template,
            timeout: default_timeout(),
            retry: RetryPolicy::default(),
            gate: Gate::new(DEFAULT_INFLIGHT_CAP),
        }
    }

    pub fn remote(
        id: impl Into<String>,
        url: impl Into<String>,
        template: ChatTemplate,
        bearer: Option<String>,
    ) -> ChatEndpoint {
        ChatEndpoint {
            id: id.into(),
            backend: Backend::Remote { url: url.into(), bearer },
            template,
            timeout: default_timeout(),
            retry: RetryPolicy::default(),
            gate: Gate::new(DEFAULT_INFLIGHT_CAP),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_inflight_cap(mut self, cap: usize) -> Self {
        self.gate = Gate::new(cap);
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn is_remote(&self) -> bool {
        matches!(self.backend, Backend::Remote { .. })
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn template(&self) -> &ChatTemplate {
        &self.template
    }

    /// Assistant text for a user message under the endpoint's default
    /// system prompt.
    pub fn chat(&self, user_text: &str, gen: &GenerationConfig) -> Result<String, ChatError> {
        self.chat_detailed(&self.template.system_prompt.clone(), user_text, gen)
            .map(|d| d.text)
    }

    /// As `chat` but with an overridden system prompt (used by the
    /// system-prompt robustness sweep).
    pub fn chat_with_system(
        &self,
        system: &str,
        user_text: &str,
        gen: &GenerationConfig,
    ) -> Result<String, ChatError> {
        self.chat_detailed(system, user_text, gen).map(|d| d.text)
    }

    pub fn chat_detailed(
        &self,
        system: &str,
        user_text: &str,
        gen: &GenerationConfig,
    ) -> Result<ChatDetail, ChatError> {
        let _slot = self.gate.acquire();
        match &self.backend {
            Backend::Neural { model, vocab, .. } => {
                let template = ChatTemplate::with_system(system);
                let text = generate(model, vocab, &template, user_text, gen)
                    .map_err(|e| ChatError::Generation(e.to_string()))?;
                Ok(ChatDetail { text, attempts: 1 })
            }
            Backend::Rule(responder) => {
                Ok(ChatDetail { text: responder.respond(user_text), attempts: 1 })
            }
            Backend::Remote { url, bearer } => {
                let req = ChatRequest {
                    system: system.to_string(),
                    user: user_text.to_string(),
                    temperature: gen.temperature,
                    top_p: gen.top_p,
                    max_new_tokens: gen.max_new_tokens,
                    seed: Some(gen.seed),
                };
                let mut attempt = 0u32;
                loop {
                    attempt += 1;
                    match post_chat(url, &req, self.timeout, bearer.as_deref()) {
                        Ok(text) => return Ok(ChatDetail { text, attempts: attempt }),
                        Err(e) if attempt < self.retry.max_attempts && retryable(&e) => {
                            std::thread::sleep(Duration::from_millis(
                                self.retry.backoff_ms * attempt as u64,
                            ));
                        }
                        Err(ChatError::TimedOut) => {
                            return Err(ChatError::Timeout { attempts: attempt })
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }

    /// Capability downcast to the underlying white-box model. Remote
    /// endpoints, rule-based responders and locals marked black-box-only
    /// all refuse.
    pub fn as_whitebox(&self) -> Result<(Arc<LmModel>, Arc<Vocab>), ChatError> {
        match &self.backend {
            Backend::Neural { model, vocab, whitebox: true } => {
                Ok((model.clone(), vocab.clone()))
            }
            Backend::Neural { whitebox: false, .. } => Err(ChatError::Capability(format!(
                "endpoint {:?} is local but marked black-box-only",
                self.id
            ))),
            Backend::Rule(_) => Err(ChatError::Capability(format!(
                "endpoint {:?} is a rule-based responder without weights",
                self.id
            ))),
            Backend::Remote { .. } => Err(ChatError::Capability(format!(
                "endpoint {:?} is remote; black-box access only",
                self.id
            ))),
        }
    }
}

fn retryable(e: &ChatError) -> bool {
    matches!(e, ChatError::TimedOut | ChatError::Io(_) | ChatError::Http { status: 500..=599, .. })
}

/// Counting semaphore bounding concurrent chat calls per endpoint.
struct Gate {
    state: Arc<(Mutex<usize>, Condvar)>,
    cap: usize,
}

impl Gate {
    fn new(cap: usize) -> Gate {
        Gate { state: Arc::new((Mutex::new(0), Condvar::new())), cap: cap.max(1) }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let (lock, cv) = &*self.state;
        let mut inflight = lock.lock().expect("gate lock");
        while *inflight >= self.cap {
            inflight = cv.wait(inflight).expect("gate wait");
        }
        *inflight += 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let (lock, cv) = &*self.gate.state;
        *lock.lock().expect("gate lock") -= 1;
        cv.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::http::{ChatHandler, ChatServer, HandlerError};
    use crate::rng::substream;
    use crate::zoo::LmConfig;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn tiny_local(whitebox: bool) -> ChatEndpoint {
        let vocab = Arc::new(Vocab::train(&["hello world you are a helpful assistant"], 16));
        let config = LmConfig {
            vocab_size: vocab.size(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context_len: 64,
            seed: 3,
        };
        let model = Arc::new(LmModel::init(config, &mut substream(3, "init")).unwrap());
        ChatEndpoint::local("local", model, vocab, ChatTemplate::default(), whitebox)
    }

    #[test]
    fn local_chat_delegates_to_generate() {
        let ep = tiny_local(true);
        let gen = GenerationConfig::greedy();
        let a = ep.chat("hello", &gen).unwrap();
        let b = ep.chat("hello", &gen).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn whitebox_downcast_rules() {
        assert!(tiny_local(true).as_whitebox().is_ok());
        let err = tiny_local(false).as_whitebox().unwrap_err();
        assert!(matches!(err, ChatError::Capability(_)));
        let rule = ChatEndpoint::rule_based(
            "rule",
            RuleBasedResponder::default(),
            ChatTemplate::default(),
        );
        assert!(matches!(rule.as_whitebox(), Err(ChatError::Capability(_))));
        let remote =
            ChatEndpoint::remote("r", "http://127.0.0.1:9", ChatTemplate::default(), None);
        assert!(matches!(remote.as_whitebox(), Err(ChatError::Capability(_))));
    }

    #[test]
    fn remote_round_trip_and_wire_decode() {
        let handler: Arc<ChatHandler> = Arc::new(|req: &ChatRequest| {
            assert_eq!(req.system, "sys prompt");
            Ok("314".to_string())
        });
        let server = ChatServer::spawn("127.0.0.1:0", handler, None).unwrap();
        let ep = ChatEndpoint::remote(
            "remote",
            server.url(),
            ChatTemplate::with_system("sys prompt"),
            None,
        );
        let text = ep.chat("give me a number", &GenerationConfig::default()).unwrap();
        assert_eq!(text, "314");
        server.shutdown();
    }

    #[test]
    fn times_out_twice_then_succeeds_with_retries_recorded() {
        // first two requests stall past the client timeout, the third answers
        let hits = Arc::new(AtomicU32::new(0));
        let h = hits.clone();
        let handler: Arc<ChatHandler> = Arc::new(move |_req: &ChatRequest| {
            if h.fetch_add(1, Ordering::SeqCst) < 2 {
                std::thread::sleep(Duration::from_millis(400));
            }
            Ok("finally".into())
        });
        let server = ChatServer::spawn("127.0.0.1:0", handler, None).unwrap();
        let ep = ChatEndpoint::remote("slow", server.url(), ChatTemplate::default(), None)
            .with_retry(RetryPolicy { max_attempts: 3, backoff_ms: 1 })
            .with_timeout(Duration::from_millis(100));
        let detail = ep.chat_detailed("sys", "x", &GenerationConfig::default()).unwrap();
        assert_eq!(detail.text, "finally");
        assert_eq!(detail.attempts, 3);
        server.shutdown();
    }

    #[test]
    fn server_errors_are_retried_until_exhausted() {
        let hits = Arc::new(AtomicU32::new(0));
        let h = hits.clone();
        let handler: Arc<ChatHandler> = Arc::new(move |_req: &ChatRequest| {
            h.fetch_add(1, Ordering::SeqCst);
            Err(HandlerError::internal("flaky"))
        });
        let server = ChatServer::spawn("127.0.0.1:0", handler, None).unwrap();
        let ep = ChatEndpoint::remote("flaky", server.url(), ChatTemplate::default(), None)
            .with_retry(RetryPolicy { max_attempts: 3, backoff_ms: 1 });
        let err = ep.chat("x", &GenerationConfig::default()).unwrap_err();
        assert!(matches!(err, ChatError::Http { status: 500, .. }), "{err:?}");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        server.shutdown();
    }

    #[test]
    fn dead_endpoint_fails_after_retries() {
        let dead = ChatEndpoint::remote("dead", "http://127.0.0.1:1", ChatTemplate::default(), None)
            .with_retry(RetryPolicy { max_attempts: 3, backoff_ms: 1 })
            .with_timeout(Duration::from_millis(200));
        let err = dead.chat("x", &GenerationConfig::default()).unwrap_err();
        assert!(matches!(err, ChatError::Io(_) | ChatError::Timeout { .. }), "{err:?}");
    }

    #[test]
    fn at_most_once_on_success() {
        let hits = Arc::new(AtomicU32::new(0));
        let h = hits.clone();
        let handler: Arc<ChatHandler> = Arc::new(move |_req: &ChatRequest| {
            h.fetch_add(1, Ordering::SeqCst);
            Ok("ok".into())
        });
        let server = ChatServer::spawn("127.0.0.1:0", handler, None).unwrap();
        let ep = ChatEndpoint::remote("remote", server.url(), ChatTemplate::default(), None)
            .with_retry(RetryPolicy { max_attempts: 5, backoff_ms: 1 });
        let detail = ep
            .chat_detailed("sys", "x", &GenerationConfig::default())
            .unwrap();
        assert_eq!(detail.attempts, 1);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        server.shutdown();
    }

    #[test]
    fn gate_bounds_inflight() {
        let gate = Gate::new(2);
        let a = gate.acquire();
        let _b = gate.acquire();
        drop(a);
        let _c = gate.acquire(); // would deadlock if the release were lost
    }
}
