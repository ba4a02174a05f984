//! Uniform chat-only interface over local zoo models and remote HTTP chat
//! endpoints. Verification code goes through [`ChatEndpoint`], which never
//! exposes gradients or token probabilities; white-box access requires an
//! explicit capability downcast that only reference-capable local endpoints
//! grant.

mod endpoint;
mod http;

pub use endpoint::{
    ChatDetail, ChatEndpoint, RetryPolicy, DEFAULT_INFLIGHT_CAP, DEFAULT_TIMEOUT_MS, TIMEOUT_ENV,
};
pub use http::{
    post_chat, ChatHandler, ChatRequest, ChatResponseBody, ChatServer, ErrorBody, HandlerError,
    CHAT_PATH,
};

use std::sync::Arc;

use thiserror::Error;

use crate::tokenizer::Vocab;
use crate::zoo::{generate, ChatTemplate, GenerationConfig, LmModel};

#[derive(Error, Debug)]
pub enum ChatError {
    #[error("request timed out")]
    TimedOut,
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("transport: {0}")]
    Io(String),
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("capability: {0}")]
    Capability(String),
    #[error("generation failed: {0}")]
    Generation(String),
}

/// Serves one local model over the chat wire protocol, so remote
/// verification tests need no external service. The request's system prompt
/// and sampling settings are applied server-side.
pub fn serve_model(
    bind: &str,
    model: Arc<LmModel>,
    vocab: Arc<Vocab>,
    bearer: Option<String>,
) -> Result<ChatServer, ChatError> {
    let handler: Arc<ChatHandler> = Arc::new(move |req: &ChatRequest| {
        let template = ChatTemplate::with_system(&req.system);
        let gen = GenerationConfig {
            temperature: req.temperature,
            top_p: req.top_p,
            max_new_tokens: req.max_new_tokens,
            seed: req.seed.unwrap_or(0),
        };
        generate(&model, &vocab, &template, &req.user, &gen)
            .map_err(|e| HandlerError::bad_request(e.to_string()))
    });
    ChatServer::spawn(bind, handler, bearer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::zoo::LmConfig;

    #[test]
    fn served_model_matches_local_generation() {
        let vocab = Arc::new(Vocab::train(&["a tiny corpus for a tiny server model"], 16));
        let config = LmConfig {
            vocab_size: vocab.size(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context_len: 64,
            seed: 8,
        };
        let model = Arc::new(LmModel::init(config, &mut substream(8, "init")).unwrap());
        let server = serve_model("127.0.0.1:0", model.clone(), vocab.clone(), None).unwrap();

        let remote = ChatEndpoint::remote("remote", server.url(), ChatTemplate::default(), None);
        let gen = GenerationConfig::greedy().with_seed(7);
        let via_http = remote.chat("tiny corpus", &gen).unwrap();
        let direct =
            generate(&model, &vocab, &ChatTemplate::default(), "tiny corpus", &gen).unwrap();
        assert_eq!(via_http, direct);
        server.shutdown();
    }
}
