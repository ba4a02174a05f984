use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ChatError;

/// Wire request for POST /v1/chat.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChatResponseBody {
    pub text: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub const CHAT_PATH: &str = "/v1/chat";

/// Split "http://host:port/..." into (authority, path).
fn parse_url(url: &str) -> Result<(String, String), ChatError> {
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| ChatError::Malformed(format!("unsupported url {url:?}")))?;
    let (authority, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, "/"),
    };
    if authority.is_empty() {
        return Err(ChatError::Malformed(format!("empty host in {url:?}")));
    }
    Ok((authority.to_string(), path.to_string()))
}

/// One blocking POST of the chat request; no retries at this layer.
pub fn post_chat(
    base_url: &str,
    req: &ChatRequest,
    timeout: Duration,
    bearer: Option<&str>,
) -> Result<String, ChatError> {
    let (authority, mut path) = parse_url(base_url)?;
    if !path.ends_with(CHAT_PATH) {
        path = format!("{}{}", path.trim_end_matches('/'), CHAT_PATH);
    }
    let addr: SocketAddr = authority
        .to_socket_addrs()
        .map_err(|e| ChatError::Io(format!("resolve {authority}: {e}")))?
        .next()
        .ok_or_else(|| ChatError::Io(format!("no address for {authority}")))?;
    let stream = TcpStream::connect_timeout(&addr, timeout)
        .map_err(|e| io_to_chat_err(e, "connect"))?;
    stream.set_read_timeout(Some(timeout)).map_err(|e| ChatError::Io(e.to_string()))?;
    stream.set_write_timeout(Some(timeout)).map_err(|e| ChatError::Io(e.to_string()))?;

    let body = serde_json::to_string(req).expect("request serializes");
    let mut head = format!(
        "POST {path} HTTP/1.1\r\nHost: {authority}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
        body.len()
    );
    if let Some(token) = bearer {
        head.push_str(&format!("Authorization: Bearer {token}\r\n"));
    }
    head.push_str("\r\n");

    let mut stream = stream;
    stream
        .write_all(head.as_bytes())
        .and_then(|_| stream.write_all(body.as_bytes()))
        .map_err(|e| io_to_chat_err(e, "write"))?;

    let mut reader = BufReader::new(stream);
    let (status, response_body) = read_http_message(&mut reader)?;
    if status != 200 {
        let excerpt: String = response_body.chars().take(200).collect();
        return Err(ChatError::Http { status, body: excerpt });
    }
    let parsed: ChatResponseBody = serde_json::from_str(&response_body)
        .map_err(|e| ChatError::Malformed(format!("bad response body: {e}")))?;
    Ok(parsed.text)
}

fn io_to_chat_err(e: std::io::Error, stage: &str) -> ChatError {
    match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => ChatError::TimedOut,
        _ => ChatError::Io(format!("{stage}: {e}")),
    }
}

/// Reads status line, headers and a Content-Length body.
fn read_http_message<R: BufRead>(reader: &mut R) -> Result<(u16, String), ChatError> {
    let mut status_line = String::new();
    reader
        .read_line(&mut status_line)
        .map_err(|e| io_to_chat_err(e, "read status"))?;
    if status_line.is_empty() {
        return Err(ChatError::Io("connection closed before status line".into()));
    }
    let status: u16 = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ChatError::Malformed(format!("bad status line {status_line:?}")))?;
    let mut content_length: Option<usize> = None;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| io_to_chat_err(e, "read header"))?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().ok();
            }
        }
    }
    let len = content_length
        .ok_or_else(|| ChatError::Malformed("missing content-length".into()))?;
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).map_err(|e| io_to_chat_err(e, "read body"))?;
    String::from_utf8(body)
        .map(|b| (status, b))
        .map_err(|e| ChatError::Malformed(format!("non-utf8 body: {e}")))
}

/// Error a handler can surface: an HTTP status plus the `{error}` body.
#[derive(Clone, Debug)]
pub struct HandlerError {
    pub status: u16,
    pub message: String,
}

impl HandlerError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        HandlerError { status: 400, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        HandlerError { status: 500, message: message.into() }
    }
}

/// Handler invoked per chat request.
pub type ChatHandler = dyn Fn(&ChatRequest) -> Result<String, HandlerError> + Send + Sync;

/// Tiny blocking HTTP server speaking only POST /v1/chat. Used by the
/// bundled serve command and by hermetic end-to-end tests.
pub struct ChatServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl ChatServer {
    /// Binds (use port 0 for an ephemeral port) and serves until shutdown.
    pub fn spawn(
        bind: &str,
        handler: Arc<ChatHandler>,
        bearer: Option<String>,
    ) -> Result<ChatServer, ChatError> {
        let listener = TcpListener::bind(bind).map_err(|e| ChatError::Io(e.to_string()))?;
        let addr = listener.local_addr().map_err(|e| ChatError::Io(e.to_string()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let handler = handler.clone();
                let bearer = bearer.clone();
                std::thread::spawn(move || {
                    let _ = handle_connection(stream, &handler, bearer.as_deref());
                });
            }
        });
        Ok(ChatServer { addr, stop, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // poke the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ChatServer {
    fn drop(&mut self) {
        if self.handle.is_some() {
            self.stop_inner();
        }
    }
}

fn handle_connection(
    stream: TcpStream,
    handler: &Arc<ChatHandler>,
    bearer: Option<&str>,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(60)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    if request_line.trim().is_empty() {
        return Ok(()); // shutdown poke
    }
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();

    let mut content_length = 0usize;
    let mut auth: Option<String> = None;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            } else if name.eq_ignore_ascii_case("authorization") {
                auth = Some(value.trim().to_string());
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let mut stream = stream;

    if method != "POST" || path != CHAT_PATH {
        return write_error(&mut stream, 404, "not found");
    }
    if let Some(expected) = bearer {
        if auth.as_deref() != Some(&format!("Bearer {expected}")) {
            return write_error(&mut stream, 401, "missing or invalid bearer token");
        }
    }
    let req: ChatRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return write_error(&mut stream, 400, &format!("bad request: {e}")),
    };
    match handler(&req) {
        Ok(text) => {
            let body = serde_json::to_string(&ChatResponseBody { text }).expect("serializes");
            write_response(&mut stream, 200, "OK", &body)
        }
        Err(e) => write_error(&mut stream, e.status, &e.message),
    }
}

fn write_error(stream: &mut TcpStream, status: u16, message: &str) -> std::io::Result<()> {
    let body = serde_json::to_string(&ErrorBody { error: message.to_string() })
        .expect("error body serializes");
    let reason = match status {
        400 => "Bad Request",
        401 => "Unauthorized",
        404 => "Not Found",
        500 => "Internal Server Error",
        _ => "Error",
    };
    write_response(stream, status, reason, &body)
}

fn write_response(
    stream: &mut TcpStream,
    status: u16,
    reason: &str,
    body: &str,
) -> std::io::Result<()> {
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(body.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn echo_server() -> ChatServer {
        let handler: Arc<ChatHandler> =
            Arc::new(|req: &ChatRequest| Ok(format!("echo:{}", req.user)));
        ChatServer::spawn("127.0.0.1:0", handler, None).unwrap()
    }

    #[test]
    fn handler_500_is_surfaced() {
        let handler: Arc<ChatHandler> =
            Arc::new(|_req: &ChatRequest| Err(HandlerError::internal("boom")));
        let server = ChatServer::spawn("127.0.0.1:0", handler, None).unwrap();
        let err = post_chat(&server.url(), &request("x"), Duration::from_secs(5), None)
            .unwrap_err();
        assert!(matches!(err, ChatError::Http { status: 500, .. }));
        server.shutdown();
    }

    fn request(user: &str) -> ChatRequest {
        ChatRequest {
            system: "sys".into(),
            user: user.into(),
            temperature: 0.0,
            top_p: 1.0,
            max_new_tokens: 8,
            seed: Some(1),
        }
    }

    #[test]
    fn round_trip_post() {
        let server = echo_server();
        let text =
            post_chat(&server.url(), &request("314"), Duration::from_secs(5), None).unwrap();
        assert_eq!(text, "echo:314");
        server.shutdown();
    }

    #[test]
    fn handler_error_surfaces_status_and_body() {
        let handler: Arc<ChatHandler> =
            Arc::new(|_req: &ChatRequest| Err(HandlerError::bad_request("nope")));
        let server = ChatServer::spawn("127.0.0.1:0", handler, None).unwrap();
        let err = post_chat(&server.url(), &request("x"), Duration::from_secs(5), None)
            .unwrap_err();
        match err {
            ChatError::Http { status, body } => {
                assert_eq!(status, 400);
                assert!(body.contains("nope"));
            }
            other => panic!("unexpected error {other:?}"),
        }
        server.shutdown();
    }

    #[test]
    fn bearer_required_when_configured() {
        let handler: Arc<ChatHandler> = Arc::new(|_req: &ChatRequest| Ok("ok".into()));
        let server =
            ChatServer::spawn("127.0.0.1:0", handler, Some("secret".into())).unwrap();
        let err =
            post_chat(&server.url(), &request("x"), Duration::from_secs(5), None).unwrap_err();
        assert!(matches!(err, ChatError::Http { status: 401, .. }));
        let ok = post_chat(&server.url(), &request("x"), Duration::from_secs(5), Some("secret"));
        assert_eq!(ok.unwrap(), "ok");
        server.shutdown();
    }

    #[test]
    fn each_request_hits_handler_once() {
        let count = Arc::new(AtomicU32::new(0));
        let c = count.clone();
        let handler: Arc<ChatHandler> = Arc::new(move |_req: &ChatRequest| {
            c.fetch_add(1, Ordering::SeqCst);
            Ok("hi".into())
        });
        let server = ChatServer::spawn("127.0.0.1:0", handler, None).unwrap();
        for _ in 0..3 {
            post_chat(&server.url(), &request("x"), Duration::from_secs(5), None).unwrap();
        }
        assert_eq!(count.load(Ordering::SeqCst), 3);
        server.shutdown();
    }

    #[test]
    fn url_parser() {
        assert!(parse_url("https://x").is_err());
        let (a, p) = parse_url("http://127.0.0.1:80").unwrap();
        assert_eq!((a.as_str(), p.as_str()), ("127.0.0.1:80", "/"));
        let (a, p) = parse_url("http://h:1/v1/chat").unwrap();
        assert_eq!((a.as_str(), p.as_str()), ("h:1", "/v1/chat"));
    }
}
