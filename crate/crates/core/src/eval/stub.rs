//! A tiny local chat-completions server for tests and dry runs.
//!
//! It understands just enough HTTP/1.1 to answer `POST .../chat/completions`
//! with a reply computed from the user message.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct StubReply {
    pub text: String,
    pub completion_tokens: u64,
    pub reasoning_tokens: Option<u64>,
}

impl StubReply {
    /// Reply whose token count is its whitespace-separated word count.
    pub fn text(text: impl Into<String>) -> Self {
        let text = text.into();
        let completion_tokens = text.split_whitespace().count() as u64;
        StubReply {
            text,
            completion_tokens,
            reasoning_tokens: None,
        }
    }
}

/// Fault injection knobs.
#[derive(Debug, Clone, Default)]
pub struct Faults {
    /// The first `fail_first` requests are answered with `fail_status`.
    pub fail_first: usize,
    pub fail_status: u16,
    /// Sleep before every reply.
    pub delay: Duration,
}

type Handler = dyn Fn(&str) -> StubReply + Send + Sync;

pub struct StubServer {
    addr: SocketAddr,
    requests: Arc<AtomicUsize>,
    shutdown: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start<F>(handler: F) -> io::Result<Self>
    where
        F: Fn(&str) -> StubReply + Send + Sync + 'static,
    {
        Self::with_faults(handler, Faults::default())
    }

    pub fn with_faults<F>(handler: F, faults: Faults) -> io::Result<Self>
    where
        F: Fn(&str) -> StubReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let requests = Arc::new(AtomicUsize::new(0));
        let shutdown = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let faults = Arc::new(faults);
        let accept = {
            let requests = Arc::clone(&requests);
            let shutdown = Arc::clone(&shutdown);
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let handler = Arc::clone(&handler);
                    let requests = Arc::clone(&requests);
                    let faults = Arc::clone(&faults);
                    thread::spawn(move || {
                        if let Err(e) = serve(stream, &*handler, &requests, &faults) {
                            log::debug!("stub connection error: {e}");
                        }
                    });
                }
            })
        };
        Ok(StubServer {
            addr,
            requests,
            shutdown,
            accept: Some(accept),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Number of chat requests received so far, failed ones included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, handler: &Handler, requests: &AtomicUsize, faults: &Faults) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or("");
    let path = parts.next().unwrap_or("");
    let mut out = stream;
    if method != "POST" || !path.ends_with("/chat/completions") {
        return respond(&mut out, 404, &json!({"error": "not found"}));
    }
    let n = requests.fetch_add(1, Ordering::SeqCst);
    if !faults.delay.is_zero() {
        thread::sleep(faults.delay);
    }
    if n < faults.fail_first {
        return respond(&mut out, faults.fail_status, &json!({"error": "injected fault"}));
    }
    let request: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return respond(&mut out, 400, &json!({"error": e.to_string()})),
    };
    let prompt = request
        .pointer("/messages/0/content")
        .and_then(Value::as_str)
        .unwrap_or("");
    let reply = handler(prompt);
    let mut usage = json!({"completion_tokens": reply.completion_tokens});
    if let Some(r) = reply.reasoning_tokens {
        usage["completion_tokens_details"] = json!({"reasoning_tokens": r});
    }
    let response = json!({
        "object": "chat.completion",
        "model": request.get("model").cloned().unwrap_or(Value::Null),
        "choices": [{"index": 0, "message": {"role": "assistant", "content": reply.text}, "finish_reason": "stop"}],
        "usage": usage,
    });
    respond(&mut out, 200, &response)
}

fn respond(out: &mut TcpStream, status: u16, body: &Value) -> io::Result<()> {
    let body = body.to_string();
    write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    out.flush()
}
