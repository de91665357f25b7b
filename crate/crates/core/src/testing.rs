//! In-process fake of an OpenAI-compatible server, for gateway tests.
//!
//! Serves `/chat/completions` and `/embeddings` on a loopback port, one
//! thread per connection with keep-alive. Responses can be scripted; every
//! request is recorded, and the number of requests being handled at once is
//! tracked so tests can check client-side concurrency bounds.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl RecordedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap_or(Value::Null)
    }
}

#[derive(Debug, Clone)]
struct Scripted {
    status: u16,
    body: String,
}

#[derive(Default)]
struct State {
    script: Mutex<VecDeque<Scripted>>,
    requests: Mutex<Vec<RecordedRequest>>,
    inflight: AtomicUsize,
    peak: AtomicUsize,
    delay: Mutex<Duration>,
    chat_reply: Mutex<String>,
}

pub struct FakeServer {
    addr: SocketAddr,
    state: Arc<State>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl FakeServer {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let addr = listener.local_addr().unwrap();
        let state = Arc::new(State::default());
        *state.chat_reply.lock().unwrap() = "ok".into();
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let (state, stop) = (state.clone(), stop.clone());
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let state = state.clone();
                    std::thread::spawn(move || serve(conn, &state));
                }
            })
        };
        FakeServer { addr, state, stop, accept: Some(accept) }
    }

    /// Base URL to use as a gateway endpoint.
    pub fn url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Time each request is held before answering.
    pub fn set_delay(&self, d: Duration) {
        *self.state.delay.lock().unwrap() = d;
    }

    pub fn set_chat_reply(&self, text: impl Into<String>) {
        *self.state.chat_reply.lock().unwrap() = text.into();
    }

    /// Queues a response served (once) in place of the default.
    pub fn push_response(&self, status: u16, body: impl Into<String>) {
        self.state.script.lock().unwrap().push_back(Scripted { status, body: body.into() });
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.requests.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.state.requests.lock().unwrap().len()
    }

    /// Highest number of requests handled at the same time.
    pub fn peak_inflight(&self) -> usize {
        self.state.peak.load(Ordering::SeqCst)
    }
}

impl Drop for FakeServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn read_request(reader: &mut BufReader<TcpStream>) -> Option<RecordedRequest> {
    let mut line = String::new();
    if reader.read_line(&mut line).ok()? == 0 {
        return None;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).ok()? == 0 {
            return None;
        }
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        headers.push((k.trim().to_string(), v.trim().to_string()));
    }
    let get = |name: &str| headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.clone());
    let mut body = Vec::new();
    if let Some(n) = get("content-length").and_then(|v| v.parse::<usize>().ok()) {
        body.resize(n, 0);
        reader.read_exact(&mut body).ok()?;
    } else if get("transfer-encoding").is_some_and(|v| v.eq_ignore_ascii_case("chunked")) {
        loop {
            let mut size = String::new();
            reader.read_line(&mut size).ok()?;
            let n = usize::from_str_radix(size.trim().split(';').next()?, 16).ok()?;
            let mut chunk = vec![0; n + 2];
            reader.read_exact(&mut chunk).ok()?;
            if n == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..n]);
        }
    }
    Some(RecordedRequest { method, path, headers, body: String::from_utf8_lossy(&body).into_owned() })
}

fn default_response(state: &State, req: &RecordedRequest) -> Scripted {
    let body = req.json();
    if req.path.ends_with("/embeddings") {
        let inputs = body.get("input").and_then(Value::as_array).cloned().unwrap_or_default();
        let data: Vec<Value> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let len = t.as_str().map_or(0, str::len) as f64;
                json!({"index": i, "embedding": [1.0, len, (i + 1) as f64, 0.5]})
            })
            .collect();
        return Scripted { status: 200, body: json!({"data": data, "usage": {"total_tokens": inputs.len()}}).to_string() };
    }
    if req.path.ends_with("/chat/completions") {
        let reply = state.chat_reply.lock().unwrap().clone();
        return Scripted {
            status: 200,
            body: json!({
                "choices": [{"index": 0, "message": {"role": "assistant", "content": reply}}],
                "usage": {"total_tokens": 7}
            })
            .to_string(),
        };
    }
    Scripted { status: 404, body: "{\"error\":\"not found\"}".into() }
}

fn serve(conn: TcpStream, state: &State) {
    let Ok(write_half) = conn.try_clone() else { return };
    let mut writer = write_half;
    let mut reader = BufReader::new(conn);
    while let Some(req) = read_request(&mut reader) {
        let now = state.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        state.peak.fetch_max(now, Ordering::SeqCst);
        state.requests.lock().unwrap().push(req.clone());
        let delay = *state.delay.lock().unwrap();
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        let resp = state
            .script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| default_response(state, &req));
        state.inflight.fetch_sub(1, Ordering::SeqCst);
        let head = format!(
            "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: keep-alive\r\n\r\n",
            resp.status,
            resp.body.len()
        );
        if writer.write_all(head.as_bytes()).and_then(|_| writer.write_all(resp.body.as_bytes())).is_err() {
            return;
        }
        let _ = writer.flush();
    }
}
