//! In-process chat-completions endpoint for exercising the remote client.
//!
//! The server answers each request by filling the `<>` slots of the target
//! block at the end of the prompt, producing distinct but well-formed
//! completions per sample index.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Value};

#[derive(Debug, Clone, Default)]
pub struct MockConfig {
    /// Time each request is held open before replying.
    pub latency: Duration,
    /// The first this-many requests are answered with HTTP 429.
    pub throttle_first: usize,
    /// Sample indices whose completion lacks the explanations section.
    pub malformed_samples: Vec<usize>,
}

#[derive(Debug, Default)]
struct State {
    requests: AtomicUsize,
    throttled: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    bodies: Mutex<Vec<Value>>,
    auth: Mutex<Vec<Option<String>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockStats {
    pub requests: usize,
    pub throttled: usize,
    pub max_in_flight: usize,
    /// Request bodies of non-throttled requests, in arrival order.
    pub bodies: Vec<Value>,
    pub auth_headers: Vec<Option<String>>,
}

pub struct MockServer {
    addr: SocketAddr,
    state: Arc<State>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(config: MockConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let state = Arc::new(State::default());
        let stop = Arc::new(AtomicBool::new(false));
        let config = Arc::new(config);
        let handle = {
            let (state, stop) = (state.clone(), stop.clone());
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let (state, config) = (state.clone(), config.clone());
                    thread::spawn(move || {
                        let _ = serve(stream, &state, &config);
                    });
                }
            })
        };
        Ok(Self {
            addr,
            state,
            stop,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    pub fn stats(&self) -> MockStats {
        MockStats {
            requests: self.state.requests.load(Ordering::SeqCst),
            throttled: self.state.throttled.load(Ordering::SeqCst),
            max_in_flight: self.state.max_in_flight.load(Ordering::SeqCst),
            bodies: self.state.bodies.lock().expect("lock").clone(),
            auth_headers: self.state.auth.lock().expect("lock").clone(),
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, state: &State, config: &MockConfig) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut content_length = 0usize;
    let mut auth = None;
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.is_empty() {
        return Ok(());
    }
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 || line.trim().is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            match name.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = value.trim().parse().unwrap_or(0),
                "authorization" => auth = Some(value.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let index = state.requests.fetch_add(1, Ordering::SeqCst);
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(now, Ordering::SeqCst);
    thread::sleep(config.latency);

    let (status, reply) = if index < config.throttle_first {
        state.throttled.fetch_add(1, Ordering::SeqCst);
        (429, json!({"error": {"message": "rate limited"}}))
    } else {
        match serde_json::from_slice::<Value>(&body) {
            Ok(request) => {
                let reply = completion(&request, config);
                state.bodies.lock().expect("lock").push(request);
                state.auth.lock().expect("lock").push(auth);
                (200, reply)
            }
            Err(e) => (400, json!({"error": {"message": e.to_string()}})),
        }
    };
    state.in_flight.fetch_sub(1, Ordering::SeqCst);

    let payload = reply.to_string();
    let reason = match status {
        200 => "OK",
        429 => "Too Many Requests",
        _ => "Bad Request",
    };
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    stream.flush()
}

fn completion(request: &Value, config: &MockConfig) -> Value {
    let prompt = request["messages"]
        .as_array()
        .and_then(|m| m.last())
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default();
    let n = request["n"].as_u64().unwrap_or(1) as usize;
    let choices: Vec<Value> = (0..n)
        .map(|k| {
            let content = if config.malformed_samples.contains(&k) {
                "Key Information: the explanations were cut off".to_string()
            } else {
                fill_slots(prompt, k)
            };
            json!({
                "index": k,
                "message": {"role": "assistant", "content": content},
                "finish_reason": "stop",
            })
        })
        .collect();
    json!({"object": "chat.completion", "choices": choices})
}

/// Answers the final prompt block: keeps its key-information and explanation
/// lines, with every `<>` slot replaced by sample-specific text.
pub fn fill_slots(prompt: &str, sample: usize) -> String {
    let target = prompt.rsplit("\n###\n").next().unwrap_or(prompt);
    let start = target.find("Key Information:").unwrap_or(target.len());
    let mut out = Vec::new();
    for line in target[start..].lines() {
        let filled = if line.starts_with("Key Information:") {
            line.replace("<>", &format!("Variant {sample} of the key point."))
        } else {
            let label = line.trim_start_matches("Explanations: ").chars().next().unwrap_or('?');
            line.replace("<>", &format!("reason {sample} about option {label}."))
        };
        out.push(filled);
    }
    out.join("\n")
}
