//! Minimal scripted HTTP stub for exercising the remote backend.
//!
//! Serves an OpenAI-style chat-completion body. A status script, when given,
//! is consumed one response per request (then 200s); each request can also be
//! delayed to make concurrency observable.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

pub struct StubServer {
    addr: std::net::SocketAddr,
    current: Arc<AtomicUsize>,
    max_seen: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
}

impl StubServer {
    pub fn start(status_script: Vec<u16>, delay: Duration) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = listener.local_addr().unwrap();
        let script = Arc::new(Mutex::new(std::collections::VecDeque::from(status_script)));
        let current = Arc::new(AtomicUsize::new(0));
        let max_seen = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));

        let (current_l, max_l, stop_l) = (current.clone(), max_seen.clone(), stop.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop_l.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let script = script.clone();
                let current = current_l.clone();
                let max_seen = max_l.clone();
                std::thread::spawn(move || {
                    handle(stream, &script, &current, &max_seen, delay);
                });
            }
        });
        StubServer {
            addr,
            current,
            max_seen,
            stop,
        }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn max_concurrent(&self) -> usize {
        self.max_seen.load(Ordering::SeqCst)
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        // Nudge the accept loop so it observes the stop flag.
        let _ = TcpStream::connect(self.addr);
        let _ = self.current;
    }
}

fn handle(
    mut stream: TcpStream,
    script: &Mutex<std::collections::VecDeque<u16>>,
    current: &AtomicUsize,
    max_seen: &AtomicUsize,
    delay: Duration,
) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
    if read_request(&mut stream).is_none() {
        return;
    }

    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
    max_seen.fetch_max(now, Ordering::SeqCst);
    if !delay.is_zero() {
        std::thread::sleep(delay);
    }
    let status = script.lock().unwrap().pop_front().unwrap_or(200);
    current.fetch_sub(1, Ordering::SeqCst);

    let (reason, body) = match status {
        200 => (
            "OK",
            r#"{"choices":[{"message":{"role":"assistant","content":"pong"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#,
        ),
        429 => ("Too Many Requests", r#"{"error":{"message":"rate limited"}}"#),
        400 => ("Bad Request", r#"{"error":{"message":"bad request"}}"#),
        _ => ("Error", r#"{"error":{"message":"scripted failure"}}"#),
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(response.as_bytes());
    let _ = stream.flush();
}

/// Read one HTTP request (headers + content-length body). None on error.
fn read_request(stream: &mut TcpStream) -> Option<Vec<u8>> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        match stream.read(&mut chunk) {
            Ok(0) => return None,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(_) => return None,
        }
        if let Some(pos) = find_subslice(&buf, b"\r\n\r\n") {
            break pos + 4;
        }
        if buf.len() > 1 << 20 {
            return None;
        }
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_lowercase();
    let content_length: usize = headers
        .lines()
        .find_map(|line| line.strip_prefix("content-length:"))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0);
    while buf.len() < header_end + content_length {
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(_) => return None,
        }
    }
    Some(buf)
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|window| window == needle)
}
