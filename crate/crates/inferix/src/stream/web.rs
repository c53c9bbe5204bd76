//! Browser endpoint: WebSocket upgrades carry wire messages as binary frames,
//! plain GETs under `/console` serve the console's static files.

use std::io::{ErrorKind, Read, Write};
use std::net::TcpStream;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use inferix_core::wire::{Decoder, MessageKind};
use tungstenite::{Error as WsError, Message};

use super::server::{handle_incoming, next_or_report, Shared, LINGER, WRITE_TIMEOUT};

const MAX_HEAD: usize = 8192;
const READ_POLL: Duration = Duration::from_millis(5);

const PLACEHOLDER: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>inferix console</title></head>\n<body><p>Console assets are not installed. Start <code>inferix serve</code> with <code>--console-dir</code> pointing at a built console.</p></body></html>\n";

#[derive(Debug, PartialEq)]
struct RequestHead {
    method: String,
    path: String,
    upgrade: bool,
    len: usize,
}

fn parse_head(buf: &[u8]) -> Option<RequestHead> {
    let end = buf.windows(4).position(|w| w == b"\r\n\r\n")? + 4;
    let text = std::str::from_utf8(&buf[..end]).ok()?;
    let mut lines = text.split("\r\n");
    let mut first = lines.next()?.split(' ');
    let method = first.next()?.to_string();
    let path = first.next()?.to_string();
    let upgrade = lines.any(|l| {
        l.split_once(':')
            .is_some_and(|(k, v)| k.trim().eq_ignore_ascii_case("upgrade") && v.trim().eq_ignore_ascii_case("websocket"))
    });
    Some(RequestHead {
        method,
        path,
        upgrade,
        len: end,
    })
}

/// Peek (without consuming) until a full request head is buffered.
fn peek_head(s: &TcpStream) -> Option<RequestHead> {
    let mut buf = vec![0u8; MAX_HEAD];
    let t = Instant::now();
    while t.elapsed() < Duration::from_secs(5) {
        match s.peek(&mut buf) {
            Ok(0) => return None,
            Ok(n) => {
                if let Some(h) = parse_head(&buf[..n]) {
                    return Some(h);
                }
                if n == MAX_HEAD {
                    return None;
                }
                std::thread::sleep(READ_POLL);
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => return None,
        }
    }
    None
}

pub(super) fn serve_web(s: TcpStream, sh: Arc<Shared>) {
    let _ = s.set_read_timeout(Some(Duration::from_secs(1)));
    let Some(head) = peek_head(&s) else {
        return;
    };
    if head.upgrade {
        serve_socket(s, &sh);
    } else {
        serve_static(s, &head, sh.console_dir.as_deref());
    }
}

fn serve_socket(s: TcpStream, sh: &Shared) {
    let _ = s.set_read_timeout(None);
    let Ok(mut ws) = tungstenite::accept(s) else {
        return;
    };
    let _ = ws.get_ref().set_read_timeout(Some(READ_POLL));
    let _ = ws.get_ref().set_write_timeout(Some(WRITE_TIMEOUT));
    let hub = sh.hub.clone();
    let (id, q) = hub.add_client();
    let mut dec = Decoder::new();
    let mut in_sync = true;
    let mut ended: Option<Instant> = None;
    'conn: loop {
        while let Some(m) = q.try_pop() {
            if ws.send(Message::binary(m.bytes.as_ref().clone())).is_err() {
                break 'conn;
            }
            if m.kind == MessageKind::End {
                ended = Some(Instant::now());
                let _ = ws.close(None);
            }
        }
        if ended.is_some_and(|t| t.elapsed() > LINGER) || sh.stop.load(Ordering::SeqCst) {
            break;
        }
        match ws.read() {
            Ok(Message::Binary(b)) if in_sync => {
                dec.push(&b);
                while let Some(m) = next_or_report(&mut dec, &hub, id, &mut in_sync) {
                    handle_incoming(&hub, id, m);
                }
            }
            Ok(Message::Close(_)) if ended.is_none() => {
                let _ = ws.close(None);
            }
            Ok(_) => {}
            Err(WsError::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
    hub.remove_client(id);
}

fn content_type(p: &Path) -> &'static str {
    match p.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json" | "map") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("wasm") => "application/wasm",
        _ => "application/octet-stream",
    }
}

/// File under `root` for a `/console...` path; `None` for anything that
/// would leave `root`.
fn resolve(root: &Path, path: &str) -> Option<PathBuf> {
    let rel = path.split(['?', '#']).next()?.strip_prefix("/console")?;
    if !(rel.is_empty() || rel.starts_with('/')) {
        return None;
    }
    let rel = rel.trim_start_matches('/');
    let rel = if rel.is_empty() || rel.ends_with('/') {
        format!("{rel}index.html")
    } else {
        rel.to_string()
    };
    let rel = Path::new(&rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(root.join(rel))
}

fn respond(s: &mut TcpStream, status: &str, extra: &str, ctype: &str, body: &[u8]) {
    let head = format!(
        "HTTP/1.1 {status}\r\n{extra}Content-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    let _ = s.write_all(head.as_bytes());
    let _ = s.write_all(body);
    let _ = s.flush();
}

fn not_found(s: &mut TcpStream) {
    respond(s, "404 Not Found", "", "text/plain", b"not found\n");
}

fn serve_static(mut s: TcpStream, head: &RequestHead, root: Option<&Path>) {
    let mut consumed = vec![0u8; head.len];
    if s.read_exact(&mut consumed).is_err() {
        return;
    }
    if head.method != "GET" {
        respond(&mut s, "405 Method Not Allowed", "Allow: GET\r\n", "text/plain", b"method not allowed\n");
        return;
    }
    if head.path == "/" {
        respond(&mut s, "302 Found", "Location: /console/\r\n", "text/plain", b"");
        return;
    }
    let Some(file) = resolve(root.unwrap_or(Path::new("")), &head.path) else {
        return not_found(&mut s);
    };
    if root.is_some() && file.is_file() {
        match std::fs::read(&file) {
            Ok(body) => respond(&mut s, "200 OK", "", content_type(&file), &body),
            Err(_) => respond(&mut s, "500 Internal Server Error", "", "text/plain", b"read error\n"),
        }
    } else if file.file_name().is_some_and(|n| n == "index.html") {
        respond(&mut s, "200 OK", "", "text/html; charset=utf-8", PLACEHOLDER.as_bytes());
    } else {
        not_found(&mut s);
    }
}
