use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use inferix::stream::{Hub, ServeOptions, StreamError, StreamObserver, StreamServer};
use inferix_core::engine::{
    generate_sequence, DenseBackend, EngineEvent, EngineObserver, GeneratedBlock, GenerationRequest, ModelConfig,
    NullObserver, PromptUpdate, ToyModel,
};
use inferix_core::kv::KvStats;
use inferix_core::wire::{
    decode_raw, encode_message, Decoder, Hello, MessageKind, PromptUpdatePayload, StreamMessage, ERR_BAD_MESSAGE,
    ERR_INVALID_PROMPT, ERR_RETROACTIVE,
};
use tungstenite::Message;

const BLOCK_LEN: usize = 3;

fn model() -> ToyModel {
    ToyModel::build(ModelConfig {
        block_len: BLOCK_LEN,
        ..Default::default()
    })
    .unwrap()
}

fn hello(blocks: usize) -> Hello {
    Hello {
        width: 16,
        height: 16,
        frames_per_chunk: BLOCK_LEN as u16,
        num_chunks: blocks as u32,
        summary: "test".into(),
    }
}

fn request(blocks: usize) -> GenerationRequest {
    GenerationRequest::new(blocks, "a tram in the rain")
}

fn server(blocks: usize, web: bool) -> StreamServer {
    StreamServer::bind("127.0.0.1:0", web.then_some("127.0.0.1:0"), hello(blocks), ServeOptions::default()).unwrap()
}

/// Connect and read everything up to EOF on a background thread.
fn raw_reader(addr: SocketAddr) -> std::thread::JoinHandle<Vec<u8>> {
    let s = TcpStream::connect(addr).unwrap();
    std::thread::spawn(move || read_all(s))
}

fn read_all(mut s: TcpStream) -> Vec<u8> {
    s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    let mut buf = Vec::new();
    s.read_to_end(&mut buf).unwrap();
    buf
}

/// Split a byte stream into per-message byte strings.
fn split_messages(mut bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (_, _, used) = decode_raw(bytes).unwrap();
        out.push(bytes[..used].to_vec());
        bytes = &bytes[used..];
    }
    out
}

fn decode_all(bytes: &[u8]) -> Vec<StreamMessage> {
    let mut d = Decoder::new();
    d.push(bytes);
    let mut out = Vec::new();
    while let Some(m) = d.next_message().unwrap() {
        out.push(m);
    }
    assert_eq!(d.buffered(), 0);
    out
}

fn frames_of(msgs: &[StreamMessage]) -> Vec<(u32, u16, Vec<u8>)> {
    msgs.iter()
        .filter_map(|m| match m {
            StreamMessage::Frame(f) => Some((f.chunk_index, f.frame_index, f.pixels.clone())),
            _ => None,
        })
        .collect()
}

fn expected_frames(blocks: &[GeneratedBlock]) -> Vec<(u32, u16, Vec<u8>)> {
    blocks
        .iter()
        .flat_map(|b| {
            b.frames
                .iter()
                .enumerate()
                .map(|(i, f)| (b.chunk_index, i as u16, f.pixels.clone()))
        })
        .collect()
}

fn run(srv: &StreamServer, blocks: usize) -> Vec<GeneratedBlock> {
    let mut obs = StreamObserver::new(srv.hub());
    generate_sequence(&model(), &request(blocks), &DenseBackend, &mut obs).unwrap()
}

fn update_bytes(chunk: u32, text: &str) -> Vec<u8> {
    encode_message(&StreamMessage::PromptUpdate(PromptUpdatePayload {
        effective_chunk: chunk,
        text: text.into(),
    }))
    .unwrap()
}

fn wait_until(mut f: impl FnMut() -> bool) {
    let t = Instant::now();
    while !f() {
        assert!(t.elapsed() < Duration::from_secs(10), "timed out");
        std::thread::sleep(Duration::from_millis(2));
    }
}

#[test]
fn two_block_run_streams_in_order() {
    let srv = server(2, false);
    let client = raw_reader(srv.local_addr());
    assert!(srv.wait_for_clients(1, Duration::from_secs(5)));
    let p = inferix::profiler::Profiler::new(true);
    let blocks = {
        let mut obs = StreamObserver::new(srv.hub()).with_profiler(&p);
        generate_sequence(&model(), &request(2), &DenseBackend, &mut obs).unwrap()
    };
    srv.shutdown(Duration::from_secs(5));
    let msgs = decode_all(&client.join().unwrap());
    assert_eq!(msgs[0], StreamMessage::Hello(hello(2)));
    assert_eq!(msgs.last(), Some(&StreamMessage::End));
    let frames = frames_of(&msgs);
    assert_eq!(frames.len(), 2 * BLOCK_LEN);
    assert_eq!(frames, expected_frames(&blocks));
    let metrics: Vec<_> = msgs
        .iter()
        .filter_map(|m| match m {
            StreamMessage::Metrics(v) => Some(v),
            _ => None,
        })
        .collect();
    assert_eq!(metrics.len(), 2);
    let last = metrics[1];
    let get = |k: &str| last.iter().find(|(n, _)| n == k).map(|x| x.1);
    assert_eq!(get("chunk"), Some(1.0));
    assert!(get("kv.tokens").unwrap() > 0.0);
    assert_eq!(get("span.engine.block.count"), Some(2.0));
}

#[test]
fn future_update_changes_later_chunks_only() {
    let blocks = 5;
    let baseline = generate_sequence(&model(), &request(blocks), &DenseBackend, &mut NullObserver).unwrap();
    let srv = server(blocks, false);
    let mut s = TcpStream::connect(srv.local_addr()).unwrap();
    s.write_all(&update_bytes(3, "a tram in the snow")).unwrap();
    wait_until(|| srv.hub().mailbox().len() == 1);
    let client = std::thread::spawn(move || read_all(s));
    let (live, accepted) = {
        let mut obs = StreamObserver::new(srv.hub());
        let out = generate_sequence(&model(), &request(blocks), &DenseBackend, &mut obs).unwrap();
        (out, obs.accepted)
    };
    srv.shutdown(Duration::from_secs(5));
    assert_eq!(accepted.len(), 1);
    for c in 0..blocks {
        assert_eq!(live[c] == baseline[c], c < 3, "chunk {c}");
    }
    let mut planned = request(blocks);
    planned.prompt_schedule.push((3, "a tram in the snow".into()));
    let static_run = generate_sequence(&model(), &planned, &DenseBackend, &mut NullObserver).unwrap();
    assert_eq!(live, static_run);
    let msgs = decode_all(&client.join().unwrap());
    assert_eq!(frames_of(&msgs), expected_frames(&live));
    assert!(!msgs.iter().any(|m| matches!(m, StreamMessage::Error(_))));
}

/// Delegates to a [`StreamObserver`], but holds the block boundary before
/// `hold_before` until an update is waiting.
struct Gate<'a> {
    inner: StreamObserver<'a>,
    hub: &'a Hub,
    hold_before: u32,
    next: u32,
}

impl EngineObserver for Gate<'_> {
    fn poll_updates(&mut self) -> Vec<PromptUpdate> {
        if self.next == self.hold_before {
            wait_until(|| !self.hub.mailbox().is_empty());
        }
        self.inner.poll_updates()
    }
    fn update_resolved(&mut self, u: &PromptUpdate, accepted: bool) {
        self.inner.update_resolved(u, accepted);
    }
    fn event(&mut self, e: &EngineEvent) {
        self.inner.event(e);
    }
    fn block_started(&mut self, chunk: u32) {
        self.next = chunk + 1;
        self.inner.block_started(chunk);
    }
    fn block_done(&mut self, b: &GeneratedBlock, s: &KvStats) {
        self.inner.block_done(b, s);
    }
    fn complete(&mut self, n: usize) {
        self.inner.complete(n);
    }
}

/// Read until a FRAME of `chunk` arrives, send `update`, read to EOF.
fn respond_after_chunk(addr: SocketAddr, chunk: u32, update: Vec<u8>) -> std::thread::JoinHandle<Vec<StreamMessage>> {
    let mut s = TcpStream::connect(addr).unwrap();
    std::thread::spawn(move || {
        s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
        let mut dec = Decoder::new();
        let mut msgs = Vec::new();
        let mut sent = false;
        let mut buf = [0u8; 4096];
        loop {
            let n = s.read(&mut buf).unwrap();
            if n == 0 {
                break;
            }
            dec.push(&buf[..n]);
            while let Some(m) = dec.next_message().unwrap() {
                if !sent && matches!(&m, StreamMessage::Frame(f) if f.chunk_index == chunk) {
                    s.write_all(&update).unwrap();
                    sent = true;
                }
                msgs.push(m);
            }
        }
        msgs
    })
}

#[test]
fn retroactive_update_gets_error_and_stream_continues() {
    let blocks = 5;
    let srv = server(blocks, false);
    let sender = respond_after_chunk(srv.local_addr(), 2, update_bytes(1, "too late"));
    let bystander = raw_reader(srv.local_addr());
    assert!(srv.wait_for_clients(2, Duration::from_secs(5)));
    let (out, rejected) = {
        let mut g = Gate {
            inner: StreamObserver::new(srv.hub()),
            hub: srv.hub(),
            hold_before: 3,
            next: 0,
        };
        let out = generate_sequence(&model(), &request(blocks), &DenseBackend, &mut g).unwrap();
        (out, g.inner.rejected)
    };
    srv.shutdown(Duration::from_secs(5));
    assert_eq!(rejected.len(), 1);
    assert_eq!(out, generate_sequence(&model(), &request(blocks), &DenseBackend, &mut NullObserver).unwrap());

    let msgs = sender.join().unwrap();
    let err = msgs
        .iter()
        .find_map(|m| match m {
            StreamMessage::Error(e) => Some(e),
            _ => None,
        })
        .expect("ERROR for the sender");
    assert_eq!((err.code, err.chunk, err.message.as_str()), (ERR_RETROACTIVE, 1, "retroactive"));
    assert_eq!(frames_of(&msgs), expected_frames(&out));
    assert_eq!(msgs.last(), Some(&StreamMessage::End));

    let other = decode_all(&bystander.join().unwrap());
    assert!(!other.iter().any(|m| matches!(m, StreamMessage::Error(_))));
    assert_eq!(frames_of(&other), expected_frames(&out));
}

#[test]
fn empty_prompt_is_rejected_as_invalid() {
    let srv = server(4, false);
    let sender = respond_after_chunk(srv.local_addr(), 1, update_bytes(3, "  "));
    assert!(srv.wait_for_clients(1, Duration::from_secs(5)));
    {
        let mut g = Gate {
            inner: StreamObserver::new(srv.hub()),
            hub: srv.hub(),
            hold_before: 2,
            next: 0,
        };
        generate_sequence(&model(), &request(4), &DenseBackend, &mut g).unwrap();
    }
    srv.shutdown(Duration::from_secs(5));
    let msgs = sender.join().unwrap();
    assert!(msgs
        .iter()
        .any(|m| matches!(m, StreamMessage::Error(e) if e.code == ERR_INVALID_PROMPT && e.chunk == 3)));
    assert_eq!(msgs.last(), Some(&StreamMessage::End));
}

#[test]
fn garbage_from_client_is_reported_not_fatal() {
    let srv = server(2, false);
    let mut s = TcpStream::connect(srv.local_addr()).unwrap();
    // a valid frame with a broken crc, then bytes that are not a header at all
    let mut bad = update_bytes(1, "x");
    let n = bad.len();
    bad[n - 1] ^= 0xFF;
    s.write_all(&bad).unwrap();
    s.write_all(b"GET / HTTP/1.1\r\n\r\n").unwrap();
    assert!(srv.wait_for_clients(1, Duration::from_secs(5)));
    wait_until(|| srv.hub().client_count() == 1);
    std::thread::sleep(Duration::from_millis(100));
    let client = std::thread::spawn(move || read_all(s));
    let blocks = run(&srv, 2);
    srv.shutdown(Duration::from_secs(5));
    let msgs = decode_all(&client.join().unwrap());
    let errors = msgs
        .iter()
        .filter(|m| matches!(m, StreamMessage::Error(e) if e.code == ERR_BAD_MESSAGE))
        .count();
    assert!(errors >= 1);
    assert_eq!(frames_of(&msgs), expected_frames(&blocks));
    assert_eq!(msgs.last(), Some(&StreamMessage::End));
}

#[test]
fn no_clients_still_completes() {
    let srv = server(3, true);
    let t = Instant::now();
    let blocks = run(&srv, 3);
    assert_eq!(blocks.len(), 3);
    assert!(srv.hub().is_ended());
    srv.shutdown(Duration::from_secs(1));
    assert!(t.elapsed() < Duration::from_secs(10));
}

#[test]
fn late_client_gets_hello_and_end() {
    let srv = server(1, false);
    run(&srv, 1);
    let msgs = decode_all(&read_all(TcpStream::connect(srv.local_addr()).unwrap()));
    assert_eq!(msgs, vec![StreamMessage::Hello(hello(1)), StreamMessage::End]);
    srv.shutdown(Duration::from_secs(1));
}

#[test]
fn stalled_hub_client_drops_but_keeps_end() {
    let hub = Hub::new(hello(6), 4).unwrap();
    let (_, q) = hub.add_client();
    {
        let mut obs = StreamObserver::new(&hub);
        generate_sequence(&model(), &request(6), &DenseBackend, &mut obs).unwrap();
    }
    assert!(hub.dropped_messages() > 0);
    let mut kinds = Vec::new();
    while let Some(m) = q.try_pop() {
        kinds.push(m.kind);
    }
    // HELLO and END are never dropped
    assert!(kinds.len() <= 6, "{kinds:?}");
    assert_eq!(kinds.first(), Some(&MessageKind::Hello));
    assert_eq!(kinds.last(), Some(&MessageKind::End));
}

#[test]
fn unread_socket_never_stalls_generation() {
    // large frames so the socket buffers fill up quickly
    let cfg = ModelConfig {
        block_len: 8,
        frame_shape: (256, 256),
        ..Default::default()
    };
    let m = ToyModel::build(cfg).unwrap();
    let blocks = 24;
    let opts = ServeOptions {
        client_queue: 4,
        console_dir: None,
    };
    let srv = StreamServer::bind("127.0.0.1:0", None, hello(blocks), opts).unwrap();
    let idle = TcpStream::connect(srv.local_addr()).unwrap();
    assert!(srv.wait_for_clients(1, Duration::from_secs(5)));
    let t = Instant::now();
    {
        let mut obs = StreamObserver::new(srv.hub());
        generate_sequence(&m, &request(blocks), &DenseBackend, &mut obs).unwrap();
    }
    let gen_time = t.elapsed();
    assert!(srv.hub().dropped_messages() > 0);
    drop(idle);
    srv.shutdown(Duration::from_millis(200));
    assert!(gen_time < Duration::from_secs(20), "{gen_time:?}");
}

#[test]
fn bind_conflict_is_reported() {
    let srv = server(1, false);
    let addr = srv.local_addr().to_string();
    let err = StreamServer::bind(&addr, None, hello(1), ServeOptions::default()).err().unwrap();
    assert!(matches!(err, StreamError::Bind { .. }), "{err}");
    srv.shutdown(Duration::from_millis(100));
}

fn ws_connect(addr: SocketAddr) -> tungstenite::WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>> {
    let (ws, _) = tungstenite::connect(format!("ws://{addr}/stream")).unwrap();
    ws
}

fn ws_read_all(mut ws: tungstenite::WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>>) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    loop {
        match ws.read() {
            Ok(Message::Binary(b)) => out.push(b.to_vec()),
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    }
    out
}

#[test]
fn bridge_carries_identical_bytes() {
    let srv = server(2, true);
    let web = srv.web_addr().unwrap();
    let raw = raw_reader(srv.local_addr());
    let ws = ws_connect(web);
    let ws_client = std::thread::spawn(move || ws_read_all(ws));
    assert!(srv.wait_for_clients(2, Duration::from_secs(5)));
    let blocks = run(&srv, 2);
    srv.shutdown(Duration::from_secs(5));
    let raw_msgs = split_messages(&raw.join().unwrap());
    let ws_msgs = ws_client.join().unwrap();
    assert_eq!(raw_msgs, ws_msgs);
    let decoded: Vec<StreamMessage> = ws_msgs.iter().flat_map(|b| decode_all(b)).collect();
    assert_eq!(frames_of(&decoded), expected_frames(&blocks));
    assert_eq!(decoded.last(), Some(&StreamMessage::End));
}

#[test]
fn bridge_prompt_update_matches_raw_client() {
    let blocks = 4;
    let text = "a tram at sunrise";
    let run_with = |via_ws: bool| {
        let srv = server(blocks, true);
        let reader = if via_ws {
            let mut ws = ws_connect(srv.web_addr().unwrap());
            ws.send(Message::binary(update_bytes(2, text))).unwrap();
            std::thread::spawn(move || ws_read_all(ws).concat())
        } else {
            let mut s = TcpStream::connect(srv.local_addr()).unwrap();
            s.write_all(&update_bytes(2, text)).unwrap();
            std::thread::spawn(move || read_all(s))
        };
        wait_until(|| srv.hub().mailbox().len() == 1);
        let out = run(&srv, blocks);
        srv.shutdown(Duration::from_secs(5));
        (out, decode_all(&reader.join().unwrap()))
    };
    let (raw_out, raw_msgs) = run_with(false);
    let (ws_out, ws_msgs) = run_with(true);
    assert_eq!(raw_out, ws_out);
    assert_eq!(frames_of(&raw_msgs), frames_of(&ws_msgs));
    assert_eq!(ws_out[2].prompt_in_effect, text);
}

fn http_get(addr: SocketAddr, req: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(req.as_bytes()).unwrap();
    String::from_utf8_lossy(&read_all(s)).into_owned()
}

#[test]
fn console_static_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>console</html>").unwrap();
    std::fs::create_dir(dir.path().join("js")).unwrap();
    std::fs::write(dir.path().join("js/app.js"), "console.log(1)").unwrap();
    let opts = ServeOptions {
        console_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let srv = StreamServer::bind("127.0.0.1:0", Some("127.0.0.1:0"), hello(1), opts).unwrap();
    let web = srv.web_addr().unwrap();
    let get = |path: &str| http_get(web, &format!("GET {path} HTTP/1.1\r\nHost: x\r\n\r\n"));

    let index = get("/console/");
    assert!(index.starts_with("HTTP/1.1 200"), "{index}");
    assert!(index.contains("text/html") && index.ends_with("<html>console</html>"));
    let js = get("/console/js/app.js?v=1");
    assert!(js.starts_with("HTTP/1.1 200") && js.contains("text/javascript") && js.ends_with("console.log(1)"));
    assert!(get("/console/../Cargo.toml").starts_with("HTTP/1.1 404"));
    assert!(get("/console/missing.css").starts_with("HTTP/1.1 404"));
    let root = get("/");
    assert!(root.starts_with("HTTP/1.1 302") && root.contains("Location: /console/"));
    let post = http_get(web, "POST /console/ HTTP/1.1\r\nContent-Length: 0\r\n\r\n");
    assert!(post.starts_with("HTTP/1.1 405"));
    srv.shutdown(Duration::from_millis(100));

    // without assets the console path still answers
    let srv = server(1, true);
    let page = http_get(srv.web_addr().unwrap(), "GET /console HTTP/1.1\r\n\r\n");
    assert!(page.starts_with("HTTP/1.1 200") && page.contains("--console-dir"));
    srv.shutdown(Duration::from_millis(100));
}
