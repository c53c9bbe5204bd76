//! Streaming server: framed wire messages over TCP, the same messages over a
//! WebSocket bridge, and prompt updates flowing back into the engine.
//!
//! The engine thread only ever pushes encoded messages into per-client
//! queues ([`Hub::broadcast`]); socket I/O happens on per-client threads.

mod server;
mod web;

pub use server::{StreamServer, ServeOptions};

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use inferix_core::engine::{EngineEvent, EngineObserver, GeneratedBlock, PromptUpdate};
use inferix_core::kv::KvStats;
use inferix_core::wire::{
    encode_message, ErrorPayload, FramePayload, Hello, MessageKind, StreamMessage, ERR_INVALID_PROMPT,
    ERR_RETROACTIVE,
};

use crate::profiler::{Profiler, ReportFormat, SpanGuard};

pub const DEFAULT_CLIENT_QUEUE: usize = 256;

pub type ClientId = u64;

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("client queue capacity must be >= 1")]
    QueueSize,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Clone)]
pub struct Outgoing {
    pub kind: MessageKind,
    pub bytes: Arc<Vec<u8>>,
}

impl Outgoing {
    pub fn encode(msg: &StreamMessage) -> Self {
        Self {
            kind: msg.kind(),
            bytes: Arc::new(encode_message(msg).expect("server messages are within protocol limits")),
        }
    }

    fn droppable(&self) -> bool {
        matches!(self.kind, MessageKind::Frame | MessageKind::Metrics)
    }
}

#[derive(Debug, Default)]
struct QueueState {
    items: VecDeque<Outgoing>,
    closed: bool,
}

/// Bounded per-client queue. When full, the oldest FRAME or METRICS message
/// is dropped; END, ERROR and HELLO are never dropped.
#[derive(Debug)]
pub struct ClientQueue {
    state: Mutex<QueueState>,
    cv: Condvar,
    cap: usize,
    dropped: AtomicU64,
}

impl ClientQueue {
    pub fn new(cap: usize) -> Self {
        Self {
            state: Mutex::new(QueueState::default()),
            cv: Condvar::new(),
            cap: cap.max(1),
            dropped: AtomicU64::new(0),
        }
    }

    pub fn push(&self, m: Outgoing) {
        let mut st = lock(&self.state);
        if st.closed {
            return;
        }
        if st.items.len() >= self.cap {
            if let Some(pos) = st.items.iter().position(Outgoing::droppable) {
                st.items.remove(pos);
                self.dropped.fetch_add(1, Ordering::Relaxed);
            } else if m.droppable() {
                self.dropped.fetch_add(1, Ordering::Relaxed);
                return;
            }
        }
        st.items.push_back(m);
        drop(st);
        self.cv.notify_one();
    }

    pub fn try_pop(&self) -> Option<Outgoing> {
        lock(&self.state).items.pop_front()
    }

    /// `None` on timeout or when closed and drained.
    pub fn pop_wait(&self, timeout: Duration) -> Option<Outgoing> {
        let st = lock(&self.state);
        let (mut st, _) = self
            .cv
            .wait_timeout_while(st, timeout, |s| s.items.is_empty() && !s.closed)
            .unwrap_or_else(|e| e.into_inner());
        st.items.pop_front()
    }

    pub fn len(&self) -> usize {
        lock(&self.state).items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn close(&self) {
        lock(&self.state).closed = true;
        self.cv.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        lock(&self.state).closed
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

/// Thread-safe inbox of prompt updates, drained by the engine at block boundaries.
#[derive(Debug, Default)]
pub struct PromptMailbox {
    items: Mutex<VecDeque<(Option<ClientId>, PromptUpdate)>>,
}

impl PromptMailbox {
    pub fn post(&self, from: Option<ClientId>, update: PromptUpdate) {
        lock(&self.items).push_back((from, update));
    }

    pub fn drain(&self) -> Vec<(Option<ClientId>, PromptUpdate)> {
        lock(&self.items).drain(..).collect()
    }

    pub fn len(&self) -> usize {
        lock(&self.items).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fan-out point shared by the engine sink and all client threads.
#[derive(Debug)]
pub struct Hub {
    hello: Outgoing,
    cap: usize,
    clients: Mutex<BTreeMap<ClientId, Arc<ClientQueue>>>,
    next_id: AtomicU64,
    ended: AtomicBool,
    mailbox: PromptMailbox,
    dropped_closed: AtomicU64,
}

impl Hub {
    pub fn new(hello: Hello, client_queue: usize) -> Result<Self, StreamError> {
        if client_queue == 0 {
            return Err(StreamError::QueueSize);
        }
        Ok(Self {
            hello: Outgoing::encode(&StreamMessage::Hello(hello)),
            cap: client_queue,
            clients: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            ended: AtomicBool::new(false),
            mailbox: PromptMailbox::default(),
            dropped_closed: AtomicU64::new(0),
        })
    }

    /// New client queue, seeded with HELLO (and END if the run already ended).
    pub fn add_client(&self) -> (ClientId, Arc<ClientQueue>) {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let q = Arc::new(ClientQueue::new(self.cap));
        q.push(self.hello.clone());
        let mut clients = lock(&self.clients);
        if self.ended.load(Ordering::SeqCst) {
            q.push(Outgoing::encode(&StreamMessage::End));
        }
        clients.insert(id, q.clone());
        (id, q)
    }

    pub fn remove_client(&self, id: ClientId) {
        if let Some(q) = lock(&self.clients).remove(&id) {
            q.close();
            self.dropped_closed.fetch_add(q.dropped(), Ordering::Relaxed);
        }
    }

    pub fn client_count(&self) -> usize {
        lock(&self.clients).len()
    }

    pub fn broadcast(&self, msg: &StreamMessage) {
        let m = Outgoing::encode(msg);
        for q in lock(&self.clients).values() {
            q.push(m.clone());
        }
    }

    /// Returns false if the client is gone.
    pub fn send_to(&self, id: ClientId, msg: &StreamMessage) -> bool {
        match lock(&self.clients).get(&id) {
            Some(q) => {
                q.push(Outgoing::encode(msg));
                true
            }
            None => false,
        }
    }

    /// Broadcast END once; later calls do nothing.
    pub fn end(&self) {
        let clients = lock(&self.clients);
        if !self.ended.swap(true, Ordering::SeqCst) {
            let m = Outgoing::encode(&StreamMessage::End);
            for q in clients.values() {
                q.push(m.clone());
            }
        }
    }

    pub fn is_ended(&self) -> bool {
        self.ended.load(Ordering::SeqCst)
    }

    pub fn mailbox(&self) -> &PromptMailbox {
        &self.mailbox
    }

    /// Messages dropped for slow clients, including disconnected ones.
    pub fn dropped_messages(&self) -> u64 {
        self.dropped_closed.load(Ordering::Relaxed) + lock(&self.clients).values().map(|q| q.dropped()).sum::<u64>()
    }

    /// Wait until every client queue is empty or `timeout` passes.
    pub fn drain(&self, timeout: Duration) -> bool {
        let t = Instant::now();
        loop {
            if lock(&self.clients).values().all(|q| q.is_empty()) {
                return true;
            }
            if t.elapsed() >= timeout {
                return false;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}

/// Why an update was not applied, as sent back in the ERROR message.
pub fn rejection(update: &PromptUpdate) -> (u16, &'static str) {
    if update.text.trim().is_empty() {
        (ERR_INVALID_PROMPT, "empty prompt")
    } else {
        (ERR_RETROACTIVE, "retroactive")
    }
}

/// Engine observer that feeds a [`Hub`]: FRAMEs after every block, METRICS
/// every `metrics_every` blocks, END on completion, ERROR for rejected updates.
pub struct StreamObserver<'a> {
    hub: &'a Hub,
    profiler: Option<&'a Profiler>,
    metrics_every: u32,
    stop: Option<&'a AtomicBool>,
    origins: VecDeque<Option<ClientId>>,
    span: Option<SpanGuard<'a>>,
    pub events: Vec<EngineEvent>,
    pub accepted: Vec<PromptUpdate>,
    pub rejected: Vec<PromptUpdate>,
}

impl<'a> StreamObserver<'a> {
    pub fn new(hub: &'a Hub) -> Self {
        Self {
            hub,
            profiler: None,
            metrics_every: 1,
            stop: None,
            origins: VecDeque::new(),
            span: None,
            events: Vec::new(),
            accepted: Vec::new(),
            rejected: Vec::new(),
        }
    }

    /// One `engine.block` span per block; METRICS carry the profiler snapshot.
    pub fn with_profiler(mut self, p: &'a Profiler) -> Self {
        self.profiler = Some(p);
        self
    }

    /// 0 disables METRICS.
    pub fn metrics_every(mut self, blocks: u32) -> Self {
        self.metrics_every = blocks;
        self
    }

    pub fn stop_flag(mut self, flag: &'a AtomicBool) -> Self {
        self.stop = Some(flag);
        self
    }
}

impl EngineObserver for StreamObserver<'_> {
    fn poll_updates(&mut self) -> Vec<PromptUpdate> {
        self.hub
            .mailbox()
            .drain()
            .into_iter()
            .map(|(from, u)| {
                self.origins.push_back(from);
                u
            })
            .collect()
    }

    fn update_resolved(&mut self, update: &PromptUpdate, accepted: bool) {
        let origin = self.origins.pop_front().flatten();
        if accepted {
            self.accepted.push(update.clone());
            return;
        }
        self.rejected.push(update.clone());
        let (code, message) = rejection(update);
        let msg = StreamMessage::Error(ErrorPayload {
            code,
            chunk: update.effective_chunk,
            message: message.into(),
        });
        match origin {
            Some(id) => {
                self.hub.send_to(id, &msg);
            }
            None => self.hub.broadcast(&msg),
        }
    }

    fn event(&mut self, event: &EngineEvent) {
        self.events.push(event.clone());
    }

    fn block_started(&mut self, _chunk: u32) {
        if let Some(p) = self.profiler {
            self.span = Some(p.scoped("engine.block"));
        }
    }

    fn block_done(&mut self, block: &GeneratedBlock, stats: &KvStats) {
        self.span = None;
        for (i, f) in block.frames.iter().enumerate() {
            self.hub.broadcast(&StreamMessage::Frame(FramePayload {
                chunk_index: block.chunk_index,
                frame_index: i as u16,
                width: f.width as u16,
                height: f.height as u16,
                pixels: f.pixels.clone(),
            }));
        }
        if self.metrics_every > 0 && (block.chunk_index + 1).is_multiple_of(self.metrics_every) {
            let mut values = vec![
                ("chunk".to_string(), f64::from(block.chunk_index)),
                ("kv.device_pages".to_string(), stats.device_pages_used as f64),
                ("kv.host_pages".to_string(), stats.host_pages_used as f64),
                ("kv.tokens".to_string(), stats.total_tokens as f64),
                ("stream.dropped".to_string(), self.hub.dropped_messages() as f64),
            ];
            if let Some(p) = self.profiler {
                values.extend(p.report(ReportFormat::Summary).snapshot_values());
            }
            self.hub.broadcast(&StreamMessage::Metrics(values));
        }
    }

    fn should_stop(&mut self) -> bool {
        self.stop.is_some_and(|s| s.load(Ordering::SeqCst))
    }

    fn complete(&mut self, _blocks: usize) {
        self.hub.end();
    }
}
