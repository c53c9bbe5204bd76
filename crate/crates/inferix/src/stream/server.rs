use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use inferix_core::engine::PromptUpdate;
use inferix_core::wire::{Decoder, ErrorPayload, Hello, MessageKind, StreamMessage, ERR_BAD_MESSAGE};

use super::{lock, web, ClientId, ClientQueue, Hub, StreamError, DEFAULT_CLIENT_QUEUE};

const POLL: Duration = Duration::from_millis(10);
/// How long a client connection stays open for reading after END was written.
pub(super) const LINGER: Duration = Duration::from_secs(2);
/// A client that accepts no bytes for this long is disconnected.
pub(super) const WRITE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub client_queue: usize,
    /// Directory served under `/console` on the web endpoint.
    pub console_dir: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            client_queue: DEFAULT_CLIENT_QUEUE,
            console_dir: None,
        }
    }
}

pub(super) struct Shared {
    pub hub: Arc<Hub>,
    pub stop: AtomicBool,
    pub workers: Mutex<Vec<JoinHandle<()>>>,
    pub console_dir: Option<PathBuf>,
}

impl Shared {
    pub fn spawn(&self, name: &str, f: impl FnOnce() + Send + 'static) {
        if let Ok(h) = std::thread::Builder::new().name(name.into()).spawn(f) {
            lock(&self.workers).push(h);
        }
    }
}

/// A running server. Dropping it without [`StreamServer::shutdown`] leaves
/// the accept threads running until process exit.
pub struct StreamServer {
    shared: Arc<Shared>,
    addr: SocketAddr,
    web_addr: Option<SocketAddr>,
    acceptors: Vec<JoinHandle<()>>,
}

fn bind(addr: &str) -> Result<TcpListener, StreamError> {
    let l = TcpListener::bind(addr).map_err(|source| StreamError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    l.set_nonblocking(true)?;
    Ok(l)
}

impl StreamServer {
    /// Bind the raw endpoint and, optionally, the web bridge.
    pub fn bind(listen: &str, web_listen: Option<&str>, hello: Hello, opts: ServeOptions) -> Result<Self, StreamError> {
        let raw = bind(listen)?;
        let web = web_listen.map(bind).transpose()?;
        let shared = Arc::new(Shared {
            hub: Arc::new(Hub::new(hello, opts.client_queue)?),
            stop: AtomicBool::new(false),
            workers: Mutex::new(Vec::new()),
            console_dir: opts.console_dir,
        });
        let addr = raw.local_addr()?;
        let web_addr = web.as_ref().map(TcpListener::local_addr).transpose()?;
        let mut acceptors = Vec::new();
        let sh = shared.clone();
        acceptors.push(std::thread::spawn(move || accept_loop(raw, &sh, serve_raw)));
        if let Some(web) = web {
            let sh = shared.clone();
            acceptors.push(std::thread::spawn(move || accept_loop(web, &sh, web::serve_web)));
        }
        Ok(Self {
            shared,
            addr,
            web_addr,
            acceptors,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn web_addr(&self) -> Option<SocketAddr> {
        self.web_addr
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.shared.hub
    }

    /// Block until at least `n` clients are registered.
    pub fn wait_for_clients(&self, n: usize, timeout: Duration) -> bool {
        let t = Instant::now();
        while self.shared.hub.client_count() < n {
            if t.elapsed() >= timeout {
                return false;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        true
    }

    /// Send END (if not sent yet), give clients `grace` to receive what is
    /// queued, then stop accepting and join every thread.
    pub fn shutdown(self, grace: Duration) {
        self.shared.hub.end();
        self.shared.hub.drain(grace);
        self.shared.stop.store(true, Ordering::SeqCst);
        for h in self.acceptors {
            let _ = h.join();
        }
        let workers: Vec<_> = lock(&self.shared.workers).drain(..).collect();
        for h in workers {
            let _ = h.join();
        }
    }
}

type Handler = fn(TcpStream, Arc<Shared>);

fn accept_loop(l: TcpListener, sh: &Arc<Shared>, handler: Handler) {
    while !sh.stop.load(Ordering::SeqCst) {
        match l.accept() {
            Ok((s, _)) => {
                let _ = s.set_nonblocking(false);
                let _ = s.set_nodelay(true);
                let shc = sh.clone();
                sh.spawn("inferix-client", move || handler(s, shc));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(_) => std::thread::sleep(POLL),
        }
    }
}

/// Route one decoded client message; only PROMPT_UPDATE has an effect.
pub(super) fn handle_incoming(hub: &Hub, id: ClientId, msg: StreamMessage) {
    if let StreamMessage::PromptUpdate(p) = msg {
        hub.mailbox().post(
            Some(id),
            PromptUpdate {
                effective_chunk: p.effective_chunk,
                text: p.text,
            },
        );
    }
}

pub(super) fn bad_message(e: impl std::fmt::Display) -> StreamMessage {
    StreamMessage::Error(ErrorPayload {
        code: ERR_BAD_MESSAGE,
        chunk: 0,
        message: format!("bad message: {e}"),
    })
}

fn serve_raw(stream: TcpStream, sh: Arc<Shared>) {
    let hub = sh.hub.clone();
    let (id, q) = hub.add_client();
    let Ok(reader) = stream.try_clone() else {
        hub.remove_client(id);
        return;
    };
    let writer_q = q.clone();
    let writer_sh = sh.clone();
    sh.spawn("inferix-writer", move || {
        write_loop(stream, &writer_q, &writer_sh);
    });
    read_loop(reader, id, &q, &sh);
    hub.remove_client(id);
}

fn write_loop(mut s: TcpStream, q: &ClientQueue, sh: &Shared) {
    let _ = s.set_write_timeout(Some(WRITE_TIMEOUT));
    loop {
        let Some(m) = q.pop_wait(POLL * 5) else {
            if q.is_closed() || (sh.stop.load(Ordering::SeqCst) && q.is_empty()) {
                break;
            }
            continue;
        };
        if s.write_all(&m.bytes).is_err() {
            q.close();
            break;
        }
        if m.kind == MessageKind::End {
            let _ = s.flush();
            let _ = s.shutdown(Shutdown::Write);
            q.close();
            break;
        }
    }
}

fn read_loop(mut s: TcpStream, id: ClientId, q: &ClientQueue, sh: &Shared) {
    let _ = s.set_read_timeout(Some(POLL * 5));
    let mut dec = Decoder::new();
    let mut buf = [0u8; 8192];
    let mut in_sync = true;
    let mut closed_at: Option<Instant> = None;
    loop {
        if q.is_closed() {
            let t = *closed_at.get_or_insert_with(Instant::now);
            if t.elapsed() > LINGER {
                break;
            }
        }
        if sh.stop.load(Ordering::SeqCst) {
            break;
        }
        match s.read(&mut buf) {
            Ok(0) => break,
            Ok(n) if in_sync => {
                dec.push(&buf[..n]);
                while let Some(m) = next_or_report(&mut dec, &sh.hub, id, &mut in_sync) {
                    handle_incoming(&sh.hub, id, m);
                }
            }
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
    q.close();
}

/// Next complete message. Decode errors are reported to the client; when the
/// decoder could not skip the offending bytes the input is out of sync and
/// `in_sync` is cleared.
pub(super) fn next_or_report(dec: &mut Decoder, hub: &Hub, id: ClientId, in_sync: &mut bool) -> Option<StreamMessage> {
    loop {
        let before = dec.buffered();
        match dec.next_message() {
            Ok(m) => return m,
            Err(e) => {
                hub.send_to(id, &bad_message(&e));
                if dec.buffered() == before {
                    *in_sync = false;
                    return None;
                }
            }
        }
    }
}
