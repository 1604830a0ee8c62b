//! Message passing between workers.
//!
//! Three interchangeable backends satisfy one delivery contract, so the
//! sampler never knows how it is deployed:
//!
//! * [`LocalTransport`] — a single worker, all messages loop back in-process;
//! * [`ThreadedTransport`] — M workers as threads of one process, exchanging
//!   messages through per-(sender, dest) mailboxes keyed by tag;
//! * [`SocketTransport`] — M processes on a full TCP mesh over loopback (or
//!   hosts from `ROOST_HOSTFILE`).
//!
//! The contract: within an epoch a message is identified by
//! `(sender, dest, tag)`; delivery is exactly-once; matching is by exact tag,
//! never by arrival order. Messages with unexpected tags are queued until
//! someone asks for them, so scheduling and wire interleaving cannot reorder
//! matches.
//!
//! Wire frame (little-endian): magic `u16` 0x5047, sender rank `u16`,
//! tag `u64`, length `u32`, payload bytes. A rank-announce frame is tag 0
//! with the sender rank as a `u16` payload.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

/// 1-based worker rank.
pub type Rank = u32;

const FRAME_MAGIC: u16 = 0x5047;
const ANNOUNCE_TAG: u64 = 0;
/// Control tag used during rendezvous to carry a worker's listen port.
const PORT_TAG: u64 = 1;
/// Control tag used during rendezvous to carry the full peer table.
const TABLE_TAG: u64 = 2;

pub const DEFAULT_BASE_PORT: u16 = 47000;
const DEFAULT_RECEIVE_TIMEOUT: Duration = Duration::from_secs(60);
const CONNECT_RETRY: Duration = Duration::from_secs(20);

/// Rendezvous patience (`ROOST_CONNECT_TIMEOUT_MS` overrides for tests).
fn rendezvous_deadline() -> Instant {
    let timeout = std::env::var("ROOST_CONNECT_TIMEOUT_MS")
        .ok()
        .and_then(|s| s.parse().ok())
        .map(Duration::from_millis)
        .unwrap_or(CONNECT_RETRY);
    Instant::now() + timeout
}

fn accept_with_deadline(
    listener: &TcpListener,
    deadline: Instant,
) -> Result<TcpStream, TransportError> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                return Ok(stream);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(TransportError::Rendezvous(
                        "timed out waiting for workers to announce".into(),
                    ));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown rank {0}")]
    UnknownRank(Rank),
    #[error("payload of {0} bytes exceeds frame limit")]
    PayloadTooLarge(usize),
    #[error("timed out waiting for message from rank {from} tag {tag:#x} (likely deadlock)")]
    Deadlock { from: Rank, tag: u64 },
    #[error("peer rank {0} closed the connection")]
    PeerClosed(Rank),
    #[error("bind failed on port {port}: {source}")]
    Bind {
        port: u16,
        source: std::io::Error,
    },
    #[error("rendezvous failed: {0}")]
    Rendezvous(String),
    #[error("wire protocol violation: {0}")]
    Wire(String),
    #[error("worker rank {rank} exited with status {status}")]
    WorkerFailed { rank: Rank, status: i32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Handle returned by `send`, consumed by `waitall`. The built-in backends
/// flush eagerly, so a handle carries no pending state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendHandle(u64);

/// A message addressed to a worker.
#[derive(Debug, Clone)]
pub struct Envelope {
    pub dest: Rank,
    pub tag: u64,
    pub payload: Vec<u8>,
}

/// Backend-agnostic worker endpoint.
pub trait Transport: Send {
    fn rank(&self) -> Rank;
    fn n_workers(&self) -> u32;

    /// Non-blocking enqueue. The payload is captured at call time.
    fn send(&mut self, dest: Rank, tag: u64, payload: &[u8]) -> Result<SendHandle, TransportError>;

    /// Block until the unique message with `(from, tag)` arrives.
    fn receive(&mut self, from: Rank, tag: u64) -> Result<Vec<u8>, TransportError>;

    /// Wait for the given sends to be flushed.
    fn waitall(&mut self, handles: &[SendHandle]) -> Result<(), TransportError>;

    fn send_envelope(&mut self, env: &Envelope) -> Result<SendHandle, TransportError> {
        self.send(env.dest, env.tag, &env.payload)
    }
}

// ---------------------------------------------------------------------------
// mailboxes shared by every backend
// ---------------------------------------------------------------------------

struct MailboxInner {
    // (from, tag) -> FIFO of payloads
    queues: HashMap<(Rank, u64), std::collections::VecDeque<Vec<u8>>>,
    closed: Vec<Rank>,
}

struct Mailbox {
    inner: Mutex<MailboxInner>,
    cv: Condvar,
}

impl Mailbox {
    fn new() -> Self {
        Mailbox {
            inner: Mutex::new(MailboxInner {
                queues: HashMap::new(),
                closed: Vec::new(),
            }),
            cv: Condvar::new(),
        }
    }

    fn push(&self, from: Rank, tag: u64, payload: Vec<u8>) {
        let mut inner = self.inner.lock().unwrap();
        inner.queues.entry((from, tag)).or_default().push_back(payload);
        self.cv.notify_all();
    }

    fn mark_closed(&self, from: Rank) {
        let mut inner = self.inner.lock().unwrap();
        inner.closed.push(from);
        self.cv.notify_all();
    }

    fn pop(&self, from: Rank, tag: u64, timeout: Duration) -> Result<Vec<u8>, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.inner.lock().unwrap();
        loop {
            if let Some(queue) = inner.queues.get_mut(&(from, tag)) {
                if let Some(payload) = queue.pop_front() {
                    if queue.is_empty() {
                        inner.queues.remove(&(from, tag));
                    }
                    return Ok(payload);
                }
            }
            if inner.closed.contains(&from) {
                return Err(TransportError::PeerClosed(from));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::Deadlock { from, tag });
            }
            let (guard, _) = self.cv.wait_timeout(inner, deadline - now).unwrap();
            inner = guard;
        }
    }
}

// ---------------------------------------------------------------------------
// in-process sequential backend (one worker)
// ---------------------------------------------------------------------------

/// Single-worker transport: every send is a loopback to its own mailbox.
pub struct LocalTransport {
    mailbox: Mailbox,
    next_handle: u64,
}

impl LocalTransport {
    pub fn new() -> Self {
        LocalTransport {
            mailbox: Mailbox::new(),
            next_handle: 0,
        }
    }
}

impl Default for LocalTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for LocalTransport {
    fn rank(&self) -> Rank {
        1
    }

    fn n_workers(&self) -> u32 {
        1
    }

    fn send(&mut self, dest: Rank, tag: u64, payload: &[u8]) -> Result<SendHandle, TransportError> {
        if dest != 1 {
            return Err(TransportError::UnknownRank(dest));
        }
        check_payload(payload)?;
        self.mailbox.push(1, tag, payload.to_vec());
        self.next_handle += 1;
        Ok(SendHandle(self.next_handle))
    }

    fn receive(&mut self, from: Rank, tag: u64) -> Result<Vec<u8>, TransportError> {
        if from != 1 {
            return Err(TransportError::UnknownRank(from));
        }
        // single thread: a message that is not already queued will never come
        self.mailbox.pop(from, tag, Duration::ZERO).map_err(|e| match e {
            TransportError::Deadlock { from, tag } => TransportError::Deadlock { from, tag },
            other => other,
        })
    }

    fn waitall(&mut self, _handles: &[SendHandle]) -> Result<(), TransportError> {
        Ok(())
    }
}

fn check_payload(payload: &[u8]) -> Result<(), TransportError> {
    if payload.len() > u32::MAX as usize {
        return Err(TransportError::PayloadTooLarge(payload.len()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// in-process multi-threaded backend (M workers as threads)
// ---------------------------------------------------------------------------

struct ThreadedShared {
    n_workers: u32,
    // indexed by dest-1: each worker owns one inbox
    inboxes: Vec<Mailbox>,
}

/// One endpoint of an M-worker in-process topology.
pub struct ThreadedTransport {
    rank: Rank,
    shared: Arc<ThreadedShared>,
    next_handle: u64,
    receive_timeout: Duration,
}

impl ThreadedTransport {
    /// Build all M endpoints at once; hand one to each worker thread.
    pub fn create(n_workers: u32) -> Vec<ThreadedTransport> {
        assert!(n_workers >= 1);
        let shared = Arc::new(ThreadedShared {
            n_workers,
            inboxes: (0..n_workers).map(|_| Mailbox::new()).collect(),
        });
        (1..=n_workers)
            .map(|rank| ThreadedTransport {
                rank,
                shared: Arc::clone(&shared),
                next_handle: 0,
                receive_timeout: DEFAULT_RECEIVE_TIMEOUT,
            })
            .collect()
    }

    pub fn set_receive_timeout(&mut self, timeout: Duration) {
        self.receive_timeout = timeout;
    }
}

impl Transport for ThreadedTransport {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn n_workers(&self) -> u32 {
        self.shared.n_workers
    }

    fn send(&mut self, dest: Rank, tag: u64, payload: &[u8]) -> Result<SendHandle, TransportError> {
        if dest == 0 || dest > self.shared.n_workers {
            return Err(TransportError::UnknownRank(dest));
        }
        check_payload(payload)?;
        self.shared.inboxes[(dest - 1) as usize].push(self.rank, tag, payload.to_vec());
        self.next_handle += 1;
        Ok(SendHandle(self.next_handle))
    }

    fn receive(&mut self, from: Rank, tag: u64) -> Result<Vec<u8>, TransportError> {
        if from == 0 || from > self.shared.n_workers {
            return Err(TransportError::UnknownRank(from));
        }
        self.shared.inboxes[(self.rank - 1) as usize].pop(from, tag, self.receive_timeout)
    }

    fn waitall(&mut self, _handles: &[SendHandle]) -> Result<(), TransportError> {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// multi-process TCP backend
// ---------------------------------------------------------------------------

fn write_frame(stream: &mut TcpStream, sender: Rank, tag: u64, payload: &[u8]) -> std::io::Result<()> {
    let mut frame = Vec::with_capacity(16 + payload.len());
    frame.extend_from_slice(&FRAME_MAGIC.to_le_bytes());
    frame.extend_from_slice(&(sender as u16).to_le_bytes());
    frame.extend_from_slice(&tag.to_le_bytes());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(payload);
    stream.write_all(&frame)
}

fn read_frame(stream: &mut TcpStream) -> Result<(Rank, u64, Vec<u8>), TransportError> {
    let mut header = [0u8; 16];
    stream.read_exact(&mut header)?;
    let magic = u16::from_le_bytes([header[0], header[1]]);
    if magic != FRAME_MAGIC {
        return Err(TransportError::Wire(format!("bad frame magic {magic:#06x}")));
    }
    let sender = u16::from_le_bytes([header[2], header[3]]) as Rank;
    let tag = u64::from_le_bytes(header[4..12].try_into().unwrap());
    let len = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; len];
    stream.read_exact(&mut payload)?;
    Ok((sender, tag, payload))
}

/// One endpoint of a multi-process TCP mesh.
pub struct SocketTransport {
    rank: Rank,
    n_workers: u32,
    inbox: Arc<Mailbox>,
    // write half per peer, None for self
    peers: Vec<Option<Arc<Mutex<TcpStream>>>>,
    readers: Vec<std::thread::JoinHandle<()>>,
    shutdown: Arc<AtomicBool>,
    next_handle: u64,
    receive_timeout: Duration,
}

impl SocketTransport {
    fn from_streams(rank: Rank, n_workers: u32, streams: Vec<Option<TcpStream>>) -> Self {
        let inbox = Arc::new(Mailbox::new());
        let shutdown = Arc::new(AtomicBool::new(false));
        let mut peers = Vec::with_capacity(n_workers as usize);
        let mut readers = Vec::new();
        for (idx, stream) in streams.into_iter().enumerate() {
            let peer_rank = (idx + 1) as Rank;
            match stream {
                None => peers.push(None),
                Some(s) => {
                    let read_half = s.try_clone().expect("clone tcp stream");
                    peers.push(Some(Arc::new(Mutex::new(s))));
                    let inbox = Arc::clone(&inbox);
                    let shutdown = Arc::clone(&shutdown);
                    readers.push(std::thread::spawn(move || {
                        let mut stream = read_half;
                        loop {
                            match read_frame(&mut stream) {
                                Ok((sender, tag, payload)) => inbox.push(sender, tag, payload),
                                Err(_) => {
                                    if !shutdown.load(Ordering::Relaxed) {
                                        inbox.mark_closed(peer_rank);
                                    }
                                    return;
                                }
                            }
                        }
                    }));
                }
            }
        }
        SocketTransport {
            rank,
            n_workers,
            inbox,
            peers,
            readers,
            shutdown,
            next_handle: 0,
            receive_timeout: DEFAULT_RECEIVE_TIMEOUT,
        }
    }

    pub fn set_receive_timeout(&mut self, timeout: Duration) {
        self.receive_timeout = timeout;
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        for peer in self.peers.iter().flatten() {
            if let Ok(stream) = peer.lock() {
                let _ = stream.shutdown(std::net::Shutdown::Both);
            }
        }
        for reader in self.readers.drain(..) {
            let _ = reader.join();
        }
    }
}

impl Transport for SocketTransport {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn n_workers(&self) -> u32 {
        self.n_workers
    }

    fn send(&mut self, dest: Rank, tag: u64, payload: &[u8]) -> Result<SendHandle, TransportError> {
        if dest == 0 || dest > self.n_workers {
            return Err(TransportError::UnknownRank(dest));
        }
        check_payload(payload)?;
        if dest == self.rank {
            self.inbox.push(self.rank, tag, payload.to_vec());
        } else {
            let peer = self.peers[(dest - 1) as usize]
                .as_ref()
                .ok_or(TransportError::UnknownRank(dest))?;
            let mut stream = peer.lock().unwrap();
            write_frame(&mut stream, self.rank, tag, payload)
                .map_err(|_| TransportError::PeerClosed(dest))?;
        }
        self.next_handle += 1;
        Ok(SendHandle(self.next_handle))
    }

    fn receive(&mut self, from: Rank, tag: u64) -> Result<Vec<u8>, TransportError> {
        if from == 0 || from > self.n_workers {
            return Err(TransportError::UnknownRank(from));
        }
        self.inbox.pop(from, tag, self.receive_timeout)
    }

    fn waitall(&mut self, _handles: &[SendHandle]) -> Result<(), TransportError> {
        // writes are flushed synchronously under the peer mutex
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// rendezvous and local launching
// ---------------------------------------------------------------------------

fn base_port_from_env() -> u16 {
    std::env::var("ROOST_BASE_PORT")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_BASE_PORT)
}

fn connect_with_retry(addr: &str, deadline: Instant) -> Result<TcpStream, TransportError> {
    loop {
        match TcpStream::connect(addr) {
            Ok(stream) => {
                stream.set_nodelay(true).ok();
                return Ok(stream);
            }
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(TransportError::Rendezvous(format!(
                        "could not connect to {addr}: {e}"
                    )));
                }
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

/// Multi-host peer table from `ROOST_HOSTFILE`: one `host:port` per line,
/// line `r` being rank `r`'s address. Blank lines and `#` comments allowed.
fn hostfile_peers(n_workers: u32) -> Result<Option<Vec<String>>, TransportError> {
    let Ok(path) = std::env::var("ROOST_HOSTFILE") else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| TransportError::Rendezvous(format!("hostfile {path}: {e}")))?;
    let peers: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    if peers.len() < n_workers as usize {
        return Err(TransportError::Rendezvous(format!(
            "hostfile {path} lists {} hosts for {n_workers} workers",
            peers.len()
        )));
    }
    Ok(Some(peers))
}

fn port_of(addr: &str) -> Result<u16, TransportError> {
    addr.rsplit_once(':')
        .and_then(|(_, p)| p.parse().ok())
        .ok_or_else(|| TransportError::Rendezvous(format!("bad host:port entry {addr:?}")))
}

/// Establish the mesh as the root (rank 1). Children are expected to dial in
/// and announce themselves; the root then broadcasts the peer port table so
/// children can complete the mesh among themselves. With a hostfile, peer
/// addresses come from the file instead of the table.
fn root_rendezvous(n_workers: u32, base_port: u16) -> Result<SocketTransport, TransportError> {
    let hosts = hostfile_peers(n_workers)?;
    let (bind_addr, bind_port) = match &hosts {
        Some(peers) => ("0.0.0.0", port_of(&peers[0])?),
        None => ("127.0.0.1", base_port),
    };
    let listener = TcpListener::bind((bind_addr, bind_port)).map_err(|e| TransportError::Bind {
        port: bind_port,
        source: e,
    })?;
    let deadline = rendezvous_deadline();
    let mut streams: Vec<Option<TcpStream>> = (0..n_workers).map(|_| None).collect();
    let mut ports: Vec<u16> = vec![0; n_workers as usize];
    let mut pending = n_workers - 1;
    while pending > 0 {
        let mut stream = accept_with_deadline(&listener, deadline)?;
        stream.set_nodelay(true).ok();
        let (_, tag, payload) = read_frame(&mut stream)?;
        if tag != ANNOUNCE_TAG || payload.len() != 2 {
            return Err(TransportError::Wire("expected rank announce".into()));
        }
        let rank = u16::from_le_bytes([payload[0], payload[1]]) as Rank;
        if rank < 2 || rank > n_workers {
            return Err(TransportError::Wire(format!("announce from invalid rank {rank}")));
        }
        if streams[(rank - 1) as usize].is_some() {
            return Err(TransportError::Wire(format!("duplicate announce from rank {rank}")));
        }
        let (_, port_tag, port_payload) = read_frame(&mut stream)?;
        if port_tag != PORT_TAG || port_payload.len() != 2 {
            return Err(TransportError::Wire("expected listen-port frame".into()));
        }
        ports[(rank - 1) as usize] = u16::from_le_bytes([port_payload[0], port_payload[1]]);
        streams[(rank - 1) as usize] = Some(stream);
        pending -= 1;
    }
    // broadcast the port table
    let mut table = Vec::with_capacity(2 * n_workers as usize);
    for &p in &ports {
        table.extend_from_slice(&p.to_le_bytes());
    }
    for stream in streams.iter_mut().flatten() {
        write_frame(stream, 1, TABLE_TAG, &table)?;
    }
    Ok(SocketTransport::from_streams(1, n_workers, streams))
}

/// Join the mesh as a child worker (rank >= 2).
pub fn worker_rendezvous(
    rank: Rank,
    n_workers: u32,
    base_port: u16,
) -> Result<SocketTransport, TransportError> {
    assert!(rank >= 2 && rank <= n_workers);
    let hosts = hostfile_peers(n_workers)?;
    let deadline = rendezvous_deadline();
    // own listener for higher-ranked peers; OS-assigned port on loopback,
    // the hostfile-declared port otherwise
    let (bind_addr, bind_port) = match &hosts {
        Some(peers) => ("0.0.0.0", port_of(&peers[(rank - 1) as usize])?),
        None => ("127.0.0.1", 0),
    };
    let listener = TcpListener::bind((bind_addr, bind_port)).map_err(|e| TransportError::Bind {
        port: bind_port,
        source: e,
    })?;
    let my_port = listener.local_addr()?.port();

    let root_addr = match &hosts {
        Some(peers) => peers[0].clone(),
        None => format!("127.0.0.1:{base_port}"),
    };
    let mut root = connect_with_retry(&root_addr, deadline)?;
    write_frame(&mut root, rank, ANNOUNCE_TAG, &(rank as u16).to_le_bytes())?;
    write_frame(&mut root, rank, PORT_TAG, &my_port.to_le_bytes())?;
    let (_, tag, table) = read_frame(&mut root)?;
    if tag != TABLE_TAG || table.len() != 2 * n_workers as usize {
        return Err(TransportError::Rendezvous("bad port table".into()));
    }
    let ports: Vec<u16> = (0..n_workers as usize)
        .map(|i| u16::from_le_bytes([table[2 * i], table[2 * i + 1]]))
        .collect();
    let peer_addr = |peer: Rank| -> String {
        match &hosts {
            Some(peers) => peers[(peer - 1) as usize].clone(),
            None => format!("127.0.0.1:{}", ports[(peer - 1) as usize]),
        }
    };

    let mut streams: Vec<Option<TcpStream>> = (0..n_workers).map(|_| None).collect();
    streams[0] = Some(root);
    // dial peers with lower rank (excluding root), accept peers with higher rank
    for peer in 2..rank {
        let mut stream = connect_with_retry(&peer_addr(peer), deadline)?;
        write_frame(&mut stream, rank, ANNOUNCE_TAG, &(rank as u16).to_le_bytes())?;
        streams[(peer - 1) as usize] = Some(stream);
    }
    for _ in (rank + 1)..=n_workers {
        let mut stream = accept_with_deadline(&listener, deadline)?;
        stream.set_nodelay(true).ok();
        let (_, tag, payload) = read_frame(&mut stream)?;
        if tag != ANNOUNCE_TAG || payload.len() != 2 {
            return Err(TransportError::Wire("expected rank announce".into()));
        }
        let peer = u16::from_le_bytes([payload[0], payload[1]]) as Rank;
        if peer <= rank || peer > n_workers || streams[(peer - 1) as usize].is_some() {
            return Err(TransportError::Wire(format!("unexpected announce from rank {peer}")));
        }
        streams[(peer - 1) as usize] = Some(stream);
    }
    Ok(SocketTransport::from_streams(rank, n_workers, streams))
}

/// Guard that kills child workers if the root fails before they exit.
struct ChildGuard(Vec<(Rank, Child)>);

impl ChildGuard {
    fn wait_all(mut self) -> Result<(), TransportError> {
        let children = std::mem::take(&mut self.0);
        let mut failure = None;
        for (rank, mut child) in children {
            match child.wait() {
                Ok(status) if status.success() => {}
                Ok(status) => {
                    failure.get_or_insert(TransportError::WorkerFailed {
                        rank,
                        status: status.code().unwrap_or(-1),
                    });
                }
                Err(e) => {
                    failure.get_or_insert(TransportError::Io(e));
                }
            }
        }
        match failure {
            None => Ok(()),
            Some(e) => Err(e),
        }
    }
}

impl Drop for ChildGuard {
    fn drop(&mut self) {
        for (_, child) in &mut self.0 {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Run a collective job on `n_workers` local workers, the calling process
/// acting as rank 1.
///
/// With one worker no sockets are involved: the closure gets a loopback
/// transport. Otherwise child processes are spawned from the command
/// returned by `make_child` (one per rank in 2..=M), the TCP mesh is built
/// over loopback, and the closure runs as rank 1. Child exit statuses are
/// collected after the closure returns; the first failure wins.
pub fn launch_local<R>(
    n_workers: u32,
    base_port: Option<u16>,
    make_child: impl Fn(Rank, u16) -> Command,
    root_work: impl FnOnce(&mut dyn Transport) -> R,
) -> Result<R, TransportError> {
    assert!(n_workers >= 1);
    if n_workers == 1 {
        let mut transport = LocalTransport::new();
        return Ok(root_work(&mut transport));
    }
    let base_port = base_port.unwrap_or_else(base_port_from_env);
    // bind before spawning so children can retry-connect immediately
    let mut children = Vec::new();
    for rank in 2..=n_workers {
        let mut cmd = make_child(rank, base_port);
        let child = cmd.spawn()?;
        children.push((rank, child));
    }
    let guard = ChildGuard(children);
    let mut transport = root_rendezvous(n_workers, base_port)?;
    let result = root_work(&mut transport);
    drop(transport); // close the mesh so children unblock
    guard.wait_all()?;
    Ok(result)
}
