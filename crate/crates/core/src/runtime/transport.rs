//! Frame transport between the master and its workers.
//!
//! Frames are always encoded bytes, also in-process, so communication
//! accounting measures exactly what TCP would carry. The master reads every
//! connection through one inbox; each worker holds a duplex link.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender, TryRecvError};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use super::protocol::{decode_header, ProtocolError, HEADER_LEN};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer disconnected")]
    Disconnected,
    #[error("timed out waiting for a peer")]
    Timeout,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// A frame (or a connection failure) arriving at the master.
#[derive(Debug)]
pub struct Inbound {
    pub conn: usize,
    pub frame: Result<Vec<u8>, TransportError>,
}

enum Outbox {
    Local(SyncSender<Vec<u8>>),
    Tcp(TcpStream),
}

/// The master's end: a shared inbox and one outbox per connection.
pub struct MasterSide {
    inbox: Receiver<Inbound>,
    outboxes: Vec<Outbox>,
}

impl MasterSide {
    pub fn connections(&self) -> usize {
        self.outboxes.len()
    }

    pub fn send(&mut self, conn: usize, frame: &[u8]) -> Result<(), TransportError> {
        match &mut self.outboxes[conn] {
            Outbox::Local(tx) => tx.send(frame.to_vec()).map_err(|_| TransportError::Disconnected),
            Outbox::Tcp(s) => Ok(s.write_all(frame)?),
        }
    }

    pub fn recv(&self) -> Result<Inbound, TransportError> {
        self.inbox.recv().map_err(|_| TransportError::Disconnected)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Inbound, TransportError> {
        self.inbox.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout,
            RecvTimeoutError::Disconnected => TransportError::Disconnected,
        })
    }

    /// `Ok(None)` when nothing is queued.
    pub fn try_recv(&self) -> Result<Option<Inbound>, TransportError> {
        match self.inbox.try_recv() {
            Ok(m) => Ok(Some(m)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(TransportError::Disconnected),
        }
    }
}

/// A worker's end of its connection to the master.
pub struct WorkerLink {
    inner: LinkInner,
    closed: bool,
}

enum LinkInner {
    Local {
        conn: usize,
        tx: SyncSender<Inbound>,
        rx: Receiver<Vec<u8>>,
    },
    Tcp(TcpStream),
}

impl WorkerLink {
    pub fn send(&mut self, frame: Vec<u8>) -> Result<(), TransportError> {
        match &mut self.inner {
            LinkInner::Local { conn, tx, .. } => tx
                .send(Inbound {
                    conn: *conn,
                    frame: Ok(frame),
                })
                .map_err(|_| TransportError::Disconnected),
            LinkInner::Tcp(s) => Ok(s.write_all(&frame)?),
        }
    }

    pub fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        match &mut self.inner {
            LinkInner::Local { rx, .. } => rx.recv().map_err(|_| TransportError::Disconnected),
            LinkInner::Tcp(s) => read_frame(s),
        }
    }

    /// Marks an orderly shutdown; otherwise dropping the link reports a
    /// disconnect to the master.
    pub fn close(mut self) {
        self.closed = true;
    }

    /// Connects to a TCP master, retrying with exponential backoff.
    pub fn connect<A: ToSocketAddrs + Clone>(addr: A, attempts: u32) -> Result<Self, TransportError> {
        let mut wait = Duration::from_millis(10);
        let mut last = None;
        for _ in 0..attempts.max(1) {
            match TcpStream::connect(addr.clone()) {
                Ok(s) => {
                    s.set_nodelay(true)?;
                    return Ok(WorkerLink {
                        inner: LinkInner::Tcp(s),
                        closed: false,
                    });
                }
                Err(e) => {
                    last = Some(e);
                    thread::sleep(wait);
                    wait = (wait * 2).min(Duration::from_secs(1));
                }
            }
        }
        Err(last.map_or(TransportError::Disconnected, TransportError::Io))
    }
}

impl Drop for WorkerLink {
    fn drop(&mut self) {
        if self.closed {
            return;
        }
        if let LinkInner::Local { conn, tx, .. } = &self.inner {
            let _ = tx.send(Inbound {
                conn: *conn,
                frame: Err(TransportError::Disconnected),
            });
        }
    }
}

/// Bounded in-process channels for `m` workers. Senders block when a queue
/// holds `capacity` frames.
pub fn in_process(m: usize, capacity: usize) -> (MasterSide, Vec<WorkerLink>) {
    let (in_tx, inbox) = mpsc::sync_channel(capacity.max(1) * m.max(1));
    let mut outboxes = Vec::with_capacity(m);
    let mut links = Vec::with_capacity(m);
    for conn in 0..m {
        let (tx, rx) = mpsc::sync_channel(capacity.max(1));
        outboxes.push(Outbox::Local(tx));
        links.push(WorkerLink {
            inner: LinkInner::Local {
                conn,
                tx: in_tx.clone(),
                rx,
            },
            closed: false,
        });
    }
    (MasterSide { inbox, outboxes }, links)
}

/// Reads one complete frame (header and payload) from a stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, TransportError> {
    let mut frame = vec![0u8; HEADER_LEN];
    if let Err(e) = r.read_exact(&mut frame) {
        return Err(match e.kind() {
            io::ErrorKind::UnexpectedEof => TransportError::Disconnected,
            _ => e.into(),
        });
    }
    let header = decode_header(&frame)?;
    let len = usize::try_from(header.payload_len).map_err(|_| ProtocolError::LengthOverflow(header.payload_len))?;
    frame.resize(HEADER_LEN + len, 0);
    r.read_exact(&mut frame[HEADER_LEN..]).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TransportError::Disconnected,
        _ => TransportError::Io(e),
    })?;
    Ok(frame)
}

/// Accepts `m` worker connections on `listener`. Each connection gets a
/// reader thread feeding the shared inbox.
pub fn accept_workers(listener: &TcpListener, m: usize, capacity: usize) -> Result<MasterSide, TransportError> {
    let (in_tx, inbox) = mpsc::sync_channel(capacity.max(1) * m.max(1));
    let mut outboxes = Vec::with_capacity(m);
    for conn in 0..m {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        let mut reader = stream.try_clone()?;
        let tx = in_tx.clone();
        thread::spawn(move || loop {
            let frame = read_frame(&mut reader);
            let failed = frame.is_err();
            if tx.send(Inbound { conn, frame }).is_err() || failed {
                break;
            }
        });
        outboxes.push(Outbox::Tcp(stream));
    }
    Ok(MasterSide { inbox, outboxes })
}

/// Binds a listener, resolving port 0 to the assigned port.
pub fn bind(addr: &str) -> Result<(TcpListener, SocketAddr), TransportError> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::protocol::{decode, encode, Message};

    #[test]
    fn in_process_round_trip_and_disconnect() {
        let (mut master, mut links) = in_process(2, 2);
        let mut l1 = links.pop().unwrap();
        let l0 = links.pop().unwrap();
        l1.send(encode(&Message::Shutdown)).unwrap();
        let inbound = master.recv().unwrap();
        assert_eq!(inbound.conn, 1);
        assert_eq!(decode(&inbound.frame.unwrap(), 1).unwrap(), Message::Shutdown);
        master.send(1, &encode(&Message::Ack { version: 2 })).unwrap();
        assert_eq!(decode(&l1.recv().unwrap(), 1).unwrap(), Message::Ack { version: 2 });
        drop(l0);
        let inbound = master.recv().unwrap();
        assert_eq!(inbound.conn, 0);
        assert!(matches!(inbound.frame, Err(TransportError::Disconnected)));
        l1.close();
        // every link is gone, so the inbox reports disconnection
        assert!(matches!(master.try_recv(), Err(TransportError::Disconnected)));
    }

    #[test]
    fn tcp_frames_cross_loopback() {
        let (listener, addr) = bind("127.0.0.1:0").unwrap();
        let h = thread::spawn(move || {
            let mut link = WorkerLink::connect(addr, 10).unwrap();
            link.send(encode(&Message::PullRequest {
                worker: 0,
                last_version: 0,
            }))
            .unwrap();
            let reply = link.recv().unwrap();
            link.close();
            reply
        });
        let mut master = accept_workers(&listener, 1, 4).unwrap();
        let inbound = master.recv().unwrap();
        assert_eq!(
            decode(&inbound.frame.unwrap(), 1).unwrap(),
            Message::PullRequest {
                worker: 0,
                last_version: 0
            }
        );
        master.send(0, &encode(&Message::Ack { version: 1 })).unwrap();
        assert_eq!(decode(&h.join().unwrap(), 1).unwrap(), Message::Ack { version: 1 });
    }
}
