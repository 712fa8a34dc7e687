//! Transports carrying the framed wire protocol between the round engine
//! and client state machines. The in-process transport is deterministic
//! and is the default for tests and experiments; the socket transport
//! pushes the very same frame bytes through TCP with one thread per
//! client.

use std::collections::VecDeque;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use crate::federation::engine::{ClientRound, LinkError, RoundLink};
use crate::wire::{decode_frame, encode_frame, read_frame, read_frame_counted, Message, WireError};
use crate::ClientId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    #[serde(alias = "inproc")]
    InProcess,
    Socket,
}

const SOCKET_TIMEOUT: Duration = Duration::from_secs(30);

/// Deterministic single-process link: the client state machine runs
/// inline, replies queue in order, and every message still passes through
/// the byte codec so both transports exercise identical frames.
pub struct InProcessLink<'a> {
    client: &'a mut ClientRound,
    outbox: VecDeque<Vec<u8>>,
}

impl<'a> InProcessLink<'a> {
    pub fn new(client: &'a mut ClientRound) -> Self {
        Self {
            client,
            outbox: VecDeque::new(),
        }
    }
}

impl RoundLink for InProcessLink<'_> {
    fn client_id(&self) -> ClientId {
        self.client.client_id()
    }

    fn send(&mut self, msg: &Message) -> Result<usize, LinkError> {
        let frame = encode_frame(msg);
        let n = frame.len();
        let (decoded, used) = decode_frame(&frame)?;
        debug_assert_eq!(used, n);
        let replies = self
            .client
            .handle(&decoded)
            .map_err(|e| LinkError::Client(e.to_string()))?;
        for r in replies {
            self.outbox.push_back(encode_frame(&r));
        }
        Ok(n)
    }

    fn recv(&mut self) -> Result<(Message, usize), LinkError> {
        match self.outbox.pop_front() {
            None => Err(LinkError::Dropped),
            Some(frame) => {
                let n = frame.len();
                let (msg, used) = decode_frame(&frame)?;
                debug_assert_eq!(used, n);
                Ok((msg, n))
            }
        }
    }
}

/// Server end of one TCP connection.
pub struct SocketLink {
    id: ClientId,
    stream: TcpStream,
}

fn is_disconnect(e: &std::io::Error) -> bool {
    matches!(
        e.kind(),
        std::io::ErrorKind::BrokenPipe
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::ConnectionAborted
            | std::io::ErrorKind::UnexpectedEof
    )
}

impl RoundLink for SocketLink {
    fn client_id(&self) -> ClientId {
        self.id
    }

    fn send(&mut self, msg: &Message) -> Result<usize, LinkError> {
        let frame = encode_frame(msg);
        match self.stream.write_all(&frame) {
            Ok(()) => Ok(frame.len()),
            Err(e) if is_disconnect(&e) => Err(LinkError::Dropped),
            Err(e) => Err(LinkError::Io(e.to_string())),
        }
    }

    fn recv(&mut self) -> Result<(Message, usize), LinkError> {
        match read_frame_counted(&mut self.stream) {
            Ok(Some((msg, n))) => Ok((msg, n)),
            Ok(None) => Err(LinkError::Dropped),
            Err(WireError::Io(e)) if is_disconnect(&e) => Err(LinkError::Dropped),
            Err(WireError::FramingError) => Err(LinkError::Dropped),
            Err(e) => Err(LinkError::Wire(e)),
        }
    }
}

fn client_pump(mut stream: TcpStream, mut client: ClientRound) -> ClientRound {
    let _ = stream.set_read_timeout(Some(SOCKET_TIMEOUT));
    let _ = stream.set_nodelay(true);
    loop {
        let msg = match read_frame(&mut stream) {
            Ok(Some(m)) => m,
            _ => break,
        };
        let replies = match client.handle(&msg) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("client {} failed: {e}", client.client_id());
                break;
            }
        };
        let mut write_failed = false;
        for r in &replies {
            if stream.write_all(&encode_frame(r)).is_err() {
                write_failed = true;
                break;
            }
        }
        if write_failed {
            break;
        }
        // A silenced client goes offline: close the connection so the
        // server sees the dropout.
        if client.is_silent() {
            break;
        }
    }
    client
}

/// Builds one link per client, runs `f` over them, and hands the client
/// state machines back (memoization survives the round).
pub fn with_links<R>(
    mode: TransportMode,
    mut clients: Vec<ClientRound>,
    f: impl for<'a> FnOnce(&mut [Box<dyn RoundLink + 'a>]) -> R,
) -> (R, Vec<ClientRound>) {
    clients.sort_by_key(ClientRound::client_id);
    match mode {
        TransportMode::InProcess => {
            let result = {
                let mut links: Vec<Box<dyn RoundLink + '_>> = clients
                    .iter_mut()
                    .map(|c| Box::new(InProcessLink::new(c)) as Box<dyn RoundLink + '_>)
                    .collect();
                f(&mut links)
            };
            (result, clients)
        }
        TransportMode::Socket => {
            let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
            let addr = listener.local_addr().expect("local addr");
            let n = clients.len();
            let handles: Vec<std::thread::JoinHandle<ClientRound>> = clients
                .into_iter()
                .map(|client| {
                    std::thread::spawn(move || {
                        let mut stream = TcpStream::connect(addr).expect("connect loopback");
                        let hello = Message::Hello {
                            client: client.client_id(),
                        };
                        stream
                            .write_all(&encode_frame(&hello))
                            .expect("send hello");
                        client_pump(stream, client)
                    })
                })
                .collect();

            let mut links: Vec<SocketLink> = (0..n)
                .map(|_| {
                    let (stream, _) = listener.accept().expect("accept client");
                    stream
                        .set_read_timeout(Some(SOCKET_TIMEOUT))
                        .expect("read timeout");
                    let _ = stream.set_nodelay(true);
                    let mut s = stream;
                    let id = match read_frame(&mut s) {
                        Ok(Some(Message::Hello { client })) => client,
                        other => panic!("expected hello, got {other:?}"),
                    };
                    SocketLink { id, stream: s }
                })
                .collect();
            links.sort_by_key(|l| l.id);
            let result = {
                let mut boxed: Vec<Box<dyn RoundLink + '_>> = links
                    .into_iter()
                    .map(|l| Box::new(l) as Box<dyn RoundLink + '_>)
                    .collect();
                let r = f(&mut boxed);
                drop(boxed); // close server ends so pumps see EOF
                r
            };
            let clients = handles
                .into_iter()
                .map(|h| h.join().expect("client thread"))
                .collect();
            (result, clients)
        }
    }
}
