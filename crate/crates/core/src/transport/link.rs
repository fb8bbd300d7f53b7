use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use super::wire::{read_frame, write_frame, Message, WireMessage};
use crate::error::TransportError;

/// Server end of a star topology with one endpoint per client.
pub trait ServerLink {
    fn clients(&self) -> usize;

    /// Receive one `Hello` from every client and return them in client
    /// order.
    fn accept_hellos(&mut self) -> Result<Vec<WireMessage>, TransportError>;

    fn send(&mut self, client: usize, msg: &WireMessage) -> Result<(), TransportError>;

    fn recv(&mut self, client: usize) -> Result<WireMessage, TransportError>;
}

pub trait ClientLink {
    fn send(&mut self, msg: &WireMessage) -> Result<(), TransportError>;

    fn recv(&mut self) -> Result<WireMessage, TransportError>;
}

fn hello_id(msg: &WireMessage) -> Result<usize, TransportError> {
    match Message::from_wire(msg)? {
        Message::Hello { client_id } => Ok(client_id),
        other => Err(TransportError::Protocol(format!("expected Hello, got {:?}", other.kind()))),
    }
}

/// In-process link over channels. Messages still travel as encoded
/// frames, so both links exercise the same byte path.
pub struct InProcessServer {
    to_clients: Vec<Sender<Vec<u8>>>,
    from_clients: Vec<Receiver<Vec<u8>>>,
    timeout: Duration,
}

/// Client end; waits for the server without a deadline (the server owns
/// the round timeout).
pub struct InProcessClient {
    to_server: Sender<Vec<u8>>,
    from_server: Receiver<Vec<u8>>,
}

pub fn in_process(clients: usize, timeout: Duration) -> (InProcessServer, Vec<InProcessClient>) {
    let mut server = InProcessServer {
        to_clients: Vec::with_capacity(clients),
        from_clients: Vec::with_capacity(clients),
        timeout,
    };
    let mut ends = Vec::with_capacity(clients);
    for _ in 0..clients {
        let (down_tx, down_rx) = mpsc::channel();
        let (up_tx, up_rx) = mpsc::channel();
        server.to_clients.push(down_tx);
        server.from_clients.push(up_rx);
        ends.push(InProcessClient {
            to_server: up_tx,
            from_server: down_rx,
        });
    }
    (server, ends)
}

fn recv_frame(rx: &Receiver<Vec<u8>>, timeout: Duration, who: usize) -> Result<WireMessage, TransportError> {
    match rx.recv_timeout(timeout) {
        Ok(frame) => read_frame(&mut frame.as_slice()),
        Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout(who)),
        Err(RecvTimeoutError::Disconnected) => Err(TransportError::Disconnected),
    }
}

impl ServerLink for InProcessServer {
    fn clients(&self) -> usize {
        self.to_clients.len()
    }

    fn accept_hellos(&mut self) -> Result<Vec<WireMessage>, TransportError> {
        (0..self.clients())
            .map(|c| {
                let msg = self.recv(c)?;
                let id = hello_id(&msg)?;
                if id != c {
                    return Err(TransportError::Protocol(format!("endpoint {c} introduced itself as {id}")));
                }
                Ok(msg)
            })
            .collect()
    }

    fn send(&mut self, client: usize, msg: &WireMessage) -> Result<(), TransportError> {
        self.to_clients[client]
            .send(msg.to_frame())
            .map_err(|_| TransportError::Disconnected)
    }

    fn recv(&mut self, client: usize) -> Result<WireMessage, TransportError> {
        recv_frame(&self.from_clients[client], self.timeout, client)
    }
}

impl ClientLink for InProcessClient {
    fn send(&mut self, msg: &WireMessage) -> Result<(), TransportError> {
        self.to_server.send(msg.to_frame()).map_err(|_| TransportError::Disconnected)
    }

    fn recv(&mut self) -> Result<WireMessage, TransportError> {
        let frame = self.from_server.recv().map_err(|_| TransportError::Disconnected)?;
        read_frame(&mut frame.as_slice())
    }
}

fn map_timeout(e: TransportError, who: usize) -> TransportError {
    match e {
        TransportError::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
            TransportError::Timeout(who)
        }
        other => other,
    }
}

/// TCP server end. Clients are indexed by the id in their `Hello`.
pub struct TcpServerLink {
    listener: TcpListener,
    streams: Vec<Option<TcpStream>>,
    timeout: Duration,
}

impl TcpServerLink {
    pub fn bind(addr: impl ToSocketAddrs, clients: usize, timeout: Duration) -> Result<Self, TransportError> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            streams: (0..clients).map(|_| None).collect(),
            timeout,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.listener.local_addr()?)
    }

    fn stream(&mut self, client: usize) -> Result<&mut TcpStream, TransportError> {
        self.streams
            .get_mut(client)
            .and_then(Option::as_mut)
            .ok_or_else(|| TransportError::Protocol(format!("client {client} is not connected")))
    }
}

impl ServerLink for TcpServerLink {
    fn clients(&self) -> usize {
        self.streams.len()
    }

    fn accept_hellos(&mut self) -> Result<Vec<WireMessage>, TransportError> {
        let n = self.clients();
        let deadline = Instant::now() + self.timeout;
        let mut hellos: Vec<Option<WireMessage>> = vec![None; n];
        self.listener.set_nonblocking(true)?;
        let mut connected = 0;
        while connected < n {
            match self.listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    stream.set_read_timeout(Some(self.timeout))?;
                    let msg = read_frame(&mut stream).map_err(|e| map_timeout(e, connected))?;
                    let id = hello_id(&msg)?;
                    if id >= n {
                        return Err(TransportError::Protocol(format!("client id {id} outside 0..{n}")));
                    }
                    if hellos[id].is_some() {
                        return Err(TransportError::Protocol(format!("client {id} connected twice")));
                    }
                    hellos[id] = Some(msg);
                    self.streams[id] = Some(stream);
                    connected += 1;
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let missing = hellos.iter().position(Option::is_none).unwrap_or(0);
                        return Err(TransportError::Timeout(missing));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.listener.set_nonblocking(false)?;
        Ok(hellos.into_iter().map(|h| h.expect("all connected")).collect())
    }

    fn send(&mut self, client: usize, msg: &WireMessage) -> Result<(), TransportError> {
        write_frame(self.stream(client)?, msg)
    }

    fn recv(&mut self, client: usize) -> Result<WireMessage, TransportError> {
        read_frame(self.stream(client)?).map_err(|e| map_timeout(e, client))
    }
}

pub struct TcpClientLink {
    stream: TcpStream,
}

impl TcpClientLink {
    /// Connect, retrying until `timeout` while the server comes up. Reads
    /// block without a deadline; the server owns the round timeout.
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, TransportError> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let deadline = Instant::now() + timeout;
        loop {
            let mut last = None;
            for a in &addrs {
                match TcpStream::connect(a) {
                    Ok(stream) => {
                        stream.set_nodelay(true)?;
                        return Ok(Self { stream });
                    }
                    Err(e) => last = Some(e),
                }
            }
            if Instant::now() >= deadline {
                return Err(last.map_or(TransportError::Disconnected, TransportError::Io));
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl ClientLink for TcpClientLink {
    fn send(&mut self, msg: &WireMessage) -> Result<(), TransportError> {
        write_frame(&mut self.stream, msg)
    }

    fn recv(&mut self) -> Result<WireMessage, TransportError> {
        read_frame(&mut self.stream)
    }
}
