//! In-process and TCP message channels with traffic counters.

use std::io::{ErrorKind, Read, Write};
use std::marker::PhantomData;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError, SyncSender};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::message::message_from_frame;
use super::{decode_header, encode_message, protocol, Frame, Message, Result, Tag, TransportError, HEADER_LEN};
use crate::scalar::Scalar;

/// Frames an in-process sender may queue before it blocks.
pub const DEFAULT_HIGH_WATER_MARK: usize = 64;

/// Traffic seen by one endpoint.
///
/// `*_tensor_bytes` count raw tensor elements only (`numel * dtype size`);
/// `*_frame_bytes` count everything on the wire, headers included.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCounters {
    pub sent_messages: u64,
    pub recv_messages: u64,
    pub sent_tensor_bytes: u64,
    pub recv_tensor_bytes: u64,
    pub sent_frame_bytes: u64,
    pub recv_frame_bytes: u64,
    /// Tensor bytes sent, indexed by tag code.
    pub sent_by_tag: [u64; 8],
}

impl CommCounters {
    pub fn total_tensor_bytes(&self) -> u64 {
        self.sent_tensor_bytes + self.recv_tensor_bytes
    }

    pub fn merge(&mut self, o: &CommCounters) {
        self.sent_messages += o.sent_messages;
        self.recv_messages += o.recv_messages;
        self.sent_tensor_bytes += o.sent_tensor_bytes;
        self.recv_tensor_bytes += o.recv_tensor_bytes;
        self.sent_frame_bytes += o.sent_frame_bytes;
        self.recv_frame_bytes += o.recv_frame_bytes;
        for (a, b) in self.sent_by_tag.iter_mut().zip(o.sent_by_tag) {
            *a += b;
        }
    }

    pub fn sent_for(&self, tag: Tag) -> u64 {
        self.sent_by_tag[tag as usize]
    }
}

enum Link {
    Inproc { tx: SyncSender<Vec<u8>>, rx: Receiver<Vec<u8>>, timeout: Option<Duration> },
    Tcp(TcpStream),
}

/// One side of a bidirectional message link.
pub struct Channel<T> {
    link: Link,
    counters: CommCounters,
    _t: PhantomData<fn() -> T>,
}

/// Two connected in-process endpoints.
pub fn inproc_pair<T: Scalar>(high_water_mark: usize) -> (Channel<T>, Channel<T>) {
    let (tx_a, rx_b) = sync_channel(high_water_mark);
    let (tx_b, rx_a) = sync_channel(high_water_mark);
    (Channel::new(Link::Inproc { tx: tx_a, rx: rx_a, timeout: None }), Channel::new(Link::Inproc { tx: tx_b, rx: rx_b, timeout: None }))
}

fn io_err(e: std::io::Error) -> TransportError {
    match e.kind() {
        ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted | ErrorKind::BrokenPipe => TransportError::Closed,
        _ => TransportError::Transport(e.to_string()),
    }
}

pub fn tcp_connect<T: Scalar>(addr: impl ToSocketAddrs) -> Result<Channel<T>> {
    let stream = TcpStream::connect(addr).map_err(|e| TransportError::Transport(format!("connect: {e}")))?;
    Channel::from_stream(stream)
}

pub fn tcp_listen(addr: impl ToSocketAddrs) -> Result<Listener> {
    let inner = TcpListener::bind(addr).map_err(|e| TransportError::Transport(format!("bind: {e}")))?;
    Ok(Listener { inner })
}

pub struct Listener {
    inner: TcpListener,
}

impl Listener {
    pub fn local_addr(&self) -> Result<SocketAddr> {
        self.inner.local_addr().map_err(io_err)
    }

    pub fn accept<T: Scalar>(&self) -> Result<Channel<T>> {
        let (stream, _) = self.inner.accept().map_err(io_err)?;
        Channel::from_stream(stream)
    }
}

impl<T: Scalar> Channel<T> {
    fn new(link: Link) -> Self {
        Self { link, counters: CommCounters::default(), _t: PhantomData }
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true).map_err(io_err)?;
        Ok(Self::new(Link::Tcp(stream)))
    }

    /// Bounds how long [`recv`](Self::recv) waits; `None` waits forever.
    pub fn set_timeout(&mut self, t: Option<Duration>) -> Result<()> {
        match &mut self.link {
            Link::Inproc { timeout, .. } => *timeout = t,
            Link::Tcp(s) => s.set_read_timeout(t).map_err(io_err)?,
        }
        Ok(())
    }

    pub fn counters(&self) -> CommCounters {
        self.counters
    }

    pub fn send(&mut self, msg: &Message<T>) -> Result<()> {
        let bytes = encode_message(msg)?;
        match &mut self.link {
            Link::Inproc { tx, .. } => tx.send(bytes.clone()).map_err(|_| TransportError::Closed)?,
            Link::Tcp(s) => s.write_all(&bytes).map_err(io_err)?,
        }
        let tensor = msg.tensor_bytes() as u64;
        let c = &mut self.counters;
        c.sent_messages += 1;
        c.sent_frame_bytes += bytes.len() as u64;
        c.sent_tensor_bytes += tensor;
        c.sent_by_tag[msg.tag as usize] += tensor;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Message<T>> {
        let (msg, frame_len) = match &mut self.link {
            Link::Inproc { rx, timeout, .. } => {
                let bytes = match timeout {
                    None => rx.recv().map_err(|_| TransportError::Closed)?,
                    Some(t) => rx.recv_timeout(*t).map_err(|e| match e {
                        RecvTimeoutError::Timeout => TransportError::Transport("receive timed out".into()),
                        RecvTimeoutError::Disconnected => TransportError::Closed,
                    })?,
                };
                let (msg, used) = super::decode_message(&bytes)?;
                if used != bytes.len() {
                    return Err(protocol("frame followed by stray bytes"));
                }
                (msg, used)
            }
            Link::Tcp(s) => {
                let mut header = [0u8; HEADER_LEN];
                s.read_exact(&mut header).map_err(io_err)?;
                let (tag, round, client, batch, len) = decode_header(&header)?;
                let mut payload = vec![0u8; len];
                s.read_exact(&mut payload).map_err(io_err)?;
                (message_from_frame(Frame { tag, round, client, batch, payload })?, HEADER_LEN + len)
            }
        };
        let c = &mut self.counters;
        c.recv_messages += 1;
        c.recv_frame_bytes += frame_len as u64;
        c.recv_tensor_bytes += msg.tensor_bytes() as u64;
        Ok(msg)
    }

    /// Receives and insists on `tag`, surfacing a peer's error report.
    pub fn expect(&mut self, tag: Tag) -> Result<Message<T>> {
        let msg = self.recv()?;
        if msg.tag == tag {
            return Ok(msg);
        }
        if let super::Body::Control(super::Control::Error(e)) = &msg.body {
            return Err(protocol(format!("peer reported: {e}")));
        }
        Err(protocol(format!("expected {tag:?}, got {:?}", msg.tag)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;
    use crate::transport::Control;

    #[test]
    fn inproc_counts_both_sides() {
        let (mut a, mut b) = inproc_pair::<f32>(4);
        let t = TensorData::new(vec![2, 3], vec![1.0; 6]).unwrap();
        a.send(&Message::tensors(Tag::Activation, 0, 1, 0, vec![t.clone()])).unwrap();
        a.send(&Message::control(0, 1, Control::Ack)).unwrap();
        assert_eq!(b.recv().unwrap().into_tensors().unwrap(), vec![t]);
        assert!(matches!(b.expect(Tag::Activation), Err(TransportError::Protocol(_))));
        let (ca, cb) = (a.counters(), b.counters());
        assert_eq!((ca.sent_tensor_bytes, cb.recv_tensor_bytes), (24, 24));
        assert_eq!(ca.sent_frame_bytes, cb.recv_frame_bytes);
        assert_eq!(ca.sent_for(Tag::Activation), 24);
        drop(a);
        assert_eq!(b.recv().unwrap_err(), TransportError::Closed);
    }

    #[test]
    fn inproc_timeout() {
        let (_a, mut b) = inproc_pair::<f32>(1);
        b.set_timeout(Some(Duration::from_millis(10))).unwrap();
        assert!(matches!(b.recv(), Err(TransportError::Transport(_))));
    }

    #[test]
    fn tcp_round_trip_and_garbage() {
        let listener = tcp_listen("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = std::thread::spawn(move || {
            let mut c = tcp_connect::<f64>(addr).unwrap();
            let t = TensorData::new(vec![3], vec![1.0, -2.0, 3.5]).unwrap();
            c.send(&Message::tensors(Tag::ServerOutput, 2, 0, 5, vec![t])).unwrap();
            let mut raw = TcpStream::connect(addr).unwrap();
            raw.write_all(&[0xde, 0xad, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
            c.counters()
        });
        let mut s = listener.accept::<f64>().unwrap();
        let m = s.recv().unwrap();
        assert_eq!((m.tag, m.round, m.batch), (Tag::ServerOutput, 2, 5));
        assert_eq!(m.into_tensors().unwrap()[0].data, vec![1.0, -2.0, 3.5]);
        let sent = h.join().unwrap();
        assert_eq!(sent.sent_frame_bytes, s.counters().recv_frame_bytes);
        let mut bad = listener.accept::<f64>().unwrap();
        assert!(matches!(bad.recv(), Err(TransportError::Protocol(_))));
        assert_eq!(s.recv().unwrap_err(), TransportError::Closed);
    }
}
