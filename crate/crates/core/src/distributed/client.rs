use std::io::{self, ErrorKind};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use log::debug;

use super::wire::{write_message, FrameReader, Incoming, Message, CHECKSUM_MISMATCH};
use crate::error::{ResomError, Result};

/// Blocking request/response connection to one node.
pub struct NodeClient {
    addr: String,
    writer: TcpStream,
    reader: FrameReader<TcpStream>,
    timeout: Duration,
}

fn io_to_transfer(addr: &str, timeout: Duration, e: io::Error) -> ResomError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => ResomError::Transfer(format!(
            "{addr}: no reply within {} ms",
            timeout.as_millis()
        )),
        _ => ResomError::Transfer(format!("{addr}: {e}")),
    }
}

impl NodeClient {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self> {
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| ResomError::Transfer(format!("{addr}: {e}")))?
            .next()
            .ok_or_else(|| ResomError::Transfer(format!("{addr}: no address")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout)
            .map_err(|e| io_to_transfer(addr, timeout, e))?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(Self {
            addr: addr.to_string(),
            reader: FrameReader::new(stream.try_clone()?),
            writer: stream,
            timeout,
        })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    /// Sends `msg` and waits for the reply carrying the same request id.
    /// A request the peer rejects with a checksum error is sent once more.
    /// `ERROR` replies become [`ResomError::Remote`].
    pub fn request(&mut self, request_id: u32, msg: &Message) -> Result<Message> {
        let mut resent = false;
        self.send(request_id, msg)?;
        loop {
            let incoming = self
                .reader
                .next_incoming()
                .map_err(|e| io_to_transfer(&self.addr, self.timeout, e))?
                .ok_or_else(|| ResomError::Transfer(format!("{}: connection closed", self.addr)))?;
            let frame = match incoming {
                Incoming::Frame(f) if f.request_id == request_id => f,
                Incoming::Frame(f) => {
                    debug!("{}: ignoring reply for request {}", self.addr, f.request_id);
                    continue;
                }
                Incoming::Malformed {
                    request_id: Some(r),
                    reason,
                } if r == request_id => {
                    return Err(ResomError::Transfer(format!(
                        "{}: corrupt reply ({reason})",
                        self.addr
                    )));
                }
                Incoming::Malformed { reason, .. } => {
                    debug!("{}: dropped malformed bytes ({reason})", self.addr);
                    continue;
                }
            };
            match Message::from_frame(&frame)? {
                Message::Error { text } if text == CHECKSUM_MISMATCH && !resent => {
                    resent = true;
                    self.send(request_id, msg)?;
                }
                Message::Error { text } if text == CHECKSUM_MISMATCH => {
                    return Err(ResomError::Transfer(format!(
                        "{}: checksum mismatch after retransmission",
                        self.addr
                    )));
                }
                Message::Error { text } => {
                    return Err(ResomError::Remote(format!("{}: {text}", self.addr)))
                }
                reply => return Ok(reply),
            }
        }
    }

    fn send(&mut self, request_id: u32, msg: &Message) -> Result<()> {
        write_message(&mut self.writer, request_id, msg)
            .map_err(|e| io_to_transfer(&self.addr, self.timeout, e))
    }

    /// Writes raw bytes on the connection, bypassing framing.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<()> {
        use std::io::Write;
        self.writer.write_all(bytes)?;
        Ok(())
    }
}
