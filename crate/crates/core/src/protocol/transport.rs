//! Datagram transport for Q3P frames. The simulator uses an in-process
//! queue; a UDP loopback socket pair is available for live runs. Both carry
//! the same bytes, so results do not depend on the choice.

use std::collections::VecDeque;
use std::io;
use std::net::UdpSocket;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Largest frame the transport accepts (12 + 249 + 16).
pub const MAX_DATAGRAM: usize = 277;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Sim,
    Udp,
}

pub trait Datagram {
    fn send(&mut self, frame: &[u8]) -> io::Result<()>;
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>>;
}

/// FIFO loopback channel.
#[derive(Debug, Default)]
pub struct SimChannel {
    queue: VecDeque<Vec<u8>>,
}

impl SimChannel {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Datagram for SimChannel {
    fn send(&mut self, frame: &[u8]) -> io::Result<()> {
        if frame.len() > MAX_DATAGRAM {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "datagram too large"));
        }
        self.queue.push_back(frame.to_vec());
        Ok(())
    }

    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        Ok(self.queue.pop_front())
    }
}

/// Connected UDP socket pair on 127.0.0.1.
pub struct UdpLoopback {
    tx: UdpSocket,
    rx: UdpSocket,
}

impl UdpLoopback {
    pub fn bind() -> io::Result<Self> {
        let rx = UdpSocket::bind("127.0.0.1:0")?;
        let tx = UdpSocket::bind("127.0.0.1:0")?;
        tx.connect(rx.local_addr()?)?;
        rx.set_read_timeout(Some(Duration::from_secs(1)))?;
        Ok(Self { tx, rx })
    }
}

impl Datagram for UdpLoopback {
    fn send(&mut self, frame: &[u8]) -> io::Result<()> {
        if frame.len() > MAX_DATAGRAM {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "datagram too large"));
        }
        self.tx.send(frame).map(|_| ())
    }

    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        let mut buf = [0u8; MAX_DATAGRAM + 1];
        match self.rx.recv(&mut buf) {
            Ok(n) => Ok(Some(buf[..n].to_vec())),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

pub fn open(kind: TransportKind) -> io::Result<Box<dyn Datagram + Send>> {
    Ok(match kind {
        TransportKind::Sim => Box::new(SimChannel::new()),
        TransportKind::Udp => Box::new(UdpLoopback::bind()?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exercise(t: &mut dyn Datagram) {
        let frames: Vec<Vec<u8>> = (0..20u8).map(|i| vec![i; 28 + i as usize]).collect();
        for f in &frames {
            t.send(f).unwrap();
            assert_eq!(t.recv().unwrap().as_ref(), Some(f));
        }
        assert!(t.send(&[0u8; MAX_DATAGRAM + 1]).is_err());
    }

    #[test]
    fn sim_channel_fifo() {
        let mut c = SimChannel::new();
        c.send(b"a").unwrap();
        c.send(b"b").unwrap();
        assert_eq!(c.recv().unwrap().unwrap(), b"a");
        assert_eq!(c.recv().unwrap().unwrap(), b"b");
        assert_eq!(c.recv().unwrap(), None);
        exercise(&mut c);
    }

    #[test]
    fn udp_matches_sim() {
        let Ok(mut u) = UdpLoopback::bind() else {
            // No loopback networking in this environment.
            return;
        };
        exercise(&mut u);
    }
}
