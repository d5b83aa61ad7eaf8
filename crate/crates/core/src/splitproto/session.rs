use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};

use super::frame::{serialize_frame, RepresentationFrame};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::tinylm::{ClientPart, ServerPart};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    InProcess,
    /// TCP on the loopback interface, one in-flight request.
    LocalSocket,
}

/// Every frame sent during a session, in order.
#[derive(Clone, Debug, Default)]
pub struct SessionLog {
    pub frames: Vec<Vec<u8>>,
}

impl SessionLog {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }
}

const STATUS_OK: u8 = 0;
const STATUS_ERR: u8 = 1;

fn transport_err(e: io::Error) -> Error {
    Error::Transport {
        message: e.to_string(),
        retriable: true,
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Decode and run one request on the server half.
fn serve_frame(server: &ServerPart, bytes: &[u8]) -> Result<Tensor> {
    let frame = RepresentationFrame::decode(bytes)?;
    if frame.model_id != server.model_id() {
        return Err(Error::ModelMismatch);
    }
    server.forward(&frame.to_trace())
}

fn write_response(w: &mut impl Write, result: &Result<Tensor>) -> io::Result<()> {
    let mut buf = Vec::new();
    match result {
        Ok(t) => {
            buf.push(STATUS_OK);
            buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Err(e) => {
            let msg = e.to_string();
            buf.push(STATUS_ERR);
            buf.extend_from_slice(&(msg.len() as u32).to_le_bytes());
            buf.extend_from_slice(msg.as_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()
}

fn serve_connection(server: &ServerPart, mut stream: TcpStream) -> io::Result<()> {
    loop {
        let len = match read_u32(&mut stream) {
            Ok(n) => n as usize,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let mut frame = vec![0u8; len];
        stream.read_exact(&mut frame)?;
        write_response(&mut stream, &serve_frame(server, &frame))?;
    }
}

struct SocketLink {
    stream: TcpStream,
    worker: Option<JoinHandle<()>>,
}

impl SocketLink {
    fn open(server: Arc<ServerPart>) -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").map_err(transport_err)?;
        let addr = listener.local_addr().map_err(transport_err)?;
        let worker = thread::spawn(move || {
            if let Ok((stream, _)) = listener.accept() {
                if let Err(e) = serve_connection(&server, stream) {
                    log::warn!("split server connection ended: {e}");
                }
            }
        });
        let stream = TcpStream::connect(addr).map_err(transport_err)?;
        stream.set_nodelay(true).map_err(transport_err)?;
        Ok(Self {
            stream,
            worker: Some(worker),
        })
    }

    fn request(&mut self, frame: &[u8]) -> Result<Tensor> {
        let s = &mut self.stream;
        s.write_all(&(frame.len() as u32).to_le_bytes()).map_err(transport_err)?;
        s.write_all(frame).map_err(transport_err)?;
        s.flush().map_err(transport_err)?;
        let mut status = [0u8; 1];
        s.read_exact(&mut status).map_err(transport_err)?;
        match status[0] {
            STATUS_OK => {
                let rows = read_u32(s).map_err(transport_err)? as usize;
                let cols = read_u32(s).map_err(transport_err)? as usize;
                let mut raw = vec![0u8; rows * cols * 8];
                s.read_exact(&mut raw).map_err(transport_err)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Ok(Tensor::from_vec(rows, cols, data))
            }
            STATUS_ERR => {
                let n = read_u32(s).map_err(transport_err)? as usize;
                let mut msg = vec![0u8; n];
                s.read_exact(&mut msg).map_err(transport_err)?;
                Err(Error::invalid(format!(
                    "server rejected frame: {}",
                    String::from_utf8_lossy(&msg)
                )))
            }
            other => Err(Error::Transport {
                message: format!("unknown response status {other}"),
                retriable: false,
            }),
        }
    }

    /// Simulate a dropped connection.
    fn sever(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

impl Drop for SocketLink {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// One client talking to one server over a chosen transport. The client
/// only ever sends encoded frames; the server only ever sees those bytes.
pub struct Session {
    client: ClientPart,
    server: Arc<ServerPart>,
    link: Option<SocketLink>,
    log: SessionLog,
}

impl Session {
    pub fn new(client: ClientPart, server: ServerPart, transport: Transport) -> Result<Self> {
        if client.model_id() != server.model_id() || client.tap() != server.tap() {
            return Err(Error::invalid("client and server come from different splits"));
        }
        let server = Arc::new(server);
        let link = match transport {
            Transport::InProcess => None,
            Transport::LocalSocket => Some(SocketLink::open(Arc::clone(&server))?),
        };
        Ok(Self {
            client,
            server,
            link,
            log: SessionLog::default(),
        })
    }

    pub fn transport(&self) -> Transport {
        if self.link.is_some() {
            Transport::LocalSocket
        } else {
            Transport::InProcess
        }
    }

    /// Client forward, one frame over the wire, server forward.
    pub fn forward(&mut self, tokens: &[u32]) -> Result<Tensor> {
        let trace = self.client.forward(tokens)?;
        let frame = serialize_frame(&trace, self.client.model_id())?;
        self.log.frames.push(frame);
        let frame = self.log.frames.last().expect("just pushed");
        match &mut self.link {
            None => serve_frame(&self.server, frame),
            Some(link) => link.request(frame),
        }
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    /// Drop the socket connection; later requests fail with a retriable
    /// transport error. No effect in-process.
    pub fn interrupt(&mut self) {
        if let Some(link) = &mut self.link {
            link.sever();
        }
    }
}

/// One-shot session: returns the server's logits for `tokens`.
pub fn run_session(
    client: &ClientPart,
    server: &ServerPart,
    tokens: &[u32],
    transport: Transport,
) -> Result<Tensor> {
    let mut s = Session::new(client.clone(), server.clone(), transport)?;
    s.forward(tokens)
}
