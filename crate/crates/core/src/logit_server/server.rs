//! Reference server: replays one model of a recorded trace to remote
//! clients. Each connection is one session and runs on its own thread;
//! requests on a connection are answered strictly in order.

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::protocol::{
    read_frame, write_frame, ClientMessage, ErrorKind, ErrorReply, Hello, HelloReply,
    LogitRequest, LogitResponse, ProtocolError, ServerMessage, WantChannels, PROTOCOL_VERSION,
};
use crate::providers::{ProviderError, Trace};

/// What the server serves: one model column of a trace.
#[derive(Debug, Clone)]
pub struct TraceBackend {
    trace: Arc<Trace>,
    model: usize,
    model_name: String,
}

impl TraceBackend {
    pub fn new(trace: Arc<Trace>, model: usize, model_name: impl Into<String>) -> Result<Self, ProviderError> {
        if model >= trace.num_models() {
            return Err(ProviderError::InvalidTrace(format!(
                "model {model} not in trace with {} models",
                trace.num_models()
            )));
        }
        Ok(Self {
            trace,
            model,
            model_name: model_name.into(),
        })
    }

    pub fn handshake(&self, hello: &Hello) -> Result<HelloReply, ErrorReply> {
        if hello.protocol_version != PROTOCOL_VERSION {
            return Err(ErrorReply {
                kind: ErrorKind::ProtocolVersionMismatch,
                message: format!(
                    "client speaks version {}, server speaks {PROTOCOL_VERSION}",
                    hello.protocol_version
                ),
            });
        }
        let vocab = self.trace.vocabulary();
        Ok(HelloReply {
            protocol_version: PROTOCOL_VERSION,
            vocabulary: vocab.tokens().to_vec(),
            fingerprint: vocab.fingerprint_hex(),
            model_name: self.model_name.clone(),
        })
    }
}

/// Per-connection protocol state.
#[derive(Debug)]
pub struct Session {
    backend: TraceBackend,
    handshaken: bool,
    session_id: Option<String>,
    last_step: Option<u64>,
}

impl Session {
    pub fn new(backend: TraceBackend) -> Self {
        Self {
            backend,
            handshaken: false,
            session_id: None,
            last_step: None,
        }
    }

    pub fn handle(&mut self, msg: ClientMessage) -> ServerMessage {
        match msg {
            ClientMessage::Hello(hello) => match self.backend.handshake(&hello) {
                Ok(reply) => {
                    self.handshaken = true;
                    ServerMessage::Hello(reply)
                }
                Err(e) => ServerMessage::Error(e),
            },
            ClientMessage::Logits(req) => match self.serve_logits(&req) {
                Ok(resp) => ServerMessage::Logits(resp),
                Err(e) => ServerMessage::Error(e),
            },
        }
    }

    pub fn serve_logits(&mut self, req: &LogitRequest) -> Result<LogitResponse, ErrorReply> {
        let err = |kind, message: String| ErrorReply { kind, message };
        if !self.handshaken {
            return Err(err(ErrorKind::HandshakeRequired, "send hello first".into()));
        }
        match &self.session_id {
            Some(id) if *id != req.session_id => {
                return Err(err(
                    ErrorKind::UnknownSession,
                    format!("connection is bound to session {id:?}, got {:?}", req.session_id),
                ));
            }
            _ => {}
        }
        let trace = &self.backend.trace;
        let pair = usize::try_from(req.step)
            .ok()
            .and_then(|s| trace.pair(s, self.backend.model))
            .ok_or_else(|| {
                err(
                    ErrorKind::TraceExhausted,
                    format!("step {} beyond trace of {} steps", req.step, trace.num_steps()),
                )
            })?;
        if let Some(last) = self.last_step {
            if req.step <= last {
                return Err(err(
                    ErrorKind::OutOfOrderStep,
                    format!("step {} does not follow step {last}", req.step),
                ));
            }
        }
        self.session_id.get_or_insert_with(|| req.session_id.clone());
        self.last_step = Some(req.step);

        let perturbed = match req.want_channels {
            WantChannels::Both => Some(pair.perturbed().as_slice().to_vec()),
            WantChannels::OriginalOnly => None,
        };
        Ok(LogitResponse {
            session_id: req.session_id.clone(),
            step: req.step,
            original: pair.original().as_slice().to_vec(),
            perturbed,
            vocab_fingerprint: trace.vocabulary().fingerprint_hex(),
        })
    }
}

fn serve_connection(stream: TcpStream, backend: TraceBackend) -> Result<(), ProtocolError> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut session = Session::new(backend);
    loop {
        let msg: ClientMessage = match read_frame(&mut reader) {
            Ok(m) => m,
            Err(ProtocolError::Closed) => return Ok(()),
            Err(ProtocolError::Json(e)) => {
                let reply = ServerMessage::Error(ErrorReply {
                    kind: ErrorKind::BadRequest,
                    message: e.to_string(),
                });
                write_frame(&mut writer, &reply)?;
                continue;
            }
            Err(e) => return Err(e),
        };
        let reply = session.handle(msg);
        write_frame(&mut writer, &reply)?;
        if let ServerMessage::Error(ErrorReply {
            kind: ErrorKind::ProtocolVersionMismatch,
            ..
        }) = reply
        {
            return Ok(());
        }
    }
}

/// A listening server. Dropping it stops accepting new connections.
pub struct RunningServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl RunningServer {
    pub fn bind<A: ToSocketAddrs>(addr: A, backend: TraceBackend) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = Arc::clone(&stop);
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let backend = backend.clone();
                std::thread::spawn(move || {
                    let _ = serve_connection(stream, backend);
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        if let Some(h) = self.accept.take() {
            self.stop.store(true, Ordering::SeqCst);
            // Wake the blocking accept.
            let _ = TcpStream::connect(self.addr);
            let _ = h.join();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}
