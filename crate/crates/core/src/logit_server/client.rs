use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::protocol::{
    read_frame, write_frame, ClientMessage, ErrorKind, Hello, LogitRequest, ProtocolError,
    RequestContext, ServerMessage, WantChannels, PROTOCOL_VERSION,
};
use crate::numerics::{LogitPair, LogitVector};
use crate::providers::{
    DecodingContext, LogitProvider, ProviderDescriptor, ProviderError, ProviderKind, Vocabulary,
};

/// Default per-request timeout. Expiry fails the step.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

/// Provider backed by a logit server over TCP. One connection carries one
/// session; [`RemoteProvider::reconnect`] starts a fresh one.
pub struct RemoteProvider {
    provider_id: u32,
    endpoint: String,
    timeout: Duration,
    vocabulary: Vocabulary,
    model_name: String,
    session_id: String,
    session_counter: u64,
    conn: Connection,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("provider_id", &self.provider_id)
            .field("endpoint", &self.endpoint)
            .field("model_name", &self.model_name)
            .field("session_id", &self.session_id)
            .finish()
    }
}

impl RemoteProvider {
    pub fn connect(provider_id: u32, endpoint: &str) -> Result<Self, ProviderError> {
        Self::connect_with_timeout(provider_id, endpoint, DEFAULT_TIMEOUT)
    }

    pub fn connect_with_timeout(
        provider_id: u32,
        endpoint: &str,
        timeout: Duration,
    ) -> Result<Self, ProviderError> {
        let (conn, vocabulary, model_name) = handshake(provider_id, endpoint, timeout)?;
        Ok(Self {
            provider_id,
            endpoint: endpoint.to_owned(),
            timeout,
            vocabulary,
            model_name,
            session_id: format!("provider-{provider_id}-0"),
            session_counter: 0,
            conn,
        })
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    /// Drops the connection and handshakes again so step numbering can
    /// restart at zero.
    pub fn reconnect(&mut self) -> Result<(), ProviderError> {
        let (conn, vocabulary, model_name) = handshake(self.provider_id, &self.endpoint, self.timeout)?;
        if vocabulary != self.vocabulary {
            return Err(ProviderError::VocabularyMismatch {
                provider_id: self.provider_id,
                expected: self.vocabulary.fingerprint_hex(),
                found: vocabulary.fingerprint_hex(),
            });
        }
        self.conn = conn;
        self.model_name = model_name;
        self.session_counter += 1;
        self.session_id = format!("provider-{}-{}", self.provider_id, self.session_counter);
        Ok(())
    }

    fn unavailable(&self, reason: impl std::fmt::Display) -> ProviderError {
        ProviderError::ProviderUnavailable {
            provider_id: self.provider_id,
            reason: reason.to_string(),
        }
    }
}

fn handshake(
    provider_id: u32,
    endpoint: &str,
    timeout: Duration,
) -> Result<(Connection, Vocabulary, String), ProviderError> {
    let unavailable = |reason: String| ProviderError::ProviderUnavailable {
        provider_id,
        reason,
    };
    let addr = endpoint
        .to_socket_addrs()
        .map_err(|e| unavailable(format!("{endpoint}: {e}")))?
        .next()
        .ok_or_else(|| unavailable(format!("{endpoint}: no address")))?;
    let stream = TcpStream::connect_timeout(&addr, timeout)
        .map_err(|e| unavailable(format!("{endpoint}: {e}")))?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    let mut conn = Connection {
        reader: BufReader::new(stream.try_clone()?),
        writer: BufWriter::new(stream),
    };
    let hello = ClientMessage::Hello(Hello {
        protocol_version: PROTOCOL_VERSION,
        client_name: format!("ated-provider-{provider_id}"),
    });
    write_frame(&mut conn.writer, &hello).map_err(|e| unavailable(e.to_string()))?;
    let reply: ServerMessage = read_frame(&mut conn.reader).map_err(|e| unavailable(e.to_string()))?;
    let reply = match reply {
        ServerMessage::Hello(r) => r,
        ServerMessage::Error(e) => return Err(unavailable(format!("{:?}: {}", e.kind, e.message))),
        ServerMessage::Logits(_) => return Err(unavailable("unexpected logits during handshake".into())),
    };
    if reply.protocol_version != PROTOCOL_VERSION {
        return Err(unavailable(format!(
            "server speaks protocol {}, expected {PROTOCOL_VERSION}",
            reply.protocol_version
        )));
    }
    let vocabulary = Vocabulary::new(reply.vocabulary)?;
    if vocabulary.fingerprint_hex() != reply.fingerprint {
        return Err(ProviderError::VocabularyMismatch {
            provider_id,
            expected: reply.fingerprint,
            found: vocabulary.fingerprint_hex(),
        });
    }
    Ok((conn, vocabulary, reply.model_name))
}

impl LogitProvider for RemoteProvider {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            provider_id: self.provider_id,
            kind: ProviderKind::Remote,
            endpoint_or_path: self.endpoint.clone(),
            vocabulary_fingerprint: self.vocabulary.fingerprint(),
        }
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    fn next_logits(&mut self, context: &DecodingContext) -> Result<LogitPair, ProviderError> {
        let step = context.step();
        let want_channels = if context.perturbation.is_none() {
            WantChannels::OriginalOnly
        } else {
            WantChannels::Both
        };
        let request = ClientMessage::Logits(LogitRequest {
            session_id: self.session_id.clone(),
            step: step as u64,
            context: RequestContext {
                prompt_tokens: context.prompt_tokens.clone(),
                generated_tokens: context.generated_tokens.clone(),
                input_id: context.input_id.clone(),
            },
            perturbation: context.perturbation,
            want_channels,
        });
        write_frame(&mut self.conn.writer, &request).map_err(|e| self.unavailable(e))?;
        let reply: Result<ServerMessage, ProtocolError> = read_frame(&mut self.conn.reader);
        let response = match reply.map_err(|e| self.unavailable(e))? {
            ServerMessage::Logits(r) => r,
            ServerMessage::Error(e) if e.kind == ErrorKind::TraceExhausted => {
                return Err(ProviderError::TraceExhausted {
                    provider_id: self.provider_id,
                    step,
                })
            }
            ServerMessage::Error(e) => {
                return Err(self.unavailable(format!("{:?}: {}", e.kind, e.message)))
            }
            ServerMessage::Hello(_) => return Err(self.unavailable("unexpected hello")),
        };
        if response.step != step as u64 || response.session_id != self.session_id {
            return Err(self.unavailable(format!(
                "response for session {:?} step {} does not match request",
                response.session_id, response.step
            )));
        }
        if response.vocab_fingerprint != self.vocabulary.fingerprint_hex() {
            return Err(ProviderError::VocabularyMismatch {
                provider_id: self.provider_id,
                expected: self.vocabulary.fingerprint_hex(),
                found: response.vocab_fingerprint,
            });
        }
        let original = LogitVector::new(response.original)?;
        match (want_channels, response.perturbed) {
            (WantChannels::Both, Some(p)) => Ok(LogitPair::new(original, LogitVector::new(p)?)?),
            (WantChannels::Both, None) => Err(self.unavailable("server omitted perturbed channel")),
            (WantChannels::OriginalOnly, _) => Ok(LogitPair::unperturbed(original)),
        }
    }
}
