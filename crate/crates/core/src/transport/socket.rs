use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::session::{run_session, Client, Link, Server, SessionConfig, SessionOutcome};
use super::wire::{read_message, PayloadLayout, MSG_BOOTSTRAP, MSG_DRAFT, MSG_VERIFY};
use crate::drafters::DraftModel;
use crate::error::{Error, Result};
use crate::target_model::ModelWeights;

#[derive(Debug, Default)]
struct ServerCounters {
    verified_len: AtomicUsize,
    verify_calls: AtomicUsize,
}

/// Serves one connection: BOOTSTRAP on connect, then one VERIFY per DRAFT
/// until the peer hangs up.
fn serve(stream: TcpStream, mut server: Server<'_>, prompt: &[u32], counters: &ServerCounters) -> Result<()> {
    let layout = PayloadLayout { widths: Vec::new() };
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let boot = server.bootstrap(prompt)?;
    counters.verified_len.store(server.verified_len(), Ordering::SeqCst);
    writer.write_all(&boot)?;
    loop {
        let msg = match read_message(&mut reader, &layout) {
            Ok(m) => m,
            Err(Error::Io(e))
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::ConnectionReset
                ) =>
            {
                return Ok(())
            }
            Err(e) => return Err(e),
        };
        if msg[0] != MSG_DRAFT {
            return Err(Error::Protocol(format!("server expected a draft, got type {}", msg[0])));
        }
        let reply = server.handle_draft(&msg)?;
        counters.verified_len.store(server.verified_len(), Ordering::SeqCst);
        counters.verify_calls.store(server.verify_calls(), Ordering::SeqCst);
        writer.write_all(&reply)?;
    }
}

/// Client end of a localhost stream connection.
#[derive(Debug)]
pub struct SocketLink {
    reader: Option<BufReader<TcpStream>>,
    writer: Option<TcpStream>,
    layout: PayloadLayout,
    counters: Arc<ServerCounters>,
    calls: usize,
}

impl SocketLink {
    fn read(&mut self, expected: u8) -> Result<Vec<u8>> {
        let reader = self
            .reader
            .as_mut()
            .ok_or_else(|| Error::Session("link is closed".into()))?;
        let msg = read_message(reader, &self.layout)?;
        if msg[0] != expected {
            return Err(Error::Protocol(format!("expected message type {expected}, got {}", msg[0])));
        }
        Ok(msg)
    }
}

impl Link for SocketLink {
    fn bootstrap(&mut self) -> Result<Vec<u8>> {
        self.calls += 1;
        self.read(MSG_BOOTSTRAP)
    }

    fn exchange(&mut self, draft: &[u8]) -> Result<Vec<u8>> {
        self.calls += 1;
        self.writer
            .as_mut()
            .ok_or_else(|| Error::Session("link is closed".into()))?
            .write_all(draft)?;
        self.read(MSG_VERIFY)
    }

    fn close(&mut self) {
        if let Some(w) = self.writer.take() {
            let _ = w.shutdown(Shutdown::Both);
        }
        self.reader = None;
    }

    fn calls(&self) -> usize {
        self.calls
    }

    fn server_verified_len(&self) -> Option<usize> {
        Some(self.counters.verified_len.load(Ordering::SeqCst))
    }

    fn server_verify_calls(&self) -> usize {
        self.counters.verify_calls.load(Ordering::SeqCst)
    }
}

/// Runs a session with the server on a thread behind a localhost socket.
pub fn socket_session(
    target: &ModelWeights,
    drafter: &DraftModel,
    prompt: &[u32],
    cfg: &SessionConfig,
) -> Result<SessionOutcome> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let counters = Arc::new(ServerCounters::default());
    std::thread::scope(|scope| {
        let server_counters = Arc::clone(&counters);
        let handle = scope.spawn(move || -> Result<()> {
            let (stream, _) = listener.accept()?;
            serve(stream, Server::new(target, drafter), prompt, &server_counters)
        });
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut link = SocketLink {
            reader: Some(BufReader::new(stream.try_clone()?)),
            writer: Some(stream),
            layout: PayloadLayout::for_drafter(drafter),
            counters: Arc::clone(&counters),
            calls: 0,
        };
        let mut client = Client::new(drafter);
        let outcome = run_session(&mut client, &mut link, prompt, cfg);
        link.close();
        let served = handle
            .join()
            .map_err(|_| Error::Session("server thread panicked".into()))?;
        let outcome = outcome?;
        served?;
        Ok(outcome)
    })
}
