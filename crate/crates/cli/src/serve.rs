//! Websocket front end for a [`LiveSession`]. The session owner runs on the
//! calling thread and talks to connection threads only through channels.

use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use empathic::inference::Predictor;
use empathic::session::wire::{ErrorPayload, MessageType};
use empathic::session::{LiveSession, SessionConfig, WireMessage};

/// How often connection threads poll their socket and outbound queue.
const POLL: Duration = Duration::from_millis(5);

pub struct ServeOptions {
    pub config: SessionConfig,
    pub tick: Duration,
    /// Run without waiting for a client's start message.
    pub autostart: bool,
    pub record: Option<PathBuf>,
    pub exit_on_finish: bool,
}

enum Inbound {
    Connected(u64, Sender<String>),
    Text(u64, String),
    Closed(u64),
}

pub fn serve_on(listener: TcpListener, opts: ServeOptions, predictor: Arc<dyn Predictor + Send + Sync>) -> anyhow::Result<()> {
    let (tx, rx) = mpsc::channel();
    let busy = Arc::new(AtomicBool::new(false));
    thread::spawn(move || {
        for (id, stream) in listener.incoming().enumerate() {
            match stream {
                Ok(s) => {
                    let (tx, busy) = (tx.clone(), busy.clone());
                    thread::spawn(move || connection(s, id as u64, tx, busy));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    });

    let mut live = LiveSession::new(opts.config.clone(), predictor)?;
    if opts.autostart {
        live.handle_text(r#"{"type":"control","seq":1,"payload":{"action":"start"}}"#);
    }
    let mut client: Option<(u64, Sender<String>)> = None;
    let mut flushed = false;
    let mut next_tick = Instant::now() + opts.tick;
    loop {
        let msgs = match rx.recv_timeout(next_tick.saturating_duration_since(Instant::now())) {
            Ok(Inbound::Connected(id, out)) => {
                log::info!("client {id} connected");
                client = Some((id, out));
                vec![live.handshake()]
            }
            Ok(Inbound::Text(id, text)) if client.as_ref().is_some_and(|c| c.0 == id) => live.handle_text(&text),
            Ok(Inbound::Text(..)) => Vec::new(),
            Ok(Inbound::Closed(id)) => {
                if client.as_ref().is_some_and(|c| c.0 == id) {
                    log::info!("client {id} disconnected");
                    client = None;
                }
                Vec::new()
            }
            Err(RecvTimeoutError::Timeout) => {
                next_tick += opts.tick;
                if !live.session().is_finished() {
                    flushed = false;
                    live.tick()?
                } else if !flushed {
                    flushed = true;
                    let out = live.finish()?;
                    if let Some(path) = &opts.record {
                        live.recording().save(path)?;
                        log::info!("recording written to {}", path.display());
                    }
                    if opts.exit_on_finish {
                        send(&client, &out);
                        // let the connection thread drain its queue
                        thread::sleep(POLL * 4);
                        return Ok(());
                    }
                    out
                } else {
                    Vec::new()
                }
            }
            Err(RecvTimeoutError::Disconnected) => return Ok(()),
        };
        send(&client, &msgs);
    }
}

fn send(client: &Option<(u64, Sender<String>)>, msgs: &[WireMessage]) {
    if let Some((_, out)) = client {
        for m in msgs {
            // a closed connection reports itself through `Closed`
            let _ = out.send(m.to_json());
        }
    }
}

fn connection(stream: TcpStream, id: u64, tx: Sender<Inbound>, busy: Arc<AtomicBool>) {
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("websocket handshake failed: {e}");
            return;
        }
    };
    if busy.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
        reject(&mut ws);
        return;
    }
    let (out_tx, out_rx) = mpsc::channel::<String>();
    if tx.send(Inbound::Connected(id, out_tx)).is_err() {
        busy.store(false, Ordering::SeqCst);
        return;
    }
    if let Err(e) = ws.get_mut().set_read_timeout(Some(POLL)) {
        log::warn!("cannot set read timeout: {e}");
    }
    'conn: loop {
        while let Ok(text) = out_rx.try_recv() {
            if ws.send(Message::text(text)).is_err() {
                break 'conn;
            }
        }
        match ws.read() {
            Ok(Message::Text(t)) => {
                if tx.send(Inbound::Text(id, t)).is_err() {
                    break;
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
    busy.store(false, Ordering::SeqCst);
    let _ = tx.send(Inbound::Closed(id));
}

fn reject(ws: &mut WebSocket<TcpStream>) {
    let msg = WireMessage::new(MessageType::Error, 1, ErrorPayload { reason: "another client is already connected".into(), ack: None });
    let _ = ws.send(Message::text(msg.to_json()));
    let _ = ws.close(None);
    // drive the close handshake until the peer answers or leaves
    let _ = ws.get_mut().set_read_timeout(Some(Duration::from_secs(1)));
    while ws.read().is_ok() {}
}
