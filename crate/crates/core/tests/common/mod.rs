#![allow(dead_code)]

pub mod oracle;
pub mod refcodec;

use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use elasticbroker::broker::FINALIZED_DETAIL;
use elasticbroker::endpoint::{EndpointServer, ServerOptions};
use elasticbroker::model::EndpointAddress;
use elasticbroker::wire::{self, FrameDecoder, Message, DEFAULT_MAX_FRAME};

pub fn local_endpoint(opts: ServerOptions) -> EndpointServer {
    EndpointServer::start(TcpListener::bind("127.0.0.1:0").unwrap(), opts).unwrap()
}

/// A port nothing listens on.
pub fn dead_address() -> EndpointAddress {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    EndpointAddress::new("127.0.0.1", port).unwrap()
}

/// Big enough to overrun loopback socket buffers, under the frame cap.
pub const STALL_PAYLOAD: usize = 1_800_000;

/// Accepts one connection, ACKs its REGISTER, then reads nothing until
/// `release` fires. After release it counts APPENDs and answers FINALIZE.
pub struct StalledEndpoint {
    pub address: EndpointAddress,
    release: Option<mpsc::Sender<()>>,
    pub appends: Arc<AtomicU64>,
    handle: Option<JoinHandle<()>>,
}

impl StalledEndpoint {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let address = EndpointAddress::new("127.0.0.1", listener.local_addr().unwrap().port()).unwrap();
        let (tx, rx) = mpsc::channel::<()>();
        let appends = Arc::new(AtomicU64::new(0));
        let counter = Arc::clone(&appends);
        let handle = thread::spawn(move || {
            let (mut sock, _) = listener.accept().unwrap();
            let mut dec = FrameDecoder::new(DEFAULT_MAX_FRAME);
            match dec.read_message(&mut sock) {
                Ok(Message::Register { .. }) => {
                    wire::write_message(&mut sock, &Message::ack_ok()).unwrap();
                }
                other => panic!("expected REGISTER, got {other:?}"),
            }
            // Either a release or the test dropping us ends the stall.
            let _ = rx.recv();
            serve_after_release(sock, dec, &counter);
        });
        Self {
            address,
            release: Some(tx),
            appends,
            handle: Some(handle),
        }
    }

    pub fn release(&mut self) {
        if let Some(tx) = self.release.take() {
            let _ = tx.send(());
        }
    }

    pub fn appends(&self) -> u64 {
        self.appends.load(Ordering::SeqCst)
    }

    pub fn join(mut self) {
        self.release();
        if let Some(h) = self.handle.take() {
            h.join().unwrap();
        }
    }
}

fn serve_after_release(mut sock: TcpStream, mut dec: FrameDecoder, appends: &AtomicU64) {
    sock.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    loop {
        match dec.read_message(&mut sock) {
            Ok(Message::Append { .. }) => {
                appends.fetch_add(1, Ordering::SeqCst);
            }
            Ok(Message::Finalize) => {
                let _ = wire::write_message(
                    &mut sock,
                    &Message::Ack {
                        ok: true,
                        detail: FINALIZED_DETAIL.into(),
                    },
                );
                return;
            }
            Ok(_) => {}
            Err(_) => return,
        }
    }
}
