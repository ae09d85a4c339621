//! Deployable roles and the wire protocol connecting them.
//!
//! The user talks to the vetter (`QUERY` -> `ANSWER` | `DENIED` | `ERROR`); the
//! vetter talks to the data server (`SEARCH_INIT` -> `STERM_COUNT`, then
//! `XTOKENS`* -> `RESULT`). Transport is plain TCP; deployments are expected to
//! wrap it in an authenticated channel.

pub mod client;
pub mod server;
pub mod trustee;
pub mod vetter;
pub mod wire;

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

pub use client::{format_answer, format_denial, submit_query, Reply};
pub use server::{DataServer, ServerConfig};
pub use trustee::{trustee_build, BuildError, BuildSummary};
pub use vetter::{remote_search, Vetter, VetterConfig};

/// A running accept loop; one thread per connection.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Stops accepting connections. Connections in progress run to completion.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_accepting();
        }
    }
}

fn spawn_acceptor<F>(listener: TcpListener, handler: Arc<F>) -> io::Result<ServiceHandle>
where
    F: Fn(TcpStream) + Send + Sync + 'static,
{
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let thread = thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let handler = handler.clone();
                    thread::spawn(move || handler(stream));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    });
    Ok(ServiceHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

/// Starts the data server on `addr`.
pub fn serve_data(server: Arc<DataServer>, addr: impl ToSocketAddrs) -> io::Result<ServiceHandle> {
    let listener = TcpListener::bind(addr)?;
    log::info!("data server listening on {}", listener.local_addr()?);
    spawn_acceptor(listener, Arc::new(move |s| server.handle_connection(s)))
}

/// Starts the vetter on `addr`.
pub fn serve_vetter(vetter: Arc<Vetter>, addr: impl ToSocketAddrs) -> io::Result<ServiceHandle> {
    let listener = TcpListener::bind(addr)?;
    log::info!("vetter listening on {}", listener.local_addr()?);
    spawn_acceptor(listener, Arc::new(move |s| vetter.handle_connection(s)))
}
