//! Line-delimited master/worker protocol over TCP.
//!
//! ```text
//! worker → master   HELLO <rank>
//! master → worker   TASK <idx> <payload>
//! worker → master   RESULT <idx> <payload>
//! worker → master   ERROR <idx> <message>
//! master → worker   BYE
//! ```
//!
//! Payloads are single-line strings. Results are stored by task index, so
//! the outcome of [`TaskPool::map`] does not depend on which worker ran a
//! task or in which order tasks finished.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

use log::debug;

use super::WorkloadError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello { rank: usize },
    Task { idx: usize, payload: String },
    Result { idx: usize, payload: String },
    Error { idx: usize, message: String },
    Bye,
}

impl Message {
    pub fn encode(&self) -> String {
        match self {
            Message::Hello { rank } => format!("HELLO {rank}"),
            Message::Task { idx, payload } => format!("TASK {idx} {payload}"),
            Message::Result { idx, payload } => format!("RESULT {idx} {payload}"),
            Message::Error { idx, message } => format!("ERROR {idx} {}", message.replace('\n', " ")),
            Message::Bye => "BYE".to_string(),
        }
    }

    pub fn decode(line: &str) -> Result<Self, WorkloadError> {
        let line = line.trim_end_matches(['\r', '\n']);
        let bad = || WorkloadError::Protocol(format!("malformed message `{line}`"));
        let mut parts = line.splitn(3, ' ');
        let verb = parts.next().ok_or_else(bad)?;
        let mut index = || -> Result<usize, WorkloadError> {
            parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)
        };
        let msg = match verb {
            "HELLO" => Message::Hello { rank: index()? },
            "BYE" => Message::Bye,
            "TASK" | "RESULT" | "ERROR" => {
                let idx = index()?;
                let payload = parts.next().unwrap_or("").to_string();
                match verb {
                    "TASK" => Message::Task { idx, payload },
                    "RESULT" => Message::Result { idx, payload },
                    _ => Message::Error { idx, message: payload },
                }
            }
            _ => return Err(bad()),
        };
        if verb == "BYE" && line != "BYE" {
            return Err(bad());
        }
        Ok(msg)
    }
}

/// Something that maps a batch of task payloads to result payloads.
pub trait TaskPool {
    fn map(&mut self, tasks: &[String]) -> Result<Vec<String>, WorkloadError>;
}

/// Runs tasks in the calling thread.
pub struct InProcess<F>(pub F);

impl<F> TaskPool for InProcess<F>
where
    F: FnMut(&str) -> Result<String, WorkloadError>,
{
    fn map(&mut self, tasks: &[String]) -> Result<Vec<String>, WorkloadError> {
        tasks.iter().map(|t| (self.0)(t)).collect()
    }
}

struct Conn {
    rank: usize,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Conn {
    fn send(&mut self, msg: &Message) -> std::io::Result<()> {
        writeln!(self.writer, "{}", msg.encode())
    }

    fn recv(&mut self) -> Result<Message, WorkloadError> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(WorkloadError::Worker {
                rank: self.rank,
                message: "connection closed".into(),
            });
        }
        Message::decode(&line)
    }
}

/// Master side: the connected workers, ordered by rank.
pub struct WorkerPool {
    conns: Vec<Conn>,
}

impl WorkerPool {
    /// Listen on `endpoint` and wait for `workers` distinct ranks to say
    /// hello.
    pub fn accept(endpoint: &str, workers: usize, timeout: Duration) -> Result<Self, WorkloadError> {
        let listener = TcpListener::bind(endpoint)?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for stream in listener.incoming().take(workers) {
                if tx.send(stream).is_err() {
                    break;
                }
            }
        });
        let deadline = Instant::now() + timeout;
        let mut conns: Vec<Conn> = Vec::with_capacity(workers);
        while conns.len() < workers {
            let stream = rx
                .recv_timeout(deadline.saturating_duration_since(Instant::now()))
                .map_err(|_| {
                    WorkloadError::Protocol(format!(
                        "only {} of {workers} workers connected within {timeout:?}",
                        conns.len()
                    ))
                })??;
            stream.set_nodelay(true)?;
            stream.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1))))?;
            let mut conn = Conn {
                rank: 0,
                reader: BufReader::new(stream.try_clone()?),
                writer: stream,
            };
            match conn.recv()? {
                Message::Hello { rank } if rank > 0 && conns.iter().all(|c| c.rank != rank) => {
                    conn.rank = rank;
                    conn.writer.set_read_timeout(None)?;
                    debug!("worker rank {rank} connected");
                    conns.push(conn);
                }
                other => {
                    return Err(WorkloadError::Protocol(format!("unexpected greeting {other:?}")));
                }
            }
        }
        conns.sort_by_key(|c| c.rank);
        Ok(Self { conns })
    }

    pub fn len(&self) -> usize {
        self.conns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conns.is_empty()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.conns.iter().map(|c| c.rank).collect()
    }

    /// Tell every worker to exit.
    pub fn shutdown(mut self) {
        self.say_bye();
    }

    fn say_bye(&mut self) {
        for c in &mut self.conns {
            let _ = c.send(&Message::Bye);
        }
        self.conns.clear();
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.say_bye();
    }
}

impl TaskPool for WorkerPool {
    fn map(&mut self, tasks: &[String]) -> Result<Vec<String>, WorkloadError> {
        if self.conns.is_empty() {
            return Err(WorkloadError::Protocol("worker pool is empty".into()));
        }
        let chunk = tasks.len().div_ceil(self.conns.len() * 4).max(1);
        let cursor = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<String>>> = Mutex::new(vec![None; tasks.len()]);
        let failure: Mutex<Option<WorkloadError>> = Mutex::new(None);
        std::thread::scope(|s| {
            for conn in &mut self.conns {
                let (cursor, results, failure) = (&cursor, &results, &failure);
                s.spawn(move || {
                    let outcome = (|| -> Result<(), WorkloadError> {
                        loop {
                            if failure.lock().unwrap().is_some() {
                                return Ok(());
                            }
                            let start = cursor.fetch_add(chunk, Ordering::SeqCst);
                            if start >= tasks.len() {
                                return Ok(());
                            }
                            let end = (start + chunk).min(tasks.len());
                            for (idx, payload) in tasks.iter().enumerate().take(end).skip(start) {
                                conn.send(&Message::Task {
                                    idx,
                                    payload: payload.clone(),
                                })?;
                            }
                            conn.writer.flush()?;
                            for _ in start..end {
                                match conn.recv()? {
                                    Message::Result { idx, payload } if (start..end).contains(&idx) => {
                                        results.lock().unwrap()[idx] = Some(payload);
                                    }
                                    Message::Error { idx, message } => {
                                        return Err(WorkloadError::Worker {
                                            rank: conn.rank,
                                            message: format!("task {idx}: {message}"),
                                        });
                                    }
                                    other => {
                                        return Err(WorkloadError::Protocol(format!(
                                            "rank {} sent {other:?}",
                                            conn.rank
                                        )));
                                    }
                                }
                            }
                        }
                    })();
                    if let Err(e) = outcome {
                        let e = match e {
                            WorkloadError::Io(io) => WorkloadError::Worker {
                                rank: conn.rank,
                                message: io.to_string(),
                            },
                            other => other,
                        };
                        failure.lock().unwrap().get_or_insert(e);
                    }
                });
            }
        });
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        Ok(results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every task has a result"))
            .collect())
    }
}

/// Worker side: connect to the master, greet, and answer tasks with
/// `handler` until told to stop. Returns the number of tasks served.
pub fn serve<F>(endpoint: &str, rank: usize, connect_timeout: Duration, mut handler: F) -> Result<usize, WorkloadError>
where
    F: FnMut(&str) -> Result<String, WorkloadError>,
{
    let stream = connect_with_retry(endpoint, connect_timeout)?;
    stream.set_nodelay(true)?;
    let mut conn = Conn {
        rank,
        reader: BufReader::new(stream.try_clone()?),
        writer: stream,
    };
    conn.send(&Message::Hello { rank })?;
    let mut served = 0;
    loop {
        match conn.recv()? {
            Message::Task { idx, payload } => {
                let reply = match handler(&payload) {
                    Ok(payload) => Message::Result { idx, payload },
                    Err(e) => Message::Error {
                        idx,
                        message: e.to_string(),
                    },
                };
                conn.send(&reply)?;
                served += 1;
            }
            Message::Bye => return Ok(served),
            other => {
                return Err(WorkloadError::Protocol(format!("worker received {other:?}")));
            }
        }
    }
}

fn connect_with_retry(endpoint: &str, timeout: Duration) -> Result<TcpStream, WorkloadError> {
    let deadline = Instant::now() + timeout;
    let addr = endpoint
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| WorkloadError::Protocol(format!("cannot resolve `{endpoint}`")))?;
    let mut delay = Duration::from_millis(5);
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(WorkloadError::Protocol(format!("cannot reach master at {endpoint}: {e}")));
            }
            Err(_) => {
                std::thread::sleep(delay);
                delay = (delay * 2).min(Duration::from_millis(200));
            }
        }
    }
}
