use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::protocol::{decode_response, encode_line, Reply, Request, Response};
use super::{with_retry, Capabilities, TranslationModel};
use crate::error::{Error, Result};
use crate::text::{Sentence, Vocab};

const REPLY_TIMEOUT: Duration = Duration::from_secs(300);

type Waiters = Arc<Mutex<Option<HashMap<u64, mpsc::Sender<Response>>>>>;

/// One live link to a model: a writer for requests and a reader thread that
/// routes responses to waiting callers by id.
pub struct Connection {
    writer: Mutex<Box<dyn Write + Send>>,
    waiters: Waiters,
    reader: Option<JoinHandle<()>>,
    child: Option<Child>,
}

impl Connection {
    pub fn from_streams(
        writer: impl Write + Send + 'static,
        reader: impl Read + Send + 'static,
    ) -> Self {
        let waiters: Waiters = Arc::new(Mutex::new(Some(HashMap::new())));
        let routes = Arc::clone(&waiters);
        let handle = thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let Ok(line) = line else { break };
                let resp = match decode_response(&line) {
                    Ok(r) => r,
                    Err(e) => {
                        log::warn!("unparseable response line: {e}");
                        continue;
                    }
                };
                let mut guard = routes.lock().expect("waiters poisoned");
                let waiter = guard
                    .as_mut()
                    .and_then(|w| u64::try_from(resp.id).ok().and_then(|id| w.remove(&id)));
                match waiter {
                    Some(tx) => {
                        let _ = tx.send(resp);
                    }
                    None => log::warn!("response for unknown request id {}", resp.id),
                }
            }
            // Dropping the senders wakes every caller still waiting.
            routes.lock().expect("waiters poisoned").take();
        });
        Self {
            writer: Mutex::new(Box::new(writer)),
            waiters,
            reader: Some(handle),
            child: None,
        }
    }

    pub fn spawn(argv: &[String]) -> Result<Self> {
        let (prog, args) = argv
            .split_first()
            .ok_or_else(|| Error::InvalidInput("empty model command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("cannot start `{prog}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut conn = Self::from_streams(stdin, stdout);
        conn.child = Some(child);
        Ok(conn)
    }

    fn request(&self, req: &Request) -> Result<Response> {
        let (tx, rx) = mpsc::channel();
        {
            let mut guard = self.waiters.lock().expect("waiters poisoned");
            let waiters = guard
                .as_mut()
                .ok_or_else(|| Error::Transport("connection closed".into()))?;
            waiters.insert(req.id(), tx);
        }
        let line = encode_line(req)?;
        let written = {
            let mut w = self.writer.lock().expect("writer poisoned");
            w.write_all(line.as_bytes()).and_then(|_| w.flush())
        };
        if let Err(e) = written {
            if let Some(w) = self.waiters.lock().expect("waiters poisoned").as_mut() {
                w.remove(&req.id());
            }
            return Err(Error::Transport(format!("write failed: {e}")));
        }
        match rx.recv_timeout(REPLY_TIMEOUT) {
            Ok(resp) => Ok(resp),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                if let Some(w) = self.waiters.lock().expect("waiters poisoned").as_mut() {
                    w.remove(&req.id());
                }
                Err(Error::Transport(format!("no reply to request {}", req.id())))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                Err(Error::Transport("model process closed its output".into()))
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Ok(mut w) = self.writer.lock() {
            *w = Box::new(std::io::sink());
        }
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

type Connector = Box<dyn Fn() -> Result<Connection> + Send + Sync>;

/// Client for a model living in another process (or behind any pair of
/// streams). Up to `max_in_flight` requests are outstanding at once; failed
/// transports are reopened and the request retried.
pub struct ProcessModel {
    connector: Connector,
    conn: RwLock<Arc<Connection>>,
    next_id: AtomicU64,
    slots: (Mutex<usize>, Condvar),
    max_in_flight: usize,
    vocab: Vocab,
    model_id: String,
    capabilities: Capabilities,
    round_trips: AtomicU64,
}

impl ProcessModel {
    /// Starts `argv` as a child process and performs the handshake.
    pub fn spawn(argv: Vec<String>, max_in_flight: usize) -> Result<Self> {
        Self::connect(move || Connection::spawn(&argv), max_in_flight)
    }

    pub fn connect(
        connector: impl Fn() -> Result<Connection> + Send + Sync + 'static,
        max_in_flight: usize,
    ) -> Result<Self> {
        let conn = with_retry(&connector)?;
        let (vocab, model_id, capabilities) = handshake(&conn)?;
        Ok(Self {
            connector: Box::new(connector),
            conn: RwLock::new(Arc::new(conn)),
            next_id: AtomicU64::new(1),
            slots: (Mutex::new(0), Condvar::new()),
            max_in_flight: max_in_flight.max(1),
            vocab,
            model_id,
            capabilities,
            round_trips: AtomicU64::new(0),
        })
    }

    pub fn round_trips(&self) -> u64 {
        self.round_trips.load(Ordering::Relaxed)
    }

    fn acquire(&self) {
        let (lock, cv) = &self.slots;
        let mut used = lock.lock().expect("slot lock poisoned");
        while *used >= self.max_in_flight {
            used = cv.wait(used).expect("slot lock poisoned");
        }
        *used += 1;
    }

    fn release(&self) {
        let (lock, cv) = &self.slots;
        *lock.lock().expect("slot lock poisoned") -= 1;
        cv.notify_one();
    }

    fn reconnect(&self, failed: &Arc<Connection>) -> Result<()> {
        let mut current = self.conn.write().expect("conn lock poisoned");
        if !Arc::ptr_eq(&current, failed) {
            return Ok(());
        }
        let conn = (self.connector)()?;
        let (vocab, model_id, _) = handshake(&conn)?;
        if vocab != self.vocab || model_id != self.model_id {
            return Err(Error::VocabMismatch(format!(
                "restarted model reports `{model_id}` with {} tokens",
                vocab.len()
            )));
        }
        *current = Arc::new(conn);
        Ok(())
    }

    fn call(&self, req: Request) -> Result<Reply> {
        let reply = with_retry(|| {
            let conn = Arc::clone(&self.conn.read().expect("conn lock poisoned"));
            let req = req.clone().with_id(self.next_id.fetch_add(1, Ordering::Relaxed));
            self.acquire();
            let out = conn.request(&req);
            self.release();
            self.round_trips.fetch_add(1, Ordering::Relaxed);
            if let Err(e) = &out {
                if e.is_retryable() {
                    self.reconnect(&conn)?;
                }
            }
            out
        })?;
        match reply.reply {
            Reply::Error { error } => Err(Error::Model(error)),
            other => Ok(other),
        }
    }

    fn sentence(&self, ids: Vec<u32>) -> Result<Sentence> {
        let s = Sentence::new(ids)?;
        self.vocab.validate(&s)?;
        Ok(s)
    }
}

fn handshake(conn: &Connection) -> Result<(Vocab, String, Capabilities)> {
    match conn.request(&Request::Hello { id: 0 })?.reply {
        Reply::Hello {
            vocab,
            model_id,
            capabilities,
        } => Ok((
            Vocab::from_tokens(vocab)?,
            model_id,
            Capabilities::from_names(&capabilities),
        )),
        Reply::Error { error } => Err(Error::Model(error)),
        other => Err(Error::Format(format!("unexpected hello reply {other:?}"))),
    }
}

fn unexpected(op: &str, reply: Reply) -> Error {
    Error::Format(format!("unexpected reply to {op}: {reply:?}"))
}

impl TranslationModel for ProcessModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn decode(&self, src: &Sentence) -> Result<Sentence> {
        match self.call(Request::Decode {
            id: 0,
            src: src.ids().to_vec(),
        })? {
            Reply::Decode { hyp } => self.sentence(hyp),
            other => Err(unexpected("decode", other)),
        }
    }

    fn nll(&self, src: &Sentence, tgt: &Sentence) -> Result<f64> {
        match self.call(Request::Nll {
            id: 0,
            src: src.ids().to_vec(),
            reference: tgt.ids().to_vec(),
        })? {
            Reply::Nll { nll } if nll.is_finite() && nll >= 0.0 => Ok(nll),
            Reply::Nll { nll } => Err(Error::Model(format!("invalid nll {nll}"))),
            other => Err(unexpected("nll", other)),
        }
    }

    fn proposal(&self, src: &Sentence, tgt: &Sentence, pos: usize) -> Result<Vec<f64>> {
        if !self.capabilities.proposal {
            return Err(Error::Capability("proposal"));
        }
        match self.call(Request::Proposal {
            id: 0,
            src: src.ids().to_vec(),
            reference: tgt.ids().to_vec(),
            pos,
        })? {
            Reply::Proposal { probs } if probs.len() == self.vocab.len() => Ok(probs),
            Reply::Proposal { probs } => Err(Error::LengthMismatch {
                what: "proposal".into(),
                got: probs.len(),
                expected: self.vocab.len(),
            }),
            other => Err(unexpected("proposal", other)),
        }
    }

    fn n_best(&self, src: &Sentence, k: usize) -> Result<Vec<Sentence>> {
        match self.call(Request::Nbest {
            id: 0,
            src: src.ids().to_vec(),
            k,
        })? {
            Reply::Nbest { hyps } => hyps.into_iter().map(|h| self.sentence(h)).collect(),
            other => Err(unexpected("nbest", other)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::protocol::decode_request;
    use crate::model::{respond, serve};
    use crate::toy::{ToyConfig, ToyModel};
    use std::sync::atomic::AtomicUsize;

    fn toy_connection() -> Result<Connection> {
        let (req_rx, req_tx) = std::io::pipe()?;
        let (resp_rx, resp_tx) = std::io::pipe()?;
        thread::spawn(move || {
            let model = ToyModel::new(&ToyConfig::default()).unwrap();
            let _ = serve(&model, BufReader::new(req_rx), resp_tx);
        });
        Ok(Connection::from_streams(req_tx, resp_rx))
    }

    #[test]
    fn matches_in_process_model() {
        let remote = ProcessModel::connect(toy_connection, 4).unwrap();
        let local = ToyModel::new(&ToyConfig::default()).unwrap();
        assert_eq!(remote.vocab(), local.vocab());
        assert_eq!(remote.model_id(), local.model_id());
        let x = Sentence::new(vec![2, 7, 9, 11, 3]).unwrap();
        assert_eq!(remote.decode(&x).unwrap(), local.decode(&x).unwrap());
        assert_eq!(
            remote.nll(&x, &x).unwrap().to_bits(),
            local.nll(&x, &x).unwrap().to_bits()
        );
        assert_eq!(remote.n_best(&x, 3).unwrap(), local.n_best(&x, 3).unwrap());
        let p = remote.proposal(&x, &x, 1).unwrap();
        assert_eq!(p, local.proposal(&x, &x, 1).unwrap());
    }

    #[test]
    fn concurrent_calls_are_correlated() {
        use rayon::prelude::*;
        let remote = ProcessModel::connect(toy_connection, 4).unwrap();
        let local = ToyModel::new(&ToyConfig::default()).unwrap();
        let inputs: Vec<Sentence> = (0..64u32)
            .map(|i| Sentence::new(vec![2 + i % 40, 3 + (i * 7) % 40, 5]).unwrap())
            .collect();
        let got: Vec<Sentence> = inputs.par_iter().map(|x| remote.decode(x).unwrap()).collect();
        for (x, y) in inputs.iter().zip(got) {
            assert_eq!(local.decode(x).unwrap(), y);
        }
    }

    #[test]
    fn out_of_order_replies_reach_their_callers() {
        // A server that collects three requests, then answers in reverse.
        let connector = || -> Result<Connection> {
            let (req_rx, req_tx) = std::io::pipe()?;
            let (resp_rx, mut resp_tx) = std::io::pipe()?;
            thread::spawn(move || {
                let model = ToyModel::new(&ToyConfig::default()).unwrap();
                let mut lines = BufReader::new(req_rx).lines();
                let mut answer = |line: &str| {
                    let resp = respond(&model, decode_request(line).unwrap());
                    resp_tx.write_all(encode_line(&resp).unwrap().as_bytes()).unwrap();
                };
                answer(&lines.next().unwrap().unwrap());
                let batch: Vec<String> = (0..3).map(|_| lines.next().unwrap().unwrap()).collect();
                for line in batch.iter().rev() {
                    answer(line);
                }
            });
            Ok(Connection::from_streams(req_tx, resp_rx))
        };
        let remote = ProcessModel::connect(connector, 3).unwrap();
        let local = ToyModel::new(&ToyConfig::default()).unwrap();
        let xs: Vec<Sentence> = (0..3u32)
            .map(|i| Sentence::new(vec![10 + i, 20 + i]).unwrap())
            .collect();
        let got: Vec<Sentence> = thread::scope(|s| {
            let handles: Vec<_> = xs.iter().map(|x| s.spawn(|| remote.decode(x).unwrap())).collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (x, y) in xs.iter().zip(got) {
            assert_eq!(local.decode(x).unwrap(), y);
        }
    }

    #[test]
    fn reconnects_after_transport_failure() {
        let opened = Arc::new(AtomicUsize::new(0));
        let counter = Arc::clone(&opened);
        // The first connection dies after the handshake.
        let connector = move || -> Result<Connection> {
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let (req_rx, req_tx) = std::io::pipe()?;
            let (resp_rx, resp_tx) = std::io::pipe()?;
            thread::spawn(move || {
                let model = ToyModel::new(&ToyConfig::default()).unwrap();
                if n == 0 {
                    let mut lines = BufReader::new(req_rx).lines();
                    let hello = lines.next().unwrap().unwrap();
                    serve(&model, hello.as_bytes(), resp_tx).unwrap();
                } else {
                    let _ = serve(&model, BufReader::new(req_rx), resp_tx);
                }
            });
            Ok(Connection::from_streams(req_tx, resp_rx))
        };
        let remote = ProcessModel::connect(connector, 1).unwrap();
        let x = Sentence::new(vec![4, 5, 6]).unwrap();
        assert_eq!(remote.decode(&x).unwrap().ids(), &[4, 5, 6]);
        assert_eq!(opened.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn model_errors_are_not_retried() {
        let remote = ProcessModel::connect(toy_connection, 1).unwrap();
        let before = remote.round_trips();
        let bad = Sentence::new(vec![2, 3]).unwrap();
        let err = remote.proposal(&bad, &bad, 5).unwrap_err();
        assert!(matches!(err, Error::Model(_)));
        assert_eq!(remote.round_trips() - before, 1);
    }
}
