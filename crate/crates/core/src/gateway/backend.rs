//! Backend transports: in-process responders, stdio subprocesses, and
//! manifest-file batch exchange.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::protocol::{
    check_hello, decode_response, encode, interpret, Reply, Request, Responder, Task,
    PROTOCOL_VERSION,
};
use crate::error::{Error, Result};

/// A live connection to one backend.
///
/// `call` returns `Err(Error::Backend)` for crashes and timeouts, which the
/// gateway records against the single request, and `Err(Error::Protocol)`
/// for malformed traffic, which aborts the batch.
pub trait Backend: Send {
    fn handshake(&mut self, task: Task) -> Result<Vec<String>>;
    fn call(&mut self, task: Task, id: u64, image: &str) -> Result<Reply>;
}

pub trait BackendFactory: Sync {
    fn connect(&self) -> Result<Box<dyn Backend>>;
}

/// Runs a list of images through a backend and returns one reply per image,
/// in input order. Request ids are `1..=n` in input order.
pub trait Exchange: Sync {
    fn exchange(&self, task: Task, images: &[String]) -> Result<Vec<Reply>>;
}

/// Adapts an in-process [`Responder`] to the [`Backend`] interface, passing
/// every message through the wire encoding so behaviour matches a subprocess.
pub struct InProcessBackend<R> {
    responder: Arc<R>,
}

impl<R> InProcessBackend<R> {
    pub fn new(responder: Arc<R>) -> Self {
        InProcessBackend { responder }
    }
}

impl<R: Responder + Send + Sync> Backend for InProcessBackend<R> {
    fn handshake(&mut self, task: Task) -> Result<Vec<String>> {
        Ok(self.responder.labels(task))
    }

    fn call(&mut self, task: Task, id: u64, image: &str) -> Result<Reply> {
        let resp = self
            .responder
            .respond(&Request::for_task(task, id, image.to_string()));
        let line = encode(&resp);
        interpret(task, id, decode_response(&line)?, &line)
    }
}

impl<R: Responder + Send + Sync + 'static> BackendFactory for Arc<R> {
    fn connect(&self) -> Result<Box<dyn Backend>> {
        Ok(Box::new(InProcessBackend::new(Arc::clone(self))))
    }
}

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A backend process speaking the protocol over stdin/stdout. A crashed or
/// timed-out process is restarted on the next call.
pub struct SubprocessBackend {
    command: Vec<String>,
    timeout: Duration,
    task: Option<Task>,
    labels: Vec<String>,
    running: Option<Running>,
}

impl SubprocessBackend {
    pub fn new(command: Vec<String>, timeout: Duration) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Backend("empty backend command".into()));
        }
        Ok(SubprocessBackend {
            command,
            timeout,
            task: None,
            labels: Vec::new(),
            running: None,
        })
    }

    fn spawn(&self) -> Result<Running> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start {:?}: {e}", self.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Running {
            child,
            stdin,
            lines: rx,
        })
    }

    fn roundtrip(&mut self, msg: &Request) -> Result<String> {
        let timeout = self.timeout;
        let running = self.running.as_mut().expect("backend running");
        writeln!(running.stdin, "{}", encode(msg))
            .and_then(|_| running.stdin.flush())
            .map_err(|e| Error::Backend(format!("backend stdin closed: {e}")))?;
        match running.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(Error::Backend(format!("backend stdout failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::Backend(format!(
                "backend did not answer within {timeout:?}"
            ))),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Backend("backend exited".into())),
        }
    }

    fn ensure_running(&mut self, task: Task) -> Result<()> {
        if self.running.is_some() && self.task == Some(task) {
            return Ok(());
        }
        self.running = Some(self.spawn()?);
        let hello = Request::Hello {
            version: PROTOCOL_VERSION,
            task,
        };
        let line = match self.roundtrip(&hello) {
            Ok(line) => line,
            Err(e) => {
                self.running = None;
                return Err(e);
            }
        };
        self.labels = check_hello(&decode_response(&line)?, &line)?;
        self.task = Some(task);
        Ok(())
    }
}

impl Backend for SubprocessBackend {
    fn handshake(&mut self, task: Task) -> Result<Vec<String>> {
        self.ensure_running(task)?;
        Ok(self.labels.clone())
    }

    fn call(&mut self, task: Task, id: u64, image: &str) -> Result<Reply> {
        self.ensure_running(task)?;
        match self.roundtrip(&Request::for_task(task, id, image.to_string())) {
            Ok(line) => interpret(task, id, decode_response(&line)?, &line),
            Err(e) => {
                // drop the process; the next call starts a fresh one
                self.running = None;
                self.task = None;
                Err(e)
            }
        }
    }
}

/// Spawns [`SubprocessBackend`]s from a command line.
pub struct SubprocessFactory {
    pub command: Vec<String>,
    pub timeout: Duration,
}

impl BackendFactory for SubprocessFactory {
    fn connect(&self) -> Result<Box<dyn Backend>> {
        Ok(Box::new(SubprocessBackend::new(
            self.command.clone(),
            self.timeout,
        )?))
    }
}

/// Fans requests out over `workers` backend connections.
pub struct WorkerPool<F> {
    factory: F,
    workers: usize,
}

impl<F: BackendFactory> WorkerPool<F> {
    pub fn new(factory: F, workers: usize) -> Self {
        WorkerPool {
            factory,
            workers: workers.max(1),
        }
    }

    pub fn factory(&self) -> &F {
        &self.factory
    }
}

impl<F: BackendFactory> Exchange for WorkerPool<F> {
    fn exchange(&self, task: Task, images: &[String]) -> Result<Vec<Reply>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let width = self.workers.min(images.len());
        let mut backends = Vec::with_capacity(width);
        for _ in 0..width {
            let mut b = self.factory.connect()?;
            b.handshake(task)?;
            backends.push(b);
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Reply>>> = Mutex::new(vec![None; images.len()]);
        let fatal: Mutex<Option<Error>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for mut backend in backends {
                let (next, slots, fatal) = (&next, &slots, &fatal);
                scope.spawn(move || loop {
                    if fatal.lock().unwrap().is_some() {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= images.len() {
                        break;
                    }
                    let reply = match backend.call(task, i as u64 + 1, &images[i]) {
                        Ok(r) => r,
                        Err(Error::Backend(msg)) => Reply::Failed(msg),
                        Err(e) => {
                            fatal.lock().unwrap().get_or_insert(e);
                            break;
                        }
                    };
                    slots.lock().unwrap()[i] = Some(reply);
                });
            }
        });
        if let Some(e) = fatal.into_inner().unwrap() {
            return Err(e);
        }
        Ok(slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect())
    }
}

/// Batch mode: requests are written to `<dir>/requests.jsonl` (hello line
/// first), an optional command is run with the directory as its last
/// argument, and replies are read from `<dir>/results.jsonl`.
pub struct ManifestExchange {
    pub dir: PathBuf,
    pub command: Option<Vec<String>>,
}

pub const REQUESTS_FILE: &str = "requests.jsonl";
pub const RESULTS_FILE: &str = "results.jsonl";

pub fn write_request_manifest(dir: &Path, task: Task, images: &[String]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = encode(&Request::Hello {
        version: PROTOCOL_VERSION,
        task,
    });
    text.push('\n');
    for (i, image) in images.iter().enumerate() {
        text.push_str(&encode(&Request::for_task(
            task,
            i as u64 + 1,
            image.clone(),
        )));
        text.push('\n');
    }
    let path = dir.join(REQUESTS_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a results manifest; ids without a reply become failures.
pub fn read_result_manifest(dir: &Path, task: Task, count: usize) -> Result<Vec<Reply>> {
    let path = dir.join(RESULTS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut by_id: HashMap<u64, Reply> = HashMap::new();
    let mut saw_hello = false;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let resp = decode_response(line)?;
        match resp.id() {
            None => {
                check_hello(&resp, line)?;
                saw_hello = true;
            }
            Some(id) => {
                if id == 0 || id as usize > count {
                    return Err(Error::Protocol {
                        message: format!("result id {id} matches no request"),
                        line: line.to_string(),
                    });
                }
                by_id.insert(id, interpret(task, id, resp, line)?);
            }
        }
    }
    if !saw_hello {
        return Err(Error::Protocol {
            message: "results manifest lacks a hello line".into(),
            line: String::new(),
        });
    }
    Ok((1..=count as u64)
        .map(|id| {
            by_id
                .remove(&id)
                .unwrap_or_else(|| Reply::Failed(format!("no result for request {id}")))
        })
        .collect())
}

impl Exchange for ManifestExchange {
    fn exchange(&self, task: Task, images: &[String]) -> Result<Vec<Reply>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        write_request_manifest(&self.dir, task, images)?;
        if let Some(cmd) = &self.command {
            let status = Command::new(&cmd[0])
                .args(&cmd[1..])
                .arg(&self.dir)
                .status()
                .map_err(|e| Error::Backend(format!("cannot start {cmd:?}: {e}")))?;
            if !status.success() {
                return Err(Error::Backend(format!(
                    "batch backend exited with {status}"
                )));
            }
        }
        read_result_manifest(&self.dir, task, images.len())
    }
}

/// Answers a request manifest with an in-process responder, writing the
/// results manifest. Used by replay tooling and tests.
pub fn answer_manifest(dir: &Path, responder: &dyn Responder) -> Result<()> {
    let path = dir.join(REQUESTS_FILE);
    let input = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let out_path = dir.join(RESULTS_FILE);
    let mut out = Vec::new();
    super::protocol::serve(responder, BufReader::new(input), &mut out)
        .map_err(|e| Error::io(&path, e))?;
    std::fs::write(&out_path, out).map_err(|e| Error::io(&out_path, e))
}
