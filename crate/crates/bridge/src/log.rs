//! Append-only demonstration log with a single writer thread.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;

use ase_core::learner::Demonstration;

pub const LOG_FILE: &str = "demonstrations.jsonl";

enum Command {
    Append(Box<Demonstration>),
    Flush(mpsc::Sender<()>),
}

/// Sessions enqueue finished demonstrations; one thread owns the file.
#[derive(Debug)]
pub struct DemoLog {
    tx: Option<mpsc::Sender<Command>>,
    path: Option<PathBuf>,
    writer: Option<JoinHandle<()>>,
}

impl DemoLog {
    /// A log that drops everything.
    pub fn disabled() -> Self {
        Self {
            tx: None,
            path: None,
            writer: None,
        }
    }

    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let (tx, rx) = mpsc::channel();
        let writer = std::thread::spawn(move || write_loop(BufWriter::new(file), rx));
        Ok(Self {
            tx: Some(tx),
            path: Some(path),
            writer: Some(writer),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, demo: Demonstration) {
        if let Some(tx) = &self.tx {
            let _ = tx.send(Command::Append(Box::new(demo)));
        }
    }

    /// Blocks until everything enqueued so far is on disk.
    pub fn flush(&self) {
        if let Some(tx) = &self.tx {
            let (done_tx, done_rx) = mpsc::channel();
            if tx.send(Command::Flush(done_tx)).is_ok() {
                let _ = done_rx.recv();
            }
        }
    }
}

impl Drop for DemoLog {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(writer) = self.writer.take() {
            let _ = writer.join();
        }
    }
}

fn write_loop(mut out: BufWriter<File>, rx: mpsc::Receiver<Command>) {
    for command in rx {
        match command {
            Command::Append(demo) => {
                if serde_json::to_writer(&mut out, &*demo).is_ok() {
                    let _ = out.write_all(b"\n");
                }
            }
            Command::Flush(done) => {
                let _ = out.flush();
                let _ = done.send(());
            }
        }
    }
    let _ = out.flush();
}

#[cfg(test)]
mod tests {
    use super::*;
    use ase_core::learner::{read_demonstrations, ShownObservation, Task};

    #[test]
    fn appends_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let log = DemoLog::open(dir.path()).unwrap();
        for e in 0..3 {
            log.append(Demonstration {
                episode_id: e,
                env: "tilt_lander".into(),
                task: Task::Label { label: "level".into() },
                observations: vec![ShownObservation::Angle { value: 0.25 }],
                actions: vec![1],
            });
        }
        log.flush();
        let demos = read_demonstrations(std::io::BufReader::new(File::open(log.path().unwrap()).unwrap())).unwrap();
        assert_eq!(demos.iter().map(|d| d.episode_id).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn disabled_log_is_silent() {
        let log = DemoLog::disabled();
        log.flush();
        assert!(log.path().is_none());
    }
}
