#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStderr, Command, Output, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_meterhub"));
    c.env_remove("METERHUB_BROKER").env("RUST_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn meterhub")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Config with a Sigfox callback connector and one pulse gas meter.
pub fn sigfox_config(dir: &Path, port: u16) -> PathBuf {
    let path = dir.join("meterhub.json");
    let doc = serde_json::json!({
        "http_listen": format!("127.0.0.1:{port}"),
        "store": dir.join("store"),
        "connectors": [{"technology": "sigfox"}],
        "devices": [{"device_id": "gas-1", "technology": "sigfox", "codec": "pulse", "pulse_weight": 0.01, "medium": "gas"}]
    });
    std::fs::write(&path, serde_json::to_vec_pretty(&doc).unwrap()).unwrap();
    path
}

pub struct Server {
    pub child: Child,
    pub port: u16,
    stderr_lines: mpsc::Receiver<String>,
}

impl Server {
    /// Start `serve` and wait for the readiness line.
    pub fn start(config: &Path, port: u16) -> Server {
        let mut child = bin()
            .args(["serve", "--config", config.to_str().unwrap()])
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let rx = pump(child.stderr.take().unwrap());
        let line = rx.recv_timeout(Duration::from_secs(20)).expect("serve printed nothing");
        assert_eq!(line, "meterhub ready");
        Server {
            child,
            port,
            stderr_lines: rx,
        }
    }

    pub fn signal(&self, sig: i32) {
        let rc = unsafe { libc::kill(self.child.id() as i32, sig) };
        assert_eq!(rc, 0);
    }

    pub fn wait(mut self) -> std::process::ExitStatus {
        let status = self.child.wait().unwrap();
        drop(self.stderr_lines);
        status
    }
}

fn pump(stderr: ChildStderr) -> mpsc::Receiver<String> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stderr).lines().map_while(Result::ok) {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    rx
}

/// Minimal HTTP/1.1 POST; returns (status, body).
pub fn post(port: u16, path: &str, body: &str) -> (u16, String) {
    let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    write!(
        s,
        "POST {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    let status = resp.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = resp.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

/// Sigfox callback for the gas meter with the given pulse counter.
pub fn sigfox_uplink(counter: u32, time: i64) -> String {
    let c = counter.to_be_bytes();
    serde_json::json!({
        "device": "gas-1",
        "time": time,
        "data": format!("01{:02x}{:02x}{:02x}{:02x}", c[0], c[1], c[2], c[3]),
        "rssi": -120.0
    })
    .to_string()
}
