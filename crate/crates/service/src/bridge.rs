//! Mirror of `meterhub/#` traffic to and from an external MQTT broker.
//!
//! Outgoing messages wait in a bounded outbox while the broker is away and are
//! flushed in order after reconnecting. Unacknowledged messages from a broken
//! session are put back at the front of the outbox, so delivery is
//! at-least-once.

use std::collections::{HashMap, VecDeque};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rumqttc::{AsyncClient, Event, MqttOptions, Outgoing, Packet, QoS};
use thiserror::Error;
use tokio::sync::Notify;
use tokio::task::JoinHandle;

use meterhub::bus::{Bus, BusMessage, Origin, Subscription, TopicFilter};
use meterhub::config::BridgeDirection;

pub const BRIDGE_FILTER: &str = "meterhub/#";
pub const DEFAULT_OUTBOX_CAP: usize = 10_000;
/// Messages handed to the MQTT client but not yet acknowledged.
const WINDOW: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BridgeError {
    #[error("bad broker endpoint {0:?} (expected host:port or mqtt://host:port)")]
    BadEndpoint(String),
}

/// Parse `host`, `host:port` or `mqtt://host:port`.
pub fn parse_endpoint(endpoint: &str) -> Result<(String, u16), BridgeError> {
    let bad = || BridgeError::BadEndpoint(endpoint.to_string());
    let rest = endpoint
        .strip_prefix("mqtt://")
        .or_else(|| endpoint.strip_prefix("tcp://"))
        .unwrap_or(endpoint);
    let rest = rest.trim_end_matches('/');
    let (host, port) = match rest.rsplit_once(':') {
        Some((h, p)) => (h, p.parse().map_err(|_| bad())?),
        None => (rest, 1883),
    };
    if host.is_empty() || host.contains('/') {
        return Err(bad());
    }
    Ok((host.to_string(), port))
}

/// Exponential reconnect delay: doubles from `initial` up to `max`.
#[derive(Debug, Clone)]
pub struct Backoff {
    initial: Duration,
    max: Duration,
    next: Duration,
}

impl Backoff {
    pub fn new(initial: Duration, max: Duration) -> Backoff {
        Backoff {
            initial,
            max,
            next: initial,
        }
    }

    pub fn next_delay(&mut self) -> Duration {
        let d = self.next;
        self.next = (self.next * 2).min(self.max);
        d
    }

    pub fn reset(&mut self) {
        self.next = self.initial;
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff::new(Duration::from_secs(1), Duration::from_secs(60))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutMessage {
    pub topic: String,
    pub body: Vec<u8>,
}

/// FIFO with a hard cap; the oldest message is dropped on overflow.
#[derive(Debug)]
pub struct Outbox {
    cap: usize,
    queue: VecDeque<OutMessage>,
    dropped: u64,
}

impl Outbox {
    pub fn new(cap: usize) -> Outbox {
        Outbox {
            cap: cap.max(1),
            queue: VecDeque::new(),
            dropped: 0,
        }
    }

    pub fn push(&mut self, msg: OutMessage) {
        if self.queue.len() >= self.cap {
            self.queue.pop_front();
            self.dropped += 1;
        }
        self.queue.push_back(msg);
    }

    /// Put messages from a broken session back in front, oldest first.
    pub fn requeue_front(&mut self, msgs: impl DoubleEndedIterator<Item = OutMessage>) {
        for m in msgs.rev() {
            self.queue.push_front(m);
        }
        while self.queue.len() > self.cap {
            self.queue.pop_front();
            self.dropped += 1;
        }
    }

    pub fn pop(&mut self) -> Option<OutMessage> {
        self.queue.pop_front()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

#[derive(Debug, Default)]
pub struct BridgeStats {
    pub connected: AtomicBool,
    /// Outgoing messages acknowledged by the broker.
    pub acked: AtomicU64,
    /// Incoming messages delivered to the local bus.
    pub received: AtomicU64,
    pub connects: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct BridgeOptions {
    pub endpoint: String,
    pub direction: BridgeDirection,
    pub outbox_cap: usize,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
    pub client_id: String,
}

impl BridgeOptions {
    pub fn new(endpoint: &str, direction: BridgeDirection) -> BridgeOptions {
        BridgeOptions {
            endpoint: endpoint.to_string(),
            direction,
            outbox_cap: DEFAULT_OUTBOX_CAP,
            backoff_initial: Duration::from_secs(1),
            backoff_max: Duration::from_secs(60),
            client_id: format!("meterhub-{}", std::process::id()),
        }
    }
}

fn fingerprint(topic: &str, body: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    topic.hash(&mut h);
    body.hash(&mut h);
    h.finish()
}

/// State shared between the bus subscription, the feeder and the event loop.
#[derive(Default)]
struct Session {
    /// Handed to the client, waiting for a packet id.
    handed: VecDeque<OutMessage>,
    /// Sent with a packet id, waiting for PUBACK.
    inflight: VecDeque<(u16, OutMessage)>,
    /// Messages we published that the broker will echo back to our own
    /// subscription when mirroring in both directions.
    echoes: HashMap<u64, u32>,
}

struct Shared {
    outbox: Mutex<Outbox>,
    session: Mutex<Session>,
    wake: Notify,
    stats: BridgeStats,
    stop: AtomicBool,
    stop_notify: Notify,
}

pub struct BridgeHandle {
    shared: Arc<Shared>,
    subscription: Option<Subscription>,
    task: JoinHandle<()>,
}

impl BridgeHandle {
    pub fn stats(&self) -> &BridgeStats {
        &self.shared.stats
    }

    pub fn is_connected(&self) -> bool {
        self.shared.stats.connected.load(Ordering::SeqCst)
    }

    pub fn queued(&self) -> usize {
        let inflight = {
            let s = self.shared.session.lock().unwrap();
            s.handed.len() + s.inflight.len()
        };
        self.shared.outbox.lock().unwrap().len() + inflight
    }

    /// Messages discarded because the outbox was full.
    pub fn dropped(&self) -> u64 {
        self.shared.outbox.lock().unwrap().dropped()
    }

    /// Stop mirroring, giving queued messages up to `grace` to drain.
    pub async fn shutdown(mut self, grace: Duration) {
        if let Some(sub) = self.subscription.take() {
            sub.unsubscribe();
        }
        let deadline = tokio::time::Instant::now() + grace;
        while self.queued() > 0 && self.is_connected() && tokio::time::Instant::now() < deadline {
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.stop_notify.notify_waiters();
        self.shared.wake.notify_waiters();
        if tokio::time::timeout(Duration::from_secs(2), &mut self.task).await.is_err() {
            self.task.abort();
        }
    }
}

/// Start a bridge on the current Tokio runtime.
pub fn start_bridge(bus: &Bus, options: BridgeOptions) -> Result<BridgeHandle, BridgeError> {
    let (host, port) = parse_endpoint(&options.endpoint)?;
    let shared = Arc::new(Shared {
        outbox: Mutex::new(Outbox::new(options.outbox_cap)),
        session: Mutex::new(Session::default()),
        wake: Notify::new(),
        stats: BridgeStats::default(),
        stop: AtomicBool::new(false),
        stop_notify: Notify::new(),
    });
    let outgoing = matches!(options.direction, BridgeDirection::Out | BridgeDirection::Both);
    let subscription = outgoing.then(|| {
        let shared = shared.clone();
        bus.subscribe(TopicFilter::new(BRIDGE_FILTER).unwrap(), move |msg| {
            if msg.origin != Origin::Local {
                return;
            }
            shared.outbox.lock().unwrap().push(OutMessage {
                topic: msg.topic.clone(),
                body: msg.body.clone(),
            });
            shared.wake.notify_one();
        })
    });
    let task = tokio::spawn(run(bus.clone(), shared.clone(), options, host, port));
    Ok(BridgeHandle {
        shared,
        subscription,
        task,
    })
}

/// Move queued messages to the client while the ack window has room.
async fn feed(client: AsyncClient, shared: Arc<Shared>, track_echoes: bool) {
    loop {
        loop {
            let msg = {
                let mut session = shared.session.lock().unwrap();
                if session.handed.len() + session.inflight.len() >= WINDOW {
                    break;
                }
                let Some(msg) = shared.outbox.lock().unwrap().pop() else {
                    break;
                };
                if track_echoes {
                    *session.echoes.entry(fingerprint(&msg.topic, &msg.body)).or_default() += 1;
                }
                session.handed.push_back(msg.clone());
                msg
            };
            if client
                .try_publish(msg.topic.clone(), QoS::AtLeastOnce, false, msg.body.clone())
                .is_err()
            {
                // the session is going away; the event loop requeues `handed`
                return;
            }
        }
        tokio::select! {
            _ = shared.wake.notified() => {}
            _ = tokio::time::sleep(Duration::from_millis(100)) => {}
        }
        if shared.stop.load(Ordering::SeqCst) {
            return;
        }
    }
}

fn requeue(shared: &Shared) {
    let mut session = shared.session.lock().unwrap();
    let inflight: Vec<OutMessage> = session.inflight.drain(..).map(|(_, m)| m).collect();
    let handed: Vec<OutMessage> = session.handed.drain(..).collect();
    session.echoes.clear();
    drop(session);
    shared
        .outbox
        .lock()
        .unwrap()
        .requeue_front(inflight.into_iter().chain(handed));
}

async fn run(bus: Bus, shared: Arc<Shared>, options: BridgeOptions, host: String, port: u16) {
    let incoming = matches!(options.direction, BridgeDirection::In | BridgeDirection::Both);
    let track_echoes = incoming && options.direction == BridgeDirection::Both;
    let mut backoff = Backoff::new(options.backoff_initial, options.backoff_max);
    while !shared.stop.load(Ordering::SeqCst) {
        let mut mqtt = MqttOptions::new(options.client_id.clone(), host.clone(), port);
        mqtt.set_keep_alive(Duration::from_secs(30));
        mqtt.set_clean_session(true);
        mqtt.set_max_packet_size(1 << 20, 1 << 20);
        let (client, mut eventloop) = AsyncClient::new(mqtt, WINDOW * 2);
        let mut feeder: Option<JoinHandle<()>> = None;
        loop {
            let event = tokio::select! {
                ev = eventloop.poll() => ev,
                _ = shared.stop_notify.notified() => break,
            };
            match event {
                Ok(Event::Incoming(Packet::ConnAck(_))) => {
                    log::info!("bridge connected to {host}:{port}");
                    backoff.reset();
                    shared.stats.connected.store(true, Ordering::SeqCst);
                    shared.stats.connects.fetch_add(1, Ordering::SeqCst);
                    if incoming {
                        let _ = client.try_subscribe(BRIDGE_FILTER, QoS::AtLeastOnce);
                    }
                    feeder = Some(tokio::spawn(feed(client.clone(), shared.clone(), track_echoes)));
                }
                Ok(Event::Outgoing(Outgoing::Publish(pkid))) => {
                    let mut session = shared.session.lock().unwrap();
                    if let Some(msg) = session.handed.pop_front() {
                        session.inflight.push_back((pkid, msg));
                    }
                }
                Ok(Event::Incoming(Packet::PubAck(ack))) => {
                    let mut session = shared.session.lock().unwrap();
                    if let Some(pos) = session.inflight.iter().position(|(id, _)| *id == ack.pkid) {
                        session.inflight.remove(pos);
                        shared.stats.acked.fetch_add(1, Ordering::SeqCst);
                    }
                    drop(session);
                    shared.wake.notify_one();
                }
                Ok(Event::Incoming(Packet::Publish(p))) if incoming => {
                    if track_echoes {
                        let mut session = shared.session.lock().unwrap();
                        let fp = fingerprint(&p.topic, &p.payload);
                        if let Some(n) = session.echoes.get_mut(&fp) {
                            *n -= 1;
                            if *n == 0 {
                                session.echoes.remove(&fp);
                            }
                            continue;
                        }
                    }
                    match BusMessage::new(&p.topic, p.payload.to_vec()) {
                        Ok(mut msg) => {
                            msg.origin = Origin::Bridge;
                            bus.publish(&msg);
                            shared.stats.received.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(e) => log::warn!("bridge: ignoring incoming message: {e}"),
                    }
                }
                Ok(_) => {}
                Err(e) => {
                    log::warn!("bridge connection to {host}:{port} lost: {e}");
                    break;
                }
            }
        }
        shared.stats.connected.store(false, Ordering::SeqCst);
        if let Some(f) = feeder.take() {
            f.abort();
            let _ = f.await;
        }
        requeue(&shared);
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let delay = backoff.next_delay();
        tokio::select! {
            _ = tokio::time::sleep(delay) => {}
            _ = shared.stop_notify.notified() => break,
        }
    }
    shared.stats.connected.store(false, Ordering::SeqCst);
}
