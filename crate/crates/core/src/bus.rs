//! In-process publish/subscribe hub with MQTT topic semantics.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock, Weak};

use chrono::{DateTime, Utc};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusError {
    #[error("invalid topic filter {0:?}")]
    InvalidFilter(String),
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
}

/// A subscription pattern: `+` matches one level, a final `#` matches the rest.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    levels: Vec<String>,
}

impl TopicFilter {
    pub fn new(filter: &str) -> Result<TopicFilter, BusError> {
        let levels: Vec<String> = filter.split('/').map(str::to_string).collect();
        let last = levels.len() - 1;
        for (i, level) in levels.iter().enumerate() {
            let ok = !level.is_empty()
                && match level.as_str() {
                    "#" => i == last,
                    "+" => true,
                    other => !other.contains(['+', '#']),
                };
            if !ok {
                return Err(BusError::InvalidFilter(filter.to_string()));
            }
        }
        Ok(TopicFilter { levels })
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn matches(&self, topic: &str) -> bool {
        let mut parts = topic.split('/');
        for level in &self.levels {
            match level.as_str() {
                "#" => return true,
                "+" => {
                    if parts.next().is_none() {
                        return false;
                    }
                }
                exact => {
                    if parts.next() != Some(exact) {
                        return false;
                    }
                }
            }
        }
        parts.next().is_none()
    }
}

impl FromStr for TopicFilter {
    type Err = BusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicFilter::new(s)
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.levels.join("/"))
    }
}

pub fn topic_matches(filter: &TopicFilter, topic: &str) -> bool {
    filter.matches(topic)
}

/// A publishable topic: non-empty levels, no wildcards.
pub fn validate_topic(topic: &str) -> Result<(), BusError> {
    if topic.split('/').any(|l| l.is_empty() || l.contains(['+', '#'])) {
        return Err(BusError::InvalidTopic(topic.to_string()));
    }
    Ok(())
}

/// Where a message entered the bus. The bridge uses this to avoid echoing
/// messages it received from the external broker back out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Local,
    Bridge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusMessage {
    pub topic: String,
    pub body: Vec<u8>,
    pub published_at: DateTime<Utc>,
    pub origin: Origin,
}

impl BusMessage {
    pub fn new(topic: &str, body: impl Into<Vec<u8>>) -> Result<BusMessage, BusError> {
        validate_topic(topic)?;
        Ok(BusMessage {
            topic: topic.to_string(),
            body: body.into(),
            published_at: Utc::now(),
            origin: Origin::Local,
        })
    }

    pub fn body_str(&self) -> Option<&str> {
        std::str::from_utf8(&self.body).ok()
    }
}

type Consumer = Box<dyn FnMut(&BusMessage) + Send>;

struct Sub {
    id: u64,
    filter: TopicFilter,
    active: AtomicBool,
    consumer: Mutex<Consumer>,
}

#[derive(Default)]
struct Inner {
    next_id: AtomicU64,
    subs: RwLock<Vec<Arc<Sub>>>,
}

impl Inner {
    fn remove(&self, id: u64) {
        let mut subs = self.subs.write().unwrap();
        if let Some(pos) = subs.iter().position(|s| s.id == id) {
            subs[pos].active.store(false, Ordering::SeqCst);
            subs.remove(pos);
        }
    }
}

/// Cheap to clone; all clones share the same subscriptions.
///
/// Consumers run on the publishing thread. A consumer must not publish to a
/// topic its own subscription matches.
#[derive(Clone, Default)]
pub struct Bus {
    inner: Arc<Inner>,
}

/// Handle returned by [`Bus::subscribe`]. Dropping it does not unsubscribe.
#[derive(Debug, Clone)]
pub struct Subscription {
    id: u64,
    bus: Weak<Inner>,
}

impl fmt::Debug for Inner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bus")
            .field("subscriptions", &self.subs.read().unwrap().len())
            .finish()
    }
}

impl Subscription {
    /// Stop delivery. Calling it again is a no-op.
    pub fn unsubscribe(&self) {
        if let Some(inner) = self.bus.upgrade() {
            inner.remove(self.id);
        }
    }
}

impl fmt::Debug for Bus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.inner.fmt(f)
    }
}

impl Bus {
    pub fn new() -> Bus {
        Bus::default()
    }

    pub fn subscribe<F>(&self, filter: TopicFilter, consumer: F) -> Subscription
    where
        F: FnMut(&BusMessage) + Send + 'static,
    {
        let id = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        let sub = Arc::new(Sub {
            id,
            filter,
            active: AtomicBool::new(true),
            consumer: Mutex::new(Box::new(consumer)),
        });
        self.inner.subs.write().unwrap().push(sub);
        Subscription {
            id,
            bus: Arc::downgrade(&self.inner),
        }
    }

    /// Subscribe with a channel as the consumer.
    pub fn subscribe_channel(&self, filter: TopicFilter) -> (Subscription, mpsc::Receiver<BusMessage>) {
        let (tx, rx) = mpsc::channel();
        let sub = self.subscribe(filter, move |m| {
            let _ = tx.send(m.clone());
        });
        (sub, rx)
    }

    /// Deliver to every matching subscription; returns the number of deliveries.
    pub fn publish(&self, message: &BusMessage) -> usize {
        let matching: Vec<Arc<Sub>> = self
            .inner
            .subs
            .read()
            .unwrap()
            .iter()
            .filter(|s| s.filter.matches(&message.topic))
            .cloned()
            .collect();
        let mut delivered = 0;
        for sub in matching {
            let mut consumer = sub.consumer.lock().unwrap_or_else(|e| e.into_inner());
            if !sub.active.load(Ordering::SeqCst) {
                continue;
            }
            consumer(message);
            delivered += 1;
        }
        delivered
    }

    pub fn publish_bytes(&self, topic: &str, body: impl Into<Vec<u8>>) -> Result<usize, BusError> {
        Ok(self.publish(&BusMessage::new(topic, body)?))
    }

    pub fn subscription_count(&self) -> usize {
        self.inner.subs.read().unwrap().len()
    }
}
