//! Long-running meterhub service: in-process bus, store, connectors, the
//! optional MQTT bridge and the HTTP endpoints.

pub mod bridge;
pub mod http;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use meterhub::bus::{Bus, Subscription, TopicFilter};
use meterhub::codecs::DecodeOptions;
use meterhub::config::{BridgeDirection, Config};
use meterhub::connectors::Dispatcher;
use meterhub::store::{self, Store, StoreError};

pub use bridge::{BridgeError, BridgeHandle, BridgeOptions};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot open store: {0}")]
    Store(#[from] StoreError),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

impl ServiceError {
    /// Bad endpoints are configuration errors; everything else is runtime.
    pub fn is_config(&self) -> bool {
        matches!(self, ServiceError::Bridge(_))
    }
}

pub struct Service {
    pub bus: Bus,
    pub store: Arc<Store>,
    pub addr: SocketAddr,
    subscriptions: Vec<Subscription>,
    bridge: Option<BridgeHandle>,
    http_stop: Option<oneshot::Sender<()>>,
    http: JoinHandle<std::io::Result<()>>,
}

/// Start everything the config describes. `broker` overrides the
/// configured bridge endpoint.
pub async fn start(config: &Config, broker: Option<&str>) -> Result<Service, ServiceError> {
    let store = Arc::new(Store::open(&config.store)?);
    let bus = Bus::new();
    let mut subscriptions = vec![store::attach(store.clone(), &bus)];

    let dispatcher = Dispatcher::new(
        config.registry(),
        bus.clone(),
        DecodeOptions {
            strict_crc: config.strict_crc,
        },
    );
    for c in config.connectors.iter().filter(|c| !c.is_http()) {
        let filter = TopicFilter::new(&c.subscribe_filter()).expect("validated config");
        subscriptions.push(dispatcher.attach_direct(c.technology, filter));
    }

    let bridge = match (broker, &config.broker) {
        (Some(endpoint), b) => {
            let mut options = BridgeOptions::new(endpoint, b.as_ref().map_or(BridgeDirection::Both, |b| b.direction));
            if let Some(b) = b {
                options.outbox_cap = b.outbox_cap;
            }
            Some(bridge::start_bridge(&bus, options)?)
        }
        (None, Some(b)) => {
            let mut options = BridgeOptions::new(&b.endpoint, b.direction);
            options.outbox_cap = b.outbox_cap;
            Some(bridge::start_bridge(&bus, options)?)
        }
        (None, None) => None,
    };

    let listener = TcpListener::bind(&config.http_listen)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: config.http_listen.clone(),
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| ServiceError::Bind {
        addr: config.http_listen.clone(),
        source,
    })?;
    let app = http::router(http::AppState::new(dispatcher, Some(store.clone())), &config.connectors);
    let (http_stop, stopped) = oneshot::channel::<()>();
    let http = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    log::info!("listening on http://{addr}");
    Ok(Service {
        bus,
        store,
        addr,
        subscriptions,
        bridge,
        http_stop: Some(http_stop),
        http,
    })
}

impl Service {
    pub fn bridge(&self) -> Option<&BridgeHandle> {
        self.bridge.as_ref()
    }

    /// Stop accepting traffic, drain the bridge briefly, and make sure
    /// everything acknowledged is on disk.
    pub async fn shutdown(mut self) -> Result<(), ServiceError> {
        if let Some(stop) = self.http_stop.take() {
            let _ = stop.send(());
        }
        if tokio::time::timeout(Duration::from_secs(5), &mut self.http).await.is_err() {
            self.http.abort();
        }
        if let Some(b) = self.bridge.take() {
            b.shutdown(Duration::from_secs(2)).await;
        }
        for s in self.subscriptions.drain(..) {
            s.unsubscribe();
        }
        self.store.flush()?;
        Ok(())
    }
}
