//! Running cluster member: gossips leases and budgets with peers over TCP
//! and toggles pool workers between active and standby.

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;
use tracing::{debug, info};

use super::lease::{fingerprint, LeaseTable, Ownership};
use super::wire::{read_message, write_message, Message, WireBudget};
use crate::scheduler::budget::epoch_millis;
use crate::scheduler::{Pool, RateBudget, ServiceKind, WorkerId};

#[derive(Debug, Clone)]
pub struct ClusterSettings {
    pub instance_id: String,
    pub listen: SocketAddr,
    pub peers: Vec<String>,
    pub lease_ttl: Duration,
}

struct Shared {
    pool: Arc<Pool>,
    table: Mutex<LeaseTable>,
    by_fp: HashMap<String, WorkerId>,
    owned: Mutex<Vec<bool>>,
}

impl Shared {
    fn table(&self) -> MutexGuard<'_, LeaseTable> {
        self.table.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn owned(&self) -> MutexGuard<'_, Vec<bool>> {
        self.owned.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Handle to a running cluster member. Dropping it stops gossip; the pool
/// keeps whatever ownership it had.
pub struct ClusterNode {
    addr: SocketAddr,
    shared: Arc<Shared>,
    tasks: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for ClusterNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClusterNode").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl Drop for ClusterNode {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl ClusterNode {
    pub async fn start(pool: Arc<Pool>, settings: ClusterSettings) -> io::Result<Self> {
        let listener = TcpListener::bind(settings.listen).await?;
        Self::start_on(pool, settings, listener)
    }

    pub fn start_on(pool: Arc<Pool>, settings: ClusterSettings, listener: TcpListener) -> io::Result<Self> {
        let addr = listener.local_addr()?;
        let now = Instant::now();
        let expect_peers = !settings.peers.is_empty();
        let by_fp: HashMap<String, WorkerId> = pool.workers().iter().map(|w| (fingerprint(w.secret()), w.id())).collect();
        let table = LeaseTable::new(settings.instance_id.clone(), settings.lease_ttl, expect_peers, now)
            .with_tokens(by_fp.keys().cloned().collect());
        let n = pool.workers().len();
        let shared = Arc::new(Shared { pool, table: Mutex::new(table), by_fp, owned: Mutex::new(vec![true; n]) });
        // nothing is served until ownership is settled by the first tick
        for i in 0..n {
            shared.pool.set_standby(WorkerId(i), true);
        }
        shared.owned().iter_mut().for_each(|o| *o = false);
        info!(instance = %settings.instance_id, %addr, peers = settings.peers.len(), "cluster member started");

        let tasks = vec![
            tokio::spawn(accept_loop(Arc::clone(&shared), listener)),
            tokio::spawn(tick_loop(Arc::clone(&shared), settings.peers.clone(), settings.lease_ttl)),
        ];
        Ok(Self { addr, shared, tasks })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Workers this instance currently serves.
    pub fn owned(&self) -> Vec<WorkerId> {
        self.shared.owned().iter().enumerate().filter(|(_, &o)| o).map(|(i, _)| WorkerId(i)).collect()
    }

    pub fn live_members(&self) -> Vec<String> {
        self.shared.table().live_members(Instant::now())
    }

    pub fn shutdown(self) {}
}

fn to_wire(b: &RateBudget) -> WireBudget {
    WireBudget { limit: b.limit, remaining: b.remaining, reset: (b.reset_at != 0).then_some(b.reset_at), limited: b.limited }
}

fn from_wire(w: &WireBudget) -> RateBudget {
    RateBudget { limit: w.limit, remaining: w.remaining.min(w.limit), reset_at: w.reset.unwrap_or(0), limited: w.limited }
}

fn ingest(shared: &Shared, msg: Message) {
    let now = Instant::now();
    match msg {
        Message::Hello { instance } => shared.table().heard_from(&instance, now),
        Message::Lease { instance, fingerprint, expiry } => {
            shared.table().ingest_lease(&instance, &fingerprint, Duration::from_millis(expiry), now);
        }
        Message::Budget { instance, fingerprint, service, budgets, observed_at } => {
            let Some(&id) = shared.by_fp.get(&fingerprint) else { return };
            let at = UNIX_EPOCH + Duration::from_millis(observed_at);
            let fresh = {
                let mut table = shared.table();
                table.heard_from(&instance, now);
                table.ingest_budget(&instance, &fingerprint, service, from_wire(&budgets), at)
            };
            // our own observations win for tokens we serve
            if let Some(b) = fresh {
                if !shared.owned()[id.0] {
                    shared.pool.set_budget(id, service, b);
                }
            }
        }
    }
}

async fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    loop {
        let Ok((stream, peer)) = listener.accept().await else { continue };
        let shared = Arc::clone(&shared);
        tokio::spawn(async move {
            let mut stream = stream;
            loop {
                match read_message(&mut stream).await {
                    Ok(Some(msg)) => ingest(&shared, msg),
                    Ok(None) => break,
                    Err(e) => {
                        debug!(%peer, "dropping cluster connection: {e}");
                        break;
                    }
                }
            }
        });
    }
}

/// Re-evaluate ownership and announce our state.
fn tick(shared: &Shared) -> Vec<Message> {
    let now = Instant::now();
    let wall = SystemTime::now();
    let pool = &shared.pool;
    let mut changes = Vec::new();
    let mut msgs = Vec::new();
    let self_id;
    {
        let mut table = shared.table();
        self_id = table.self_id().to_string();
        let owned = shared.owned();
        for (fp, &id) in &shared.by_fp {
            let decision = table.evaluate(fp, pool.is_in_flight(id), now);
            let own = decision == Ownership::Owned;
            if own != owned[id.0] {
                changes.push((id, own));
            }
        }
        for (fp, remaining) in table.held(now) {
            msgs.push(Message::Lease { instance: self_id.clone(), fingerprint: fp, expiry: remaining.as_millis() as u64 });
        }
    }
    for &(id, own) in &changes {
        info!(worker = %id, own, "cluster ownership changed");
        shared.owned()[id.0] = own;
        pool.set_standby(id, !own);
    }
    let owned = shared.owned().clone();
    let snaps = pool.snapshots();
    let mut table = shared.table();
    for (fp, &id) in &shared.by_fp {
        if !owned[id.0] {
            continue;
        }
        for service in ServiceKind::ALL {
            let b = *snaps[id.0].budget(service);
            table.publish_budget(fp, service, b, wall);
            msgs.push(Message::Budget {
                instance: self_id.clone(),
                fingerprint: fp.clone(),
                service,
                budgets: to_wire(&b),
                observed_at: epoch_millis(wall),
            });
        }
    }
    msgs.insert(0, Message::Hello { instance: self_id });
    msgs
}

struct PeerLink {
    addr: String,
    stream: Option<TcpStream>,
}

impl PeerLink {
    async fn send_all(&mut self, msgs: &[Message], connect_timeout: Duration) {
        if self.stream.is_none() {
            match tokio::time::timeout(connect_timeout, TcpStream::connect(&self.addr)).await {
                Ok(Ok(s)) => {
                    let _ = s.set_nodelay(true);
                    self.stream = Some(s);
                }
                _ => return,
            }
        }
        let Some(stream) = self.stream.as_mut() else { return };
        for m in msgs {
            if let Err(e) = write_message(stream, m).await {
                debug!(peer = %self.addr, "cluster send failed: {e}");
                self.stream = None;
                return;
            }
        }
    }
}

async fn tick_loop(shared: Arc<Shared>, peers: Vec<String>, ttl: Duration) {
    let period = (ttl / 3).max(Duration::from_millis(10));
    let connect_timeout = period.min(Duration::from_millis(500));
    let mut links: Vec<PeerLink> = peers.into_iter().map(|addr| PeerLink { addr, stream: None }).collect();
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        interval.tick().await;
        let msgs = tick(&shared);
        for link in &mut links {
            link.send_all(&msgs, connect_timeout).await;
        }
    }
}
