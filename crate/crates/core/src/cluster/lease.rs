//! Token ownership across proxy instances.
//!
//! Every instance computes the owner of a token by rendezvous hashing over
//! the members it has heard from recently, and holds a renewable lease on
//! the tokens it owns. A token is served by at most one instance: a winner
//! still waits for a foreign lease to expire, and a fresh instance stays
//! passive for one lease lifetime so it learns existing leases first.

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant, SystemTime};

use sha2::{Digest, Sha256};

use crate::scheduler::{RateBudget, ServiceKind};

/// Short stable identifier for a token; the secret itself never leaves the
/// instance.
pub fn fingerprint(secret: &str) -> String {
    hex::encode(&Sha256::digest(secret.as_bytes())[..8])
}

fn score(member: &str, fingerprint: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(member.as_bytes());
    h.update(b"/");
    h.update(fingerprint.as_bytes());
    h.finalize().into()
}

/// Highest-random-weight owner of `fingerprint` among `members`; ties go to
/// the lexicographically smaller name.
pub fn rendezvous_owner<'a, I>(fingerprint: &str, members: I) -> Option<&'a str>
where
    I: IntoIterator<Item = &'a str>,
{
    members
        .into_iter()
        .map(|m| (score(m, fingerprint), std::cmp::Reverse(m)))
        .max()
        .map(|(_, std::cmp::Reverse(m))| m)
}

/// Owner of every fingerprint with each member capped at
/// `ceil(tokens / members)`. Tokens are placed in fingerprint order, each on
/// its highest-scoring member that still has room, so every member that
/// sees the same membership computes the same assignment.
pub fn bounded_assignment(fingerprints: &[String], members: &[String]) -> HashMap<String, String> {
    let mut out = HashMap::new();
    if members.is_empty() {
        return out;
    }
    let cap = fingerprints.len().div_ceil(members.len());
    let mut load: HashMap<&str, usize> = HashMap::new();
    let mut fps: Vec<&String> = fingerprints.iter().collect();
    fps.sort();
    fps.dedup();
    for fp in fps {
        let owner = rendezvous_owner(
            fp,
            members.iter().map(String::as_str).filter(|m| load.get(m).copied().unwrap_or(0) < cap),
        )
        .expect("total capacity covers every token");
        *load.entry(owner).or_default() += 1;
        out.insert(fp.clone(), owner.to_string());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ForeignLease {
    holder: String,
    expires: Instant,
}

/// Whether this instance should serve a token right now.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ownership {
    Owned,
    Standby,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharedBudget {
    pub budget: RateBudget,
    pub observed_at: SystemTime,
}

#[derive(Debug)]
pub struct LeaseTable {
    self_id: String,
    ttl: Duration,
    started: Instant,
    expect_peers: bool,
    tokens: Vec<String>,
    heard: HashMap<String, Instant>,
    foreign: HashMap<String, ForeignLease>,
    held: HashMap<String, Instant>,
    budgets: HashMap<(String, ServiceKind), SharedBudget>,
}

impl LeaseTable {
    pub fn new(self_id: impl Into<String>, ttl: Duration, expect_peers: bool, now: Instant) -> Self {
        Self {
            self_id: self_id.into(),
            ttl,
            started: now,
            expect_peers,
            tokens: Vec::new(),
            heard: HashMap::new(),
            foreign: HashMap::new(),
            held: HashMap::new(),
            budgets: HashMap::new(),
        }
    }

    /// The full token set, so ownership can be balanced across members.
    /// Without it each token goes to its plain rendezvous winner.
    pub fn with_tokens(mut self, fingerprints: Vec<String>) -> Self {
        self.tokens = fingerprints;
        self
    }

    /// Which member should own `fingerprint` given the live membership.
    pub fn assigned_owner(&self, fingerprint: &str, now: Instant) -> String {
        let members = self.live_members(now);
        if self.tokens.iter().any(|t| t == fingerprint) {
            if let Some(owner) = bounded_assignment(&self.tokens, &members).remove(fingerprint) {
                return owner;
            }
        }
        rendezvous_owner(fingerprint, members.iter().map(String::as_str)).unwrap_or(&self.self_id).to_string()
    }

    pub fn self_id(&self) -> &str {
        &self.self_id
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn heard_from(&mut self, member: &str, now: Instant) {
        if member != self.self_id {
            self.heard.insert(member.to_string(), now);
        }
    }

    /// Members heard from within one lease lifetime, plus self, sorted.
    pub fn live_members(&self, now: Instant) -> Vec<String> {
        let mut set: BTreeSet<String> = self
            .heard
            .iter()
            .filter(|(_, &at)| now.saturating_duration_since(at) < self.ttl)
            .map(|(m, _)| m.clone())
            .collect();
        set.insert(self.self_id.clone());
        set.into_iter().collect()
    }

    pub fn warming_up(&self, now: Instant) -> bool {
        self.expect_peers && now < self.started + self.ttl
    }

    /// Record a lease announced by another member.
    pub fn ingest_lease(&mut self, holder: &str, fingerprint: &str, remaining: Duration, now: Instant) {
        if holder == self.self_id {
            return;
        }
        self.heard_from(holder, now);
        let expires = now + remaining.min(self.ttl);
        self.foreign.insert(fingerprint.to_string(), ForeignLease { holder: holder.to_string(), expires });
    }

    fn foreign_holder(&self, fingerprint: &str, now: Instant) -> Option<&str> {
        self.foreign
            .get(fingerprint)
            .filter(|l| l.expires > now)
            .map(|l| l.holder.as_str())
    }

    /// Decide ownership of one token and renew or drop our lease on it.
    /// `in_flight` keeps a lease alive after losing the rendezvous so an
    /// open call is never shared with the new owner.
    pub fn evaluate(&mut self, fingerprint: &str, in_flight: bool, now: Instant) -> Ownership {
        let holding = self.held.get(fingerprint).is_some_and(|&exp| exp > now);
        if self.warming_up(now) && !holding {
            return Ownership::Standby;
        }
        let winner = self.assigned_owner(fingerprint, now) == self.self_id;
        let keep = match self.foreign_holder(fingerprint, now) {
            None => winner || (holding && in_flight),
            // both sides claim it: the rendezvous winner of the pair keeps it
            Some(other) => {
                let pair_winner = rendezvous_owner(fingerprint, [other, self.self_id.as_str()]) == Some(self.self_id.as_str());
                holding && (in_flight || pair_winner)
            }
        };
        if keep {
            self.held.insert(fingerprint.to_string(), now + self.ttl);
            Ownership::Owned
        } else {
            self.held.remove(fingerprint);
            Ownership::Standby
        }
    }

    /// Our leases with their remaining lifetime.
    pub fn held(&self, now: Instant) -> Vec<(String, Duration)> {
        let mut out: Vec<_> = self
            .held
            .iter()
            .filter(|(_, &exp)| exp > now)
            .map(|(fp, &exp)| (fp.clone(), exp - now))
            .collect();
        out.sort();
        out
    }

    /// Record a locally observed budget for publication.
    pub fn publish_budget(&mut self, fingerprint: &str, service: ServiceKind, budget: RateBudget, observed_at: SystemTime) {
        self.budgets.insert((fingerprint.to_string(), service), SharedBudget { budget, observed_at });
    }

    /// Take a budget reported by a peer. Returns it when it is newer than
    /// what we knew; stale or self-originated reports are ignored.
    pub fn ingest_budget(
        &mut self,
        from: &str,
        fingerprint: &str,
        service: ServiceKind,
        budget: RateBudget,
        observed_at: SystemTime,
    ) -> Option<RateBudget> {
        if from == self.self_id {
            return None;
        }
        let key = (fingerprint.to_string(), service);
        if self.budgets.get(&key).is_some_and(|known| known.observed_at >= observed_at) {
            return None;
        }
        self.budgets.insert(key, SharedBudget { budget, observed_at });
        Some(budget)
    }

    pub fn budget(&self, fingerprint: &str, service: ServiceKind) -> Option<SharedBudget> {
        self.budgets.get(&(fingerprint.to_string(), service)).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TTL: Duration = Duration::from_secs(15);

    fn budget(remaining: u64) -> RateBudget {
        let mut b = RateBudget::full(5000);
        b.remaining = remaining;
        b
    }

    #[test]
    fn fingerprint_hides_secret() {
        let fp = fingerprint("ghp_secretvalue");
        assert_eq!(fp.len(), 16);
        assert!(!fp.contains("secret"));
        assert_eq!(fp, fingerprint("ghp_secretvalue"));
    }

    #[test]
    fn rendezvous_matches_brute_force_oracle() {
        let members = ["a", "b", "c", "d"];
        for i in 0..200 {
            let fp = fingerprint(&format!("token-{i}"));
            let oracle = members
                .iter()
                .max_by(|x, y| {
                    let sx = Sha256::digest(format!("{x}/{fp}").as_bytes());
                    let sy = Sha256::digest(format!("{y}/{fp}").as_bytes());
                    sx.cmp(&sy).then(y.cmp(x))
                })
                .copied();
            assert_eq!(rendezvous_owner(&fp, members), oracle);
        }
    }

    proptest! {
        #[test]
        fn removing_a_member_only_moves_its_tokens(n in 2usize..6, gone in 0usize..6, seed in any::<u32>()) {
            let gone = gone % n;
            let members: Vec<String> = (0..n).map(|i| format!("m{i}")).collect();
            let rest: Vec<&str> = members.iter().enumerate().filter(|(i, _)| *i != gone).map(|(_, m)| m.as_str()).collect();
            for t in 0..40 {
                let fp = fingerprint(&format!("{seed}-{t}"));
                let before = rendezvous_owner(&fp, members.iter().map(String::as_str)).unwrap();
                let after = rendezvous_owner(&fp, rest.iter().copied()).unwrap();
                if before != members[gone] {
                    prop_assert_eq!(before, after);
                }
            }
        }
    }

    #[test]
    fn bounded_assignment_balances_and_agrees() {
        let members: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        for seed in 0..100 {
            let fps: Vec<String> = (0..2).map(|i| fingerprint(&format!("s{seed}-{i}"))).collect();
            let asg = bounded_assignment(&fps, &members);
            let owners: BTreeSet<&String> = asg.values().collect();
            assert_eq!(owners.len(), 2, "two tokens over two members split one each");
            let mut reversed = members.clone();
            reversed.reverse();
            assert_eq!(asg, bounded_assignment(&fps, &reversed));
        }
        let fps: Vec<String> = (0..7).map(|i| fingerprint(&format!("t{i}"))).collect();
        let three: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let asg = bounded_assignment(&fps, &three);
        for m in &three {
            assert!(asg.values().filter(|o| *o == m).count() <= 3);
        }
    }

    #[test]
    fn balanced_tables_split_two_tokens() {
        let t0 = Instant::now();
        let fps = vec![fingerprint("tok-a"), fingerprint("tok-b")];
        let mut a = LeaseTable::new("a", TTL, false, t0).with_tokens(fps.clone());
        let mut b = LeaseTable::new("b", TTL, false, t0).with_tokens(fps.clone());
        a.heard_from("b", t0);
        b.heard_from("a", t0);
        let owned_a: Vec<_> = fps.iter().filter(|fp| a.evaluate(fp, false, t0) == Ownership::Owned).collect();
        let owned_b: Vec<_> = fps.iter().filter(|fp| b.evaluate(fp, false, t0) == Ownership::Owned).collect();
        assert_eq!(owned_a.len(), 1);
        assert_eq!(owned_b.len(), 1);
        assert_ne!(owned_a, owned_b);
    }

    #[test]
    fn warm_up_blocks_acquisition_when_peers_expected() {
        let t0 = Instant::now();
        let mut table = LeaseTable::new("a", TTL, true, t0);
        assert_eq!(table.evaluate("fp", false, t0), Ownership::Standby);
        assert_eq!(table.evaluate("fp", false, t0 + TTL), Ownership::Owned);
        let mut solo = LeaseTable::new("a", TTL, false, t0);
        assert_eq!(solo.evaluate("fp", false, t0), Ownership::Owned);
    }

    #[test]
    fn two_tables_partition_tokens() {
        let t0 = Instant::now();
        let mut a = LeaseTable::new("a", TTL, true, t0);
        let mut b = LeaseTable::new("b", TTL, true, t0);
        let t = t0 + TTL;
        a.heard_from("b", t);
        b.heard_from("a", t);
        for i in 0..50 {
            let fp = fingerprint(&format!("tok{i}"));
            let oa = a.evaluate(&fp, false, t);
            let ob = b.evaluate(&fp, false, t);
            assert_ne!(oa, ob, "exactly one owner for {fp}");
        }
    }

    #[test]
    fn winner_waits_for_foreign_lease() {
        let t0 = Instant::now();
        let mut a = LeaseTable::new("a", TTL, false, t0);
        // find a token "a" wins against "b"
        let fp = (0..)
            .map(|i| fingerprint(&format!("x{i}")))
            .find(|fp| rendezvous_owner(fp, ["a", "b"]) == Some("a"))
            .unwrap();
        a.ingest_lease("b", &fp, Duration::from_secs(5), t0);
        assert_eq!(a.evaluate(&fp, false, t0 + Duration::from_secs(1)), Ownership::Standby);
        assert_eq!(a.evaluate(&fp, false, t0 + Duration::from_secs(5)), Ownership::Owned);
    }

    #[test]
    fn failover_after_member_goes_silent() {
        let t0 = Instant::now();
        let mut a = LeaseTable::new("a", TTL, false, t0);
        let fp = (0..)
            .map(|i| fingerprint(&format!("y{i}")))
            .find(|fp| rendezvous_owner(fp, ["a", "b"]) == Some("b"))
            .unwrap();
        a.ingest_lease("b", &fp, TTL, t0);
        assert_eq!(a.evaluate(&fp, false, t0), Ownership::Standby);
        // b stops talking: its lease and membership both lapse after one ttl
        assert_eq!(a.evaluate(&fp, false, t0 + TTL), Ownership::Owned);
    }

    #[test]
    fn losing_owner_keeps_lease_while_in_flight() {
        let t0 = Instant::now();
        let mut a = LeaseTable::new("a", TTL, false, t0);
        let fp = (0..)
            .map(|i| fingerprint(&format!("z{i}")))
            .find(|fp| rendezvous_owner(fp, ["a", "b"]) == Some("b"))
            .unwrap();
        assert_eq!(a.evaluate(&fp, false, t0), Ownership::Owned);
        a.heard_from("b", t0);
        assert_eq!(a.evaluate(&fp, true, t0), Ownership::Owned);
        assert_eq!(a.evaluate(&fp, false, t0), Ownership::Standby);
        assert!(a.held(t0).is_empty());
    }

    #[test]
    fn budget_newest_wins() {
        let t0 = Instant::now();
        let w0 = SystemTime::now();
        let mut a = LeaseTable::new("a", TTL, false, t0);
        let later = w0 + Duration::from_secs(1);
        assert_eq!(a.ingest_budget("b", "fp", ServiceKind::Rest, budget(10), later), Some(budget(10)));
        assert_eq!(a.ingest_budget("b", "fp", ServiceKind::Rest, budget(20), w0), None);
        assert_eq!(a.ingest_budget("a", "fp", ServiceKind::Rest, budget(5), later + Duration::from_secs(1)), None);
        assert_eq!(a.budget("fp", ServiceKind::Rest).unwrap().budget.remaining, 10);
        a.publish_budget("fp", ServiceKind::Rest, budget(8), later + Duration::from_secs(2));
        assert_eq!(a.ingest_budget("b", "fp", ServiceKind::Rest, budget(9), later + Duration::from_secs(1)), None);
    }
}
