//! Structured scenario reports: per-link rates, per-method counters,
//! end-to-end records, store summaries and the trace hash. The JSON
//! rendering is byte-stable for a given seed, which is what the
//! determinism check compares.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::node::E2eRecord;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkReport {
    pub delivered: u64,
    pub lost: u64,
    pub rate_keys_per_s: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MethodReport {
    pub method: u8,
    /// Bridge output for methods 1-2; per-key send count for 3-4.
    pub produced: u64,
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
    pub pending: u64,
    pub dos_events: u64,
    pub replays: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreReport {
    pub entries: u64,
    pub consumed: u64,
    pub integrity_alarms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub duration_ns: u64,
    pub links: BTreeMap<String, LinkReport>,
    pub methods: BTreeMap<String, MethodReport>,
    pub e2e: Vec<E2eRecord>,
    pub stores: BTreeMap<String, StoreReport>,
    pub counters: BTreeMap<String, u64>,
    pub trace_hash: String,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Counter reconciliation: delivered + lost + pending = sent for
    /// every per-key method. Violations are listed, not panicked on.
    pub fn reconcile(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for (pair, m) in &self.methods {
            if m.method >= 3 && m.delivered + m.lost + m.pending != m.sent {
                bad.push(format!(
                    "{pair}: delivered {} + lost {} + pending {} != sent {}",
                    m.delivered, m.lost, m.pending, m.sent
                ));
            }
        }
        bad
    }

    pub fn human_table(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "scenario report (seed {}, {:.3} s simulated)", self.seed, self.duration_ns as f64 / 1e9);
        let _ = writeln!(out, "\nlinks ({}):", self.links.len());
        let _ = writeln!(out, "  {:<52} {:>9} {:>7} {:>9}  label", "supplier", "delivered", "lost", "keys/s");
        for (supplier, l) in &self.links {
            let _ = writeln!(
                out,
                "  {:<52} {:>9} {:>7} {:>9.3}  {}",
                supplier, l.delivered, l.lost, l.rate_keys_per_s, l.label
            );
        }
        let _ = writeln!(out, "\nborder methods ({}):", self.methods.len());
        let _ = writeln!(
            out,
            "  {:<28} {:>6} {:>8} {:>9} {:>6} {:>7} {:>6} {:>7}",
            "pair", "method", "sent", "delivered", "lost", "pending", "dos", "replays"
        );
        for (pair, m) in &self.methods {
            let _ = writeln!(
                out,
                "  {:<28} {:>6} {:>8} {:>9} {:>6} {:>7} {:>6} {:>7}",
                pair,
                m.method,
                if m.method <= 2 { m.produced } else { m.sent },
                m.delivered,
                m.lost,
                m.pending,
                m.dos_events,
                m.replays
            );
        }
        let _ = writeln!(out, "\nend-to-end requests ({}):", self.e2e.len());
        for rec in &self.e2e {
            let latency = rec
                .completed_at_ns
                .map(|t| format!("{:.3} ms", (t - rec.requested_at_ns) as f64 / 1e6))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "  {} -> {}  {}  {}  [{}]",
                rec.source,
                rec.destination,
                rec.e2e_key_id,
                rec.status,
                rec.label.clone().unwrap_or_else(|| latency.clone())
            );
            if rec.completed_at_ns.is_some() {
                let _ = writeln!(out, "    latency {latency}");
            }
        }
        let _ = writeln!(out, "\nstores:");
        for (node, s) in &self.stores {
            let _ = writeln!(
                out,
                "  {:<28} {:>6} entries, {:>6} consumed, {} integrity alarms",
                node, s.entries, s.consumed, s.integrity_alarms
            );
        }
        let _ = writeln!(out, "\ntrace hash: {}", self.trace_hash);
        for problem in self.reconcile() {
            let _ = writeln!(out, "RECONCILIATION FAILURE: {problem}");
        }
        out
    }
}
