//! Round-trip benchmark against a copy node: publish on the send topic,
//! wait for the echo on the receive topic, record the elapsed time.

use std::fmt::{self, Write as _};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{format_size, BenchmarkConfig};
use crate::middleware::{Graph, MwError, NodeKind, Subscriber};
use crate::msg::{MessageInstance, MsgError, MsgKind, TypeHandle};

/// Sequence number of warm-up messages; never used for measurements.
const PROBE_SEQ: u32 = u32::MAX;
const PROBE_INTERVAL: Duration = Duration::from_millis(50);
const POLL: Duration = Duration::from_millis(10);
const BURST_PAYLOAD: u32 = 64;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no echo on {recv} within {waited:?}; is a copy node subscribed to {send}?")]
    NoEcho { send: String, recv: String, waited: Duration },
    #[error("benchmark payload type bench/Payload is not registered")]
    MissingType,
    #[error(transparent)]
    Middleware(#[from] MwError),
    #[error(transparent)]
    Msg(#[from] MsgError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: u32,
    pub samples_us: Vec<f64>,
    pub median_us: Option<f64>,
    /// Median round trip of the software mapping over this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    /// False when an iteration timed out; the samples are partial.
    pub complete: bool,
    /// Time the copy node spent per message, when it runs in this process.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub node_samples_us: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_median_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BurstResult {
    pub sent: u32,
    pub received: u32,
    /// Echoes arrived in publish order without gaps.
    pub in_order: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub label: String,
    pub iterations: u32,
    pub rows: Vec<SizeRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burst: Option<BurstResult>,
}

pub fn median(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn us(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

impl BenchmarkReport {
    pub fn timed_out(&self) -> bool {
        self.rows.iter().any(|r| !r.complete)
    }

    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
            || self.burst.as_ref().is_some_and(|b| !b.in_order || b.received != b.sent)
    }

    /// Whether medians grow with size, allowing each step to fall by at most
    /// `rel` of the previous median plus `abs_us`.
    pub fn medians_nondecreasing(&self, rel: f64, abs_us: f64) -> bool {
        let mut rows: Vec<&SizeRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.size);
        rows.windows(2).all(|w| match (w[0].median_us, w[1].median_us) {
            (Some(a), Some(b)) => b >= a * (1.0 - rel) - abs_us,
            _ => false,
        })
    }

    /// Fills `speedup` with software median over this report's median, size
    /// by size.
    pub fn with_speedup_over(mut self, software: &BenchmarkReport) -> Self {
        for r in &mut self.rows {
            let sw = software.rows.iter().find(|s| s.size == r.size).and_then(|s| s.median_us);
            r.speedup = match (sw, r.median_us) {
                (Some(s), Some(h)) if h > 0.0 => Some(s / h),
                _ => None,
            };
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.prec$}"))
}

fn size_label(s: u32) -> String {
    let f = format_size(s);
    match f.find(|c: char| !c.is_ascii_digit()) {
        Some(i) => format!("{} {}", &f[..i], if &f[i..] == "B" { "Byte" } else { &f[i..] }),
        None => f,
    }
}

impl fmt::Display for BenchmarkReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} ({} iterations)", self.label, self.iterations)?;
        writeln!(f, "{:<10} {:>14} {:>15} {:>9}", "Size", "t_node [us]", "t_round [us]", "samples")?;
        for r in &self.rows {
            let mark = if r.complete { "" } else { " (partial)" };
            writeln!(
                f,
                "{:<10} {:>14} {:>15} {:>6}/{}{mark}",
                size_label(r.size),
                fmt_opt(r.node_median_us, 1),
                fmt_opt(r.median_us, 1),
                r.samples_us.len(),
                self.iterations
            )?;
            if let Some(e) = &r.error {
                writeln!(f, "           error: {e}")?;
            }
        }
        if let Some(b) = &self.burst {
            writeln!(
                f,
                "burst: {}/{} echoed, {}",
                b.received,
                b.sent,
                if b.in_order { "in order" } else { "OUT OF ORDER" }
            )?;
        }
        Ok(())
    }
}

/// Software and hardware runs of the same topology, rendered side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub software: BenchmarkReport,
    pub hardware: BenchmarkReport,
}

impl Comparison {
    pub fn new(software: BenchmarkReport, hardware: BenchmarkReport) -> Self {
        let hardware = hardware.with_speedup_over(&software);
        Comparison { software, hardware }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>13} {:>13} {:>7} {:>14} {:>14} {:>8}",
            "Size", "t_copy-SW", "t_copy-HW", "S_copy", "t_round-SW", "t_round-HW", "S_round"
        );
        for hw in &self.hardware.rows {
            let sw = self.software.rows.iter().find(|r| r.size == hw.size);
            let node_sw = sw.and_then(|r| r.node_median_us);
            let s_copy = match (node_sw, hw.node_median_us) {
                (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                _ => None,
            };
            let _ = writeln!(
                out,
                "{:<10} {:>13} {:>13} {:>7} {:>14} {:>14} {:>8}",
                size_label(hw.size),
                fmt_opt(node_sw, 1),
                fmt_opt(hw.node_median_us, 1),
                fmt_opt(s_copy, 2),
                fmt_opt(sw.and_then(|r| r.median_us), 1),
                fmt_opt(hw.median_us, 1),
                fmt_opt(hw.speedup, 2),
            );
        }
        let _ = writeln!(out, "times in microseconds (medians over {} iterations)", self.hardware.iterations);
        f.write_str(&out)
    }
}

/// What to measure.
#[derive(Debug, Clone)]
pub struct PingPongPlan {
    pub sizes: Vec<u32>,
    pub iterations: u32,
    /// Back-to-back messages published after the timed runs, checked for
    /// loss and order. Zero skips the check.
    pub burst: u32,
    pub seed: u64,
    pub label: String,
}

struct Endpoints {
    ty: TypeHandle,
    publisher: crate::middleware::Publisher,
    subscriber: Subscriber,
}

impl Endpoints {
    fn message(&self, graph: &Graph, seq: u32, data: &[u8]) -> Result<MessageInstance, BenchError> {
        let reg = graph.registry();
        let m = reg.alloc_with(graph.arena(), self.ty, &[("data", data.len() as u32)])?;
        reg.write_word(&m, "seq", seq)?;
        reg.write_sequence(&m, "data", data)?;
        Ok(m)
    }

    fn publish(&self, graph: &Graph, seq: u32, data: &[u8]) -> Result<(), BenchError> {
        let m = self.message(graph, seq, data)?;
        self.publisher.publish(&m)?;
        Ok(())
    }

    /// Next echo other than a probe, as (seq, payload).
    fn take(&self, graph: &Graph, deadline: Instant) -> Result<Option<(u32, Vec<u8>)>, BenchError> {
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let m = match self.subscriber.take(Some(left)) {
                Ok(m) => m,
                Err(MwError::Timeout) => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            let reg = graph.registry();
            let seq = reg.read_word(&m, "seq")?;
            if seq != PROBE_SEQ {
                return Ok(Some((seq, reg.read_sequence(&m, "data")?)));
            }
        }
    }
}

/// Runs the ping-pong measurement from a fresh node on `graph`. `node_times`
/// returns the copy node's per-message times when it lives in this process.
pub fn run_ping_pong(
    graph: &Graph,
    cfg: &BenchmarkConfig,
    plan: &PingPongPlan,
    node_times: Option<&dyn Fn() -> Vec<Duration>>,
) -> Result<BenchmarkReport, BenchError> {
    let reg = graph.registry();
    let ty = reg.lookup_parts("bench", MsgKind::Msg, "Payload").ok_or(BenchError::MissingType)?;
    let mut name = String::from("bench_pingpong");
    let node = loop {
        match graph.create_node(&name, NodeKind::Software) {
            Ok(n) => break n,
            Err(MwError::DuplicateNode(_)) => name.push('_'),
            Err(e) => return Err(e.into()),
        }
    };
    let depth = plan.burst as usize + 8;
    let ep = Endpoints {
        ty,
        subscriber: node.create_subscriber(&cfg.recv_topic, ty, depth, POLL)?,
        publisher: node.create_publisher(&cfg.send_topic, ty)?,
    };
    let timeout = Duration::from_millis(cfg.timeout_ms);

    // warm up until the far side answers, then let stray probes settle
    let start = Instant::now();
    let warm_deadline = start + timeout.max(Duration::from_secs(5));
    loop {
        ep.publish(graph, PROBE_SEQ, &[])?;
        match ep.subscriber.take(Some(PROBE_INTERVAL)) {
            Ok(_) => break,
            Err(MwError::Timeout) if Instant::now() < warm_deadline => continue,
            Err(MwError::Timeout) => {
                return Err(BenchError::NoEcho {
                    send: cfg.send_topic.clone(),
                    recv: cfg.recv_topic.clone(),
                    waited: start.elapsed(),
                })
            }
            Err(e) => return Err(e.into()),
        }
    }

    let mut rng = StdRng::seed_from_u64(plan.seed);
    let mut seq: u32 = 0;
    let mut rows = Vec::new();
    for &size in &plan.sizes {
        let mut data = vec![0u8; size as usize];
        let mut row = SizeRow {
            size,
            samples_us: Vec::new(),
            median_us: None,
            speedup: None,
            complete: true,
            node_samples_us: Vec::new(),
            node_median_us: None,
            error: None,
        };
        let node_before = node_times.map(|f| f().len());
        'iters: for _ in 0..plan.iterations {
            rng.fill(&mut data[..]);
            let expected = seq;
            seq += 1;
            let msg = ep.message(graph, expected, &data)?;
            let t0 = Instant::now();
            ep.publisher.publish(&msg)?;
            let deadline = t0 + timeout;
            loop {
                match ep.take(graph, deadline)? {
                    None => {
                        row.complete = false;
                        log::warn!("{}: timed out at size {size}", plan.label);
                        break 'iters;
                    }
                    Some((s, _)) if s < expected => continue, // echo of a timed-out iteration
                    Some((s, payload)) => {
                        let elapsed = t0.elapsed();
                        if s != expected {
                            row.error = Some(format!("expected echo {expected}, got {s}"));
                            break 'iters;
                        }
                        if payload != data {
                            row.error = Some(format!("echo {s} differs from the published payload"));
                            break 'iters;
                        }
                        row.samples_us.push(us(elapsed));
                        break;
                    }
                }
            }
        }
        if let (Some(f), Some(before)) = (node_times, node_before) {
            let after = f();
            row.node_samples_us = after.get(before..).unwrap_or_default().iter().map(|&d| us(d)).collect();
            row.node_median_us = median(&row.node_samples_us);
        }
        row.median_us = median(&row.samples_us);
        rows.push(row);
    }

    let burst = if plan.burst > 0 {
        let first = seq;
        let mut data = vec![0u8; BURST_PAYLOAD as usize];
        let mut payloads = Vec::new();
        for i in 0..plan.burst {
            rng.fill(&mut data[..]);
            payloads.push(data.clone());
            ep.publish(graph, first + i, &data)?;
        }
        let deadline = Instant::now() + timeout;
        let mut received = 0;
        let mut in_order = true;
        while received < plan.burst {
            match ep.take(graph, deadline)? {
                None => break,
                Some((s, _)) if s < first => continue,
                Some((s, payload)) => {
                    if s != first + received || payload != payloads[received as usize] {
                        in_order = false;
                    }
                    received += 1;
                }
            }
        }
        Some(BurstResult { sent: plan.burst, received, in_order })
    } else {
        None
    };

    Ok(BenchmarkReport { label: plan.label.clone(), iterations: plan.iterations, rows, burst })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(size: u32, median: f64) -> SizeRow {
        SizeRow {
            size,
            samples_us: vec![median],
            median_us: Some(median),
            speedup: None,
            complete: true,
            node_samples_us: vec![],
            node_median_us: None,
            error: None,
        }
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn monotonic_with_slack() {
        let r = BenchmarkReport {
            label: "x".into(),
            iterations: 1,
            rows: vec![row(4, 100.0), row(8192, 95.0), row(1 << 20, 900.0)],
            burst: None,
        };
        assert!(!r.medians_nondecreasing(0.0, 0.0));
        assert!(r.medians_nondecreasing(0.1, 0.0));
        assert!(r.medians_nondecreasing(0.0, 5.0));
    }

    #[test]
    fn speedup_and_json_keys() {
        let sw = BenchmarkReport { label: "sw".into(), iterations: 1, rows: vec![row(4, 100.0)], burst: None };
        let hw = BenchmarkReport { label: "hw".into(), iterations: 1, rows: vec![row(4, 50.0)], burst: None };
        let c = Comparison::new(sw.clone(), hw);
        assert_eq!(c.hardware.rows[0].speedup, Some(2.0));
        let v: serde_json::Value = serde_json::from_str(&sw.to_json()).unwrap();
        let r = &v["rows"][0];
        for k in ["size", "samples_us", "median_us"] {
            assert!(r.get(k).is_some(), "{k}");
        }
        assert!(r.get("speedup").is_none());
        assert!(c.to_string().contains("S_round"));
        assert!(c.to_string().contains("4 Byte"));
    }
}
