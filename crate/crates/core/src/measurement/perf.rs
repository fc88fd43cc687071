//! Hardware counter collection through an external profiler.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::shell::shell_quote;
use super::Result;

/// Canonical counter names collected by default.
pub const COUNTER_NAMES: [&str; 29] = [
    "cycles",
    "instructions",
    "cache-references",
    "cache-misses",
    "L1-dcache-loads",
    "L1-dcache-load-misses",
    "L1-dcache-prefetches",
    "L1-dcache-prefetch-misses",
    "LLC-prefetches",
    "LLC-prefetch-misses",
    "dTLB-stores",
    "dTLB-store-misses",
    "branches",
    "branch-misses",
    "bus-cycles",
    "L1-dcache-stores",
    "L1-dcache-store-misses",
    "L1-icache-loads",
    "L1-icache-load-misses",
    "LLC-loads",
    "LLC-load-misses",
    "LLC-stores",
    "LLC-store-misses",
    "dTLB-loads",
    "dTLB-load-misses",
    "iTLB-loads",
    "iTLB-load-misses",
    "branch-loads",
    "branch-load-misses",
];

/// Wraps a run command so that counters land in a file, then reads them back.
pub trait Profiler: Send + Sync {
    fn wrap(&self, command: &str, output: &Path) -> String;
    fn collect(&self, output: &Path) -> Result<BTreeMap<String, u64>>;
}

/// `perf stat` in CSV mode.
#[derive(Debug, Clone)]
pub struct PerfStat {
    pub binary: String,
    pub events: Vec<String>,
}

impl Default for PerfStat {
    fn default() -> Self {
        PerfStat {
            binary: "perf".to_string(),
            events: COUNTER_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Profiler for PerfStat {
    fn wrap(&self, command: &str, output: &Path) -> String {
        format!(
            "{} stat -x, -o {} -e {} -- sh -c {}",
            self.binary,
            shell_quote(&output.to_string_lossy()),
            self.events.join(","),
            shell_quote(command)
        )
    }

    fn collect(&self, output: &Path) -> Result<BTreeMap<String, u64>> {
        Ok(parse_perf_csv(&fs::read_to_string(output)?))
    }
}

/// Parse `perf stat -x,` output. Unsupported or uncounted events are omitted,
/// never zero-filled; only canonical names are kept.
pub fn parse_perf_csv(text: &str) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            continue;
        }
        // Some perf versions append a modifier such as ":u" to the event name.
        let event = fields[2].split(':').next().unwrap_or("");
        if !COUNTER_NAMES.contains(&event) {
            continue;
        }
        if let Ok(v) = fields[0].trim().parse::<u64>() {
            out.insert(event.to_string(), v);
        }
    }
    out
}
