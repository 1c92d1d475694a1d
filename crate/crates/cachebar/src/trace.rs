//! Line-oriented workload traces and memory-footprint accounting.
//!
//! Trace grammar, one event per line (`#` starts a comment):
//!
//! ```text
//! map <domain> <vpage> <ppage>
//! unmap <domain> <vpage>
//! access <domain> <vpage> {r|w|f}
//! tick
//! ```

use thiserror::Error;

use crate::cache::{Cache, CacheGeometry, DomainId, PageId};
use crate::lifecycle::{AccessKind, LifecycleConfig, LifecycleError, PageTable, VPage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Map { domain: DomainId, vpage: VPage, ppage: PageId },
    Unmap { domain: DomainId, vpage: VPage },
    Access { domain: DomainId, vpage: VPage, kind: AccessKind },
    Tick,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceParseError {
    #[error("line {line}: unknown event `{word}`")]
    UnknownEvent { line: usize, word: String },
    #[error("line {line}: expected {expected} fields")]
    WrongArity { line: usize, expected: usize },
    #[error("line {line}: bad integer `{word}`")]
    BadInteger { line: usize, word: String },
    #[error("line {line}: access kind must be r, w or f, got `{word}`")]
    BadAccessKind { line: usize, word: String },
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, TraceParseError> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        let int = |word: &str| {
            word.parse::<u64>().map_err(|_| TraceParseError::BadInteger {
                line,
                word: word.to_string(),
            })
        };
        let event = match fields[0] {
            "map" => {
                if fields.len() != 4 {
                    return Err(TraceParseError::WrongArity { line, expected: 4 });
                }
                TraceEvent::Map {
                    domain: DomainId(int(fields[1])? as u32),
                    vpage: VPage(int(fields[2])?),
                    ppage: PageId(int(fields[3])?),
                }
            }
            "unmap" => {
                if fields.len() != 3 {
                    return Err(TraceParseError::WrongArity { line, expected: 3 });
                }
                TraceEvent::Unmap {
                    domain: DomainId(int(fields[1])? as u32),
                    vpage: VPage(int(fields[2])?),
                }
            }
            "access" => {
                if fields.len() != 4 {
                    return Err(TraceParseError::WrongArity { line, expected: 4 });
                }
                let kind = match fields[3] {
                    "r" => AccessKind::Read,
                    "w" => AccessKind::Write,
                    "f" => AccessKind::Clflush,
                    other => {
                        return Err(TraceParseError::BadAccessKind {
                            line,
                            word: other.to_string(),
                        })
                    }
                };
                TraceEvent::Access {
                    domain: DomainId(int(fields[1])? as u32),
                    vpage: VPage(int(fields[2])?),
                    kind,
                }
            }
            "tick" => {
                if fields.len() != 1 {
                    return Err(TraceParseError::WrongArity { line, expected: 1 });
                }
                TraceEvent::Tick
            }
            other => {
                return Err(TraceParseError::UnknownEvent { line, word: other.to_string() })
            }
        };
        events.push(event);
    }
    Ok(events)
}

pub fn format_trace(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        match e {
            TraceEvent::Map { domain, vpage, ppage } => {
                out.push_str(&format!("map {domain} {vpage} {ppage}\n"))
            }
            TraceEvent::Unmap { domain, vpage } => {
                out.push_str(&format!("unmap {domain} {vpage}\n"))
            }
            TraceEvent::Access { domain, vpage, kind } => {
                let k = match kind {
                    AccessKind::Read => "r",
                    AccessKind::Write => "w",
                    AccessKind::Clflush => "f",
                };
                out.push_str(&format!("access {domain} {vpage} {k}\n"))
            }
            TraceEvent::Tick => out.push_str("tick\n"),
        }
    }
    out
}

/// Applies one trace event to a lifecycle instance. Accesses to stale
/// mappings in generated workloads are tolerated only as hard errors here;
/// callers decide whether to propagate.
pub fn apply_event(
    pages: &mut PageTable,
    cache: &mut Cache,
    event: &TraceEvent,
) -> Result<(), LifecycleError> {
    match event {
        TraceEvent::Map { domain, vpage, ppage } => {
            pages.map_page(*domain, *vpage, *ppage)?;
        }
        TraceEvent::Unmap { domain, vpage } => {
            pages.unmap_page(*domain, *vpage)?;
        }
        TraceEvent::Access { domain, vpage, kind } => {
            pages.handle_access(cache, *domain, *vpage, *kind)?;
        }
        TraceEvent::Tick => {
            pages.tick(cache);
        }
    }
    Ok(())
}

/// Unique-page counts under the three sharing policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FootprintReport {
    /// Full cross-domain sharing (the baseline kernel).
    pub shared_pages: usize,
    /// No cross-domain sharing: every page duplicated per mapping domain.
    pub nosharing_pages: usize,
    /// Copy-on-access: originals plus live copies after the trace ran.
    pub cachebar_pages: usize,
}

/// Replays `events` under three policies and counts unique live physical
/// pages at the end of the trace.
pub fn footprint_report(
    geometry: CacheGeometry,
    events: &[TraceEvent],
) -> Result<FootprintReport, LifecycleError> {
    // Pass 1: plain sharing. Counts both the baseline footprint and, from
    // the same counters, the pre-duplicated no-sharing footprint.
    let mut plain = PageTable::new(LifecycleConfig {
        coa_enabled: false,
        ..LifecycleConfig::default()
    });
    let mut cache = Cache::new(geometry);
    for e in events {
        apply_event(&mut plain, &mut cache, e)?;
    }
    let shared_pages = plain.mapped_pages().len();
    let nosharing_pages: usize =
        plain.mapped_pages().iter().map(|p| plain.mapping_domains(*p).len()).sum();

    // Pass 2: the copy-on-access lifecycle with daemons.
    let mut coa = PageTable::new(LifecycleConfig::default());
    let mut cache = Cache::new(geometry);
    for e in events {
        apply_event(&mut coa, &mut cache, e)?;
    }
    let cachebar_pages = coa.mapped_pages().len();

    Ok(FootprintReport { shared_pages, nosharing_pages, cachebar_pages })
}

/// Synthetic workload: `domains` containers each map the same `shared`
/// pages plus `private` pages of their own, then sit idle over `ticks`
/// timer intervals (mapping only, no cross-domain accesses).
pub fn idle_workload(domains: u32, shared: u64, private: u64, ticks: usize) -> Vec<TraceEvent> {
    let mut events = Vec::new();
    for d in 0..domains {
        for s in 0..shared {
            events.push(TraceEvent::Map {
                domain: DomainId(d),
                vpage: VPage(s),
                ppage: PageId(s),
            });
        }
        for p in 0..private {
            events.push(TraceEvent::Map {
                domain: DomainId(d),
                vpage: VPage(shared + p),
                ppage: PageId(1000 + d as u64 * private + p),
            });
        }
    }
    for _ in 0..ticks {
        events.push(TraceEvent::Tick);
    }
    events
}

/// Synthetic workload: same layout as [`idle_workload`], but every fourth
/// domain touches every shared page in each interval, repeatedly triggering
/// copy-on-access.
pub fn busy_workload(domains: u32, shared: u64, private: u64, ticks: usize) -> Vec<TraceEvent> {
    let mut events = idle_workload(domains, shared, private, 0);
    for _ in 0..ticks {
        for d in (0..domains).step_by(4) {
            for s in 0..shared {
                events.push(TraceEvent::Access {
                    domain: DomainId(d),
                    vpage: VPage(s),
                    kind: AccessKind::Read,
                });
            }
        }
        events.push(TraceEvent::Tick);
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> CacheGeometry {
        CacheGeometry::derive(16 * 64 * 64, 16, 64, 4096).unwrap()
    }

    #[test]
    fn parse_round_trip() {
        let text = "map 1 0 7\naccess 1 0 r\n# comment\naccess 1 0 f\ntick\nunmap 1 0\n";
        let events = parse_trace(text).unwrap();
        assert_eq!(events.len(), 5);
        assert_eq!(parse_trace(&format_trace(&events)).unwrap(), events);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(matches!(
            parse_trace("jump 1 2 3"),
            Err(TraceParseError::UnknownEvent { .. })
        ));
        assert!(matches!(
            parse_trace("access 1 0 x"),
            Err(TraceParseError::BadAccessKind { .. })
        ));
        assert!(matches!(parse_trace("map 1 2"), Err(TraceParseError::WrongArity { .. })));
    }

    #[test]
    fn idle_workload_has_zero_copy_overhead() {
        let events = idle_workload(8, 16, 4, 30);
        let report = footprint_report(geom(), &events).unwrap();
        assert_eq!(report.cachebar_pages, report.shared_pages);
        assert_eq!(report.shared_pages, 16 + 8 * 4);
        assert_eq!(report.nosharing_pages, 8 * 16 + 8 * 4);
    }

    #[test]
    fn all_busy_approaches_nosharing() {
        // Every domain touches every shared page every tick.
        let mut events = idle_workload(4, 8, 0, 0);
        for _ in 0..25 {
            for d in 0..4 {
                for s in 0..8 {
                    events.push(TraceEvent::Access {
                        domain: DomainId(d),
                        vpage: VPage(s),
                        kind: AccessKind::Read,
                    });
                }
            }
            events.push(TraceEvent::Tick);
        }
        let report = footprint_report(geom(), &events).unwrap();
        assert!(report.cachebar_pages <= report.nosharing_pages);
        // Under constant contention the copy population reaches the
        // no-sharing level: one private page per (domain, shared page).
        assert_eq!(report.cachebar_pages, report.nosharing_pages);
    }

    #[test]
    fn single_domain_counts_agree() {
        let events = idle_workload(1, 8, 3, 10);
        let report = footprint_report(geom(), &events).unwrap();
        assert_eq!(report.shared_pages, report.cachebar_pages);
        assert_eq!(report.shared_pages, report.nosharing_pages);
    }

    #[test]
    fn busy_workload_between_bounds() {
        let events = busy_workload(8, 16, 4, 40);
        let r = footprint_report(geom(), &events).unwrap();
        assert!(r.shared_pages <= r.cachebar_pages);
        assert!(r.cachebar_pages <= r.nosharing_pages);
    }
}
