//! The integrated machine: cache model, page lifecycle and cacheable
//! queues behind one access path with the combined reserved-bit fault
//! handler.
//!
//! An access first resolves any copy-on-access fault (possibly redirecting
//! the domain to a private copy), then any non-cacheable fault (admitting
//! the page to the domain's queue, pushing out the least-recently-ranked
//! page with NC bits and a flush), and finally performs the memory
//! operation against the cache. A shared periodic daemon re-sorts queues by
//! ACCESSED-bit counts, demotes idle pages, merges idle copies (every tenth
//! run) and redraws budgets from the configured distribution (every tenth
//! run).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cache::{AccessResult, BlockAddr, Cache, CacheGeometry, DomainId, PageId};
use crate::cacheability::{BudgetAssignment, QueueTable};
use crate::lifecycle::{
    AccessKind, Demotion, LifecycleConfig, LifecycleError, MergeEvent, PageTable, VPage,
};
use crate::optimizer::BudgetPmf;

/// Modeled access latencies in arbitrary cycle units. A reserved-bit fault
/// costs an order of magnitude more than a miss, which is what lets the
/// attack harness discard fault-inflated probe readings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LatencyModel {
    pub hit: u32,
    pub miss: u32,
    pub fault: u32,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { hit: 40, miss: 200, fault: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub geometry: CacheGeometry,
    pub lifecycle: LifecycleConfig,
    /// Enables the cacheable-queue mechanism. Off, only copy-on-access
    /// (per `lifecycle.coa_enabled`) stands between domains.
    pub cacheability_enabled: bool,
    /// Budget given to every domain until the first redraw.
    pub default_budget: usize,
    pub latency: LatencyModel,
    /// Copy-daemon merges and budget redraws run every this-many ticks.
    pub redraw_period: u64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(geometry: CacheGeometry) -> Self {
        SimConfig {
            geometry,
            lifecycle: LifecycleConfig { nc_on_map: true, ..LifecycleConfig::default() },
            cacheability_enabled: true,
            default_budget: geometry.ways,
            latency: LatencyModel::default(),
            redraw_period: crate::lifecycle::COPY_DAEMON_PERIOD,
            seed: 0,
        }
    }

    /// Copy-on-access only: no queues, no NC bits.
    pub fn coa_only(geometry: CacheGeometry) -> Self {
        let mut cfg = Self::new(geometry);
        cfg.cacheability_enabled = false;
        cfg.lifecycle.nc_on_map = false;
        cfg
    }
}

/// Everything one access did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimAccess {
    /// Physical page the access landed on, after any redirection.
    pub page: PageId,
    pub coa_fault: bool,
    pub nc_fault: bool,
    /// Copy the domain was redirected to, when copy-on-access ran.
    pub copied: Option<PageId>,
    /// Cache outcome for loads/stores on a cacheable page.
    pub cache: Option<AccessResult>,
    /// Page the domain's queue pushed out, if the admission overflowed.
    pub queue_evicted: Option<PageId>,
    pub flushed_lines: usize,
    pub latency: u32,
}

impl SimAccess {
    pub fn faulted(&self) -> bool {
        self.coa_fault || self.nc_fault
    }
}

/// Fig.-style combined fault resolution outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultResolution {
    pub coa_handled: bool,
    pub nc_handled: bool,
    pub copied: Option<PageId>,
    pub queue_evicted: Option<PageId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(
        "fault on ({domain}, {vpage}) with no reserved bit set; escalating to the generic handler"
    )]
    UnknownFault { domain: DomainId, vpage: VPage },
}

/// Per-interval event-log record: budget and queue evictions per domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntervalLogEntry {
    pub tick: u64,
    pub domain: DomainId,
    pub budget: usize,
    pub evictions: u64,
}

/// Outcome of one combined daemon tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickReport {
    pub tick: u64,
    pub demotions: Vec<Demotion>,
    pub merges: Vec<MergeEvent>,
    pub redraw: Option<BudgetAssignment>,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    cache: Cache,
    pages: PageTable,
    queues: QueueTable,
    budget_pmf: Option<BudgetPmf>,
    rng: ChaCha8Rng,
    ticks: u64,
    eviction_counts: std::collections::BTreeMap<DomainId, u64>,
    interval_log: Vec<IntervalLogEntry>,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Self {
        let mut lifecycle_cfg = cfg.lifecycle;
        lifecycle_cfg.nc_on_map = cfg.cacheability_enabled;
        Simulator {
            cache: Cache::new(cfg.geometry),
            pages: PageTable::new(lifecycle_cfg),
            queues: QueueTable::new(cfg.default_budget),
            budget_pmf: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            ticks: 0,
            eviction_counts: std::collections::BTreeMap::new(),
            interval_log: Vec::new(),
            cfg,
        }
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.cfg.geometry
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn pages(&self) -> &PageTable {
        &self.pages
    }

    pub fn queues(&self) -> &QueueTable {
        &self.queues
    }

    pub fn latency_model(&self) -> LatencyModel {
        self.cfg.latency
    }

    pub fn interval_log(&self) -> &[IntervalLogEntry] {
        &self.interval_log
    }

    /// Budget distribution used by periodic redraws.
    pub fn set_budget_pmf(&mut self, pmf: BudgetPmf) {
        self.budget_pmf = Some(pmf);
    }

    pub fn map(&mut self, domain: DomainId, vpage: VPage, ppage: PageId) -> Result<(), SimError> {
        self.pages.map_page(domain, vpage, ppage)?;
        if self.cfg.cacheability_enabled {
            self.queues.register_domain(domain);
        }
        Ok(())
    }

    pub fn unmap(&mut self, domain: DomainId, vpage: VPage) -> Result<(), SimError> {
        let page = self
            .pages
            .pte(domain, vpage)
            .ok_or(LifecycleError::NoSuchMapping { domain, vpage })?
            .ppage;
        self.pages.unmap_page(domain, vpage)?;
        // When the domain dropped its last mapping, its queue entry dies
        // and the page is flushed like any other queue departure.
        if self.cfg.cacheability_enabled && self.pages.counter(domain, page) == 0 {
            let color = self.cfg.geometry.color_of(page);
            if self.queues.drop_entry(domain, color, page) {
                self.cache.flush_page(page);
            }
        }
        Ok(())
    }

    pub fn set_budget(&mut self, domain: DomainId, budget: usize) {
        self.queues.register_domain(domain);
        let evicted = self.queues.set_budget(&mut self.pages, &mut self.cache, domain, budget);
        *self.eviction_counts.entry(domain).or_insert(0) += evicted.len() as u64;
    }

    pub fn budget(&self, domain: DomainId) -> usize {
        self.queues.budget(domain)
    }

    /// Access through the full fault path, touching block `block` of the
    /// resolved physical page.
    pub fn access_block(
        &mut self,
        domain: DomainId,
        vpage: VPage,
        kind: AccessKind,
        block: usize,
    ) -> Result<SimAccess, SimError> {
        let pte = *self
            .pages
            .pte(domain, vpage)
            .ok_or(LifecycleError::NoSuchMapping { domain, vpage })?;
        let coa_pending = self.pages.config().coa_enabled && pte.coa;
        let original = pte.ppage;

        // COA half: state transition or redirection to a copy.
        let res = self.pages.resolve_access(domain, vpage, kind)?;
        debug_assert_eq!(res.faulted, coa_pending);
        if let Some(copy) = res.copied {
            // The domain no longer maps the original; drop the stale queue
            // entry so it stops eating budget.
            if self.cfg.cacheability_enabled && copy != original {
                let color = self.cfg.geometry.color_of(original);
                self.queues.drop_entry(domain, color, original);
            }
        }

        // NC half on the (possibly repointed) PTE.
        let mut nc_fault = false;
        let mut queue_evicted = None;
        let mut cacheable = true;
        if self.cfg.cacheability_enabled {
            let pte = *self.pages.pte(domain, vpage).expect("pte exists");
            if pte.nc {
                nc_fault = true;
                let color = self.cfg.geometry.color_of(pte.ppage);
                let r = self.queues.fault_nc(
                    &mut self.pages,
                    &mut self.cache,
                    domain,
                    vpage,
                    pte.ppage,
                    color,
                );
                if let Some(evicted) = r.evicted {
                    *self.eviction_counts.entry(domain).or_insert(0) += 1;
                    queue_evicted = Some(evicted);
                }
                cacheable = r.cacheable;
            }
        }

        // The memory operation itself.
        let block_addr = BlockAddr { page: res.page, block };
        let (cache_result, flushed_lines) = match kind {
            AccessKind::Read | AccessKind::Write => {
                if cacheable {
                    (Some(self.cache.access(domain, block_addr)), 0)
                } else {
                    (None, 0) // uncacheable: served from memory
                }
            }
            AccessKind::Clflush => (None, self.cache.flush_block(block_addr)),
        };

        let faulted = res.faulted || nc_fault;
        let latency = if faulted {
            self.cfg.latency.fault
        } else {
            match cache_result {
                Some(AccessResult::Hit { .. }) => self.cfg.latency.hit,
                _ => self.cfg.latency.miss,
            }
        };

        Ok(SimAccess {
            page: res.page,
            coa_fault: res.faulted,
            nc_fault,
            copied: res.copied,
            cache: cache_result,
            queue_evicted,
            flushed_lines,
            latency,
        })
    }

    pub fn access(
        &mut self,
        domain: DomainId,
        vpage: VPage,
        kind: AccessKind,
    ) -> Result<SimAccess, SimError> {
        self.access_block(domain, vpage, kind, 0)
    }

    /// The reserved-bit fault handler in isolation: resolves the COA fault
    /// first, then the NC fault; a trap with neither bit set escalates.
    pub fn handle_fault(
        &mut self,
        domain: DomainId,
        vpage: VPage,
        kind: AccessKind,
    ) -> Result<FaultResolution, SimError> {
        let pte = *self
            .pages
            .pte(domain, vpage)
            .ok_or(LifecycleError::NoSuchMapping { domain, vpage })?;
        let coa_set = self.pages.config().coa_enabled && pte.coa;
        let nc_set = self.cfg.cacheability_enabled && pte.nc;
        if !coa_set && !nc_set {
            return Err(SimError::UnknownFault { domain, vpage });
        }
        let res = self.pages.resolve_access(domain, vpage, kind)?;
        let mut nc_handled = false;
        let mut queue_evicted = None;
        let pte = *self.pages.pte(domain, vpage).expect("pte exists");
        if self.cfg.cacheability_enabled && pte.nc {
            let color = self.cfg.geometry.color_of(pte.ppage);
            let r = self.queues.fault_nc(
                &mut self.pages,
                &mut self.cache,
                domain,
                vpage,
                pte.ppage,
                color,
            );
            nc_handled = true;
            queue_evicted = r.evicted;
            if r.evicted.is_some() {
                *self.eviction_counts.entry(domain).or_insert(0) += 1;
            }
        }
        Ok(FaultResolution { coa_handled: coa_set, nc_handled, copied: res.copied, queue_evicted })
    }

    /// The victim side of a Prime-Probe interval: accesses `demand`
    /// distinct mapped pages of `color` (block 0 of each, all hitting one
    /// cache set) and reports how many lines belonging to other domains
    /// were evicted from that set.
    pub fn victim_fill(
        &mut self,
        domain: DomainId,
        color: usize,
        demand: usize,
    ) -> Result<usize, SimError> {
        let mut vpages: Vec<VPage> = self
            .pages
            .ptes()
            .filter(|p| {
                p.domain == domain && self.cfg.geometry.color_of(p.ppage) == color
            })
            .map(|p| p.vpage)
            .collect();
        vpages.sort_unstable();
        vpages.dedup();
        assert!(
            vpages.len() >= demand,
            "victim has {} pages of color {color}, demand {demand}",
            vpages.len()
        );
        let mut evictions = 0;
        for vpage in vpages.into_iter().take(demand) {
            let out = self.access_block(domain, vpage, AccessKind::Read, 0)?;
            if let Some(AccessResult::Miss { evicted: Some((_, who)) }) = out.cache {
                if who != domain {
                    evictions += 1;
                }
            }
        }
        Ok(evictions)
    }

    /// One combined daemon tick. The ACCESSED-bit snapshot is shared: queue
    /// re-sorting, idle-page demotion and idle-copy merging all read the
    /// same bits, which are cleared once at the end.
    pub fn tick(&mut self) -> TickReport {
        self.ticks += 1;
        let counts = self.pages.accessed_counts();
        if self.cfg.cacheability_enabled {
            self.queues.resort_all(&counts);
        }
        let demotions = self.pages.tick_accessed_daemon(&mut self.cache);
        let mut merges = Vec::new();
        let mut redraw = None;
        if self.ticks % self.cfg.redraw_period == 0 {
            merges = self.pages.tick_copy_daemon(&mut self.cache);
            for m in &merges {
                self.queues.drop_everywhere(m.copy);
            }
            if self.cfg.cacheability_enabled {
                if let Some(pmf) = &self.budget_pmf {
                    redraw = Some(self.queues.redraw_budgets(
                        &mut self.pages,
                        &mut self.cache,
                        pmf,
                        &mut self.rng,
                        self.ticks,
                    ));
                }
            }
        }
        self.pages.clear_all_accessed_bits();

        if self.cfg.cacheability_enabled {
            let domains: Vec<DomainId> = self.queues.domains().collect();
            for d in domains {
                let evictions = self.eviction_counts.get(&d).copied().unwrap_or(0);
                self.interval_log.push(IntervalLogEntry {
                    tick: self.ticks,
                    domain: d,
                    budget: self.queues.budget(d),
                    evictions,
                });
            }
            self.eviction_counts.clear();
        }

        TickReport { tick: self.ticks, demotions, merges, redraw }
    }

    /// Clears cache and queue state between independent experiment trials:
    /// all lines invalidated, queues emptied, NC bits re-armed. Mappings,
    /// budgets and lifecycle state survive.
    pub fn reset_interval_state(&mut self) {
        self.cache.clear();
        if self.cfg.cacheability_enabled {
            let budgets: Vec<(DomainId, usize)> =
                self.queues.domains().map(|d| (d, self.queues.budget(d))).collect();
            self.queues = QueueTable::new(self.cfg.default_budget);
            for (d, q) in budgets {
                self.queues.register_domain(d);
                self.queues.set_budget(&mut self.pages, &mut self.cache, d, q);
            }
            let ptes: Vec<(DomainId, VPage)> =
                self.pages.ptes().map(|p| (p.domain, p.vpage)).collect();
            for (d, v) in ptes {
                let page = self.pages.pte(d, v).unwrap().ppage;
                self.pages.set_nc_for_domain_page(d, page, true);
            }
        }
    }

    pub fn run_trace(&mut self, events: &[crate::trace::TraceEvent]) -> Result<(), SimError> {
        for e in events {
            match e {
                crate::trace::TraceEvent::Map { domain, vpage, ppage } => {
                    self.map(*domain, *vpage, *ppage)?
                }
                crate::trace::TraceEvent::Unmap { domain, vpage } => self.unmap(*domain, *vpage)?,
                crate::trace::TraceEvent::Access { domain, vpage, kind } => {
                    self.access(*domain, *vpage, *kind)?;
                }
                crate::trace::TraceEvent::Tick => {
                    self.tick();
                }
            }
        }
        Ok(())
    }

    /// Cross-module invariants: cache structure, lifecycle structure, queue
    /// capacity/NC contract, and cache residency implying queue membership
    /// for every line whose last toucher still maps it.
    pub fn check_consistency(&self) -> Result<(), String> {
        self.cache.check_consistency()?;
        self.pages.check_consistency()?;
        if self.cfg.cacheability_enabled {
            self.queues.check_consistency(&self.pages, &self.cfg.geometry)?;
            for set in 0..self.cfg.geometry.sets {
                for (block, domain) in self.cache.set_contents(set) {
                    if self.pages.counter(domain, block.page) == 0 {
                        continue; // leftover line; unreachable for its toucher
                    }
                    let color = self.cfg.geometry.color_of(block.page);
                    if !self.queues.contains(domain, color, block.page) {
                        return Err(format!(
                            "page {} cached by {domain} but not in its color-{color} queue",
                            block.page
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
