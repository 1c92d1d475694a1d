//! Copy-on-access page lifecycle: the four-state page machine, the
//! per-(domain, page) counter table, original/copy list bookkeeping, the two
//! periodic daemons, KSM-style merging and memory-footprint accounting.
//!
//! A page is UNMAPPED, EXCLUSIVE (one domain), SHARED (several domains, none
//! recently active) or ACCESSED (several domains, one recent accessor -- the
//! owner). Accesses to SHARED pages trap through a reserved COA bit in the
//! PTE; a second domain touching an ACCESSED page is redirected to a private
//! copy. Copies hang off their original and are merged back by a slower
//! daemon once idle. Daemon-driven demotions and merges flush the affected
//! page from the cache model; disabling those flushes (for experiments)
//! reintroduces the leaks the non-interference checker finds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{AccessResult, BlockAddr, Cache, DomainId, PageId};

/// Virtual page number within a domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VPage(pub u64);

impl std::fmt::Display for VPage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PageState {
    Unmapped,
    Exclusive,
    Shared,
    Accessed,
}

impl std::fmt::Display for PageState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PageState::Unmapped => "unmapped",
            PageState::Exclusive => "exclusive",
            PageState::Shared => "shared",
            PageState::Accessed => "accessed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PageKind {
    Original,
    Copy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
    /// clflush: same permission checks and state transitions as a load,
    /// plus invalidation of the target block.
    Clflush,
}

/// One physical page frame and its tracking metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhysicalPage {
    pub id: PageId,
    pub state: PageState,
    /// Set exactly while the page is ACCESSED.
    pub owner: Option<DomainId>,
    pub kind: PageKind,
    /// For copies: the original they were copied from.
    pub original_ref: Option<PageId>,
    /// For originals: their live copies, oldest first.
    pub copy_list: Vec<PageId>,
    /// Pages that never entered SHARED/ACCESSED stay untracked.
    pub tracked: bool,
    /// Opaque content tag; pages may only merge when tags are equal.
    pub content: u64,
    pub file_mapped: bool,
}

/// Page table entry: one virtual mapping of one domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pte {
    pub domain: DomainId,
    pub vpage: VPage,
    pub ppage: PageId,
    /// Copy-on-access reserved bit: faults the next access.
    pub coa: bool,
    /// Non-cacheable reserved bit, managed by the cacheability layer.
    pub nc: bool,
    /// Hardware ACCESSED bit, set on every use, cleared by the daemons.
    pub accessed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifecycleConfig {
    /// Disabling this turns the whole defense off: no COA bits, no copies,
    /// no daemon transitions. Pages still track mapping counts.
    pub coa_enabled: bool,
    /// Flush a page from cache when the accessed-daemon demotes it.
    pub flush_on_demote: bool,
    /// Flush the original from cache when the copy-daemon merges into it.
    pub flush_on_merge: bool,
    /// Set the NC bit on fresh and repointed PTEs so the cacheability layer
    /// sees a fault before the page is used. Off in pure lifecycle runs.
    pub nc_on_map: bool,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        LifecycleConfig {
            coa_enabled: true,
            flush_on_demote: true,
            flush_on_merge: true,
            nc_on_map: false,
        }
    }
}

/// The copy daemon runs every tenth accessed-daemon tick.
pub const COPY_DAEMON_PERIOD: u64 = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LifecycleError {
    #[error("domain {domain} vpage {vpage} is already mapped")]
    AlreadyMapped { domain: DomainId, vpage: VPage },
    #[error("domain {domain} vpage {vpage} is not mapped")]
    NoSuchMapping { domain: DomainId, vpage: VPage },
    #[error("page {0} is not mapped")]
    PageUnmapped(PageId),
    #[error("pages {src} and {dst} have different content tags")]
    ContentMismatch { src: PageId, dst: PageId },
    #[error("cannot merge page {0} into itself")]
    SelfMerge(PageId),
}

/// Result of resolving one access through the lifecycle layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoaResolution {
    /// A reserved-bit COA fault was taken.
    pub faulted: bool,
    /// The page the domain was redirected to, when copy-on-access ran.
    pub copied: Option<PageId>,
    /// Whether `copied` was freshly allocated (vs. an existing copy reused).
    pub allocated: bool,
    /// Physical page the access finally lands on.
    pub page: PageId,
}

/// Outcome of an access applied to lifecycle plus cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessOutcome {
    pub faulted: bool,
    pub copied: Option<PageId>,
    pub page: PageId,
    /// Cache result for loads/stores; `None` for clflush.
    pub cache: Option<AccessResult>,
    /// Lines invalidated, for clflush.
    pub flushed_lines: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Demotion {
    pub page: PageId,
    pub to: PageState,
    pub flushed_lines: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeEvent {
    pub copy: PageId,
    pub original: PageId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KsmOutcome {
    /// The page that survives the merge.
    pub survivor: PageId,
    /// When the removed page was an original with copies, the copy promoted
    /// to be the new original of its list.
    pub promoted: Option<PageId>,
}

/// Lifecycle state: pages, PTEs and the counter table.
#[derive(Debug, Clone)]
pub struct PageTable {
    cfg: LifecycleConfig,
    pages: BTreeMap<PageId, PhysicalPage>,
    ptes: BTreeMap<(DomainId, VPage), Pte>,
    /// counter[(domain, page)]: number of the domain's virtual mappings.
    counter: BTreeMap<(DomainId, PageId), u32>,
    next_page: u64,
    ticks: u64,
}

impl PageTable {
    pub fn new(cfg: LifecycleConfig) -> Self {
        PageTable {
            cfg,
            pages: BTreeMap::new(),
            ptes: BTreeMap::new(),
            counter: BTreeMap::new(),
            next_page: 0,
            ticks: 0,
        }
    }

    pub fn config(&self) -> &LifecycleConfig {
        &self.cfg
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn state(&self, page: PageId) -> PageState {
        self.pages.get(&page).map_or(PageState::Unmapped, |p| p.state)
    }

    pub fn page(&self, page: PageId) -> Option<&PhysicalPage> {
        self.pages.get(&page)
    }

    pub fn pte(&self, domain: DomainId, vpage: VPage) -> Option<&Pte> {
        self.ptes.get(&(domain, vpage))
    }

    pub fn ptes(&self) -> impl Iterator<Item = &Pte> {
        self.ptes.values()
    }

    pub fn counter(&self, domain: DomainId, page: PageId) -> u32 {
        self.counter.get(&(domain, page)).copied().unwrap_or(0)
    }

    /// Domains currently holding at least one mapping to `page`.
    pub fn mapping_domains(&self, page: PageId) -> BTreeSet<DomainId> {
        self.counter
            .iter()
            .filter(|(&(_, p), &n)| p == page && n > 0)
            .map(|(&(d, _), _)| d)
            .collect()
    }

    /// Pages with at least one mapping; the live memory footprint.
    pub fn mapped_pages(&self) -> BTreeSet<PageId> {
        self.pages
            .values()
            .filter(|p| p.state != PageState::Unmapped)
            .map(|p| p.id)
            .collect()
    }

    pub fn set_content_tag(&mut self, page: PageId, tag: u64) {
        self.ensure_page(page);
        self.pages.get_mut(&page).unwrap().content = tag;
    }

    pub fn set_file_mapped(&mut self, page: PageId, file_mapped: bool) {
        self.ensure_page(page);
        self.pages.get_mut(&page).unwrap().file_mapped = file_mapped;
    }

    fn ensure_page(&mut self, id: PageId) {
        self.next_page = self.next_page.max(id.0 + 1);
        self.pages.entry(id).or_insert(PhysicalPage {
            id,
            state: PageState::Unmapped,
            owner: None,
            kind: PageKind::Original,
            original_ref: None,
            copy_list: Vec::new(),
            tracked: false,
            content: id.0,
            file_mapped: false,
        });
    }

    fn fresh_page(&mut self) -> PageId {
        let id = PageId(self.next_page);
        self.ensure_page(id);
        id
    }

    fn bump_counter(&mut self, domain: DomainId, page: PageId, delta: i64) {
        let slot = self.counter.entry((domain, page)).or_insert(0);
        let next = (*slot as i64) + delta;
        debug_assert!(next >= 0, "counter underflow for ({domain}, {page})");
        *slot = next as u32;
        if *slot == 0 {
            self.counter.remove(&(domain, page));
        }
    }

    fn set_coa_all(&mut self, page: PageId, value: bool) {
        for pte in self.ptes.values_mut() {
            if pte.ppage == page {
                pte.coa = value;
            }
        }
    }

    /// Sets or clears the NC bit on all of one domain's PTEs to `page`;
    /// used by the cacheability layer when a page leaves the queue.
    pub fn set_nc_for_domain_page(&mut self, domain: DomainId, page: PageId, value: bool) {
        for pte in self.ptes.values_mut() {
            if pte.domain == domain && pte.ppage == page {
                pte.nc = value;
            }
        }
    }

    /// Clears the NC bit of a single PTE (the faulting one; siblings clear
    /// lazily on their own faults).
    pub fn clear_nc_bit(&mut self, domain: DomainId, vpage: VPage) {
        if let Some(pte) = self.ptes.get_mut(&(domain, vpage)) {
            pte.nc = false;
        }
    }

    pub fn clear_all_accessed_bits(&mut self) {
        for pte in self.ptes.values_mut() {
            pte.accessed = false;
        }
    }

    /// Clears the ACCESSED bits of one domain's PTEs to `page`.
    pub fn clear_accessed_for_domain_page(&mut self, domain: DomainId, page: PageId) {
        for pte in self.ptes.values_mut() {
            if pte.domain == domain && pte.ppage == page {
                pte.accessed = false;
            }
        }
    }

    /// Maps `vpage` of `domain` onto physical page `ppage`. The first
    /// mapping makes the page EXCLUSIVE; a second domain makes it SHARED
    /// and arms the COA bit on every PTE.
    pub fn map_page(
        &mut self,
        domain: DomainId,
        vpage: VPage,
        ppage: PageId,
    ) -> Result<PageState, LifecycleError> {
        if self.ptes.contains_key(&(domain, vpage)) {
            return Err(LifecycleError::AlreadyMapped { domain, vpage });
        }
        self.ensure_page(ppage);
        let prior_domains = self.mapping_domains(ppage);
        self.bump_counter(domain, ppage, 1);

        let coa_armed = self.cfg.coa_enabled
            && match self.pages[&ppage].state {
                // Joining a SHARED or ACCESSED page always faults first.
                PageState::Shared | PageState::Accessed => true,
                _ => false,
            };
        self.ptes.insert(
            (domain, vpage),
            Pte {
                domain,
                vpage,
                ppage,
                coa: coa_armed,
                nc: self.cfg.nc_on_map,
                accessed: false,
            },
        );

        let page = self.pages.get_mut(&ppage).unwrap();
        match page.state {
            PageState::Unmapped => {
                page.state = PageState::Exclusive;
            }
            PageState::Exclusive if !prior_domains.contains(&domain) => {
                page.state = PageState::Shared;
                page.tracked = true;
                if self.cfg.coa_enabled {
                    self.set_coa_all(ppage, true);
                }
            }
            // Same-domain re-map, or already SHARED/ACCESSED: no change.
            _ => {}
        }
        Ok(self.pages[&ppage].state)
    }

    /// Removes the mapping of `vpage`. SHARED/ACCESSED pages drop to
    /// EXCLUSIVE when one mapping domain remains; fully unmapped pages leave
    /// their lists, and an unmapped original hands its list to its first
    /// copy.
    pub fn unmap_page(
        &mut self,
        domain: DomainId,
        vpage: VPage,
    ) -> Result<PageState, LifecycleError> {
        let pte = self
            .ptes
            .remove(&(domain, vpage))
            .ok_or(LifecycleError::NoSuchMapping { domain, vpage })?;
        let ppage = pte.ppage;
        self.bump_counter(domain, ppage, -1);
        self.recompute_after_departure(ppage, domain);
        Ok(self.state(ppage))
    }

    /// Re-derives a page's state after `domain` lost mappings to it.
    fn recompute_after_departure(&mut self, ppage: PageId, departed: DomainId) {
        let domains = self.mapping_domains(ppage);
        let departed_count = self.counter(departed, ppage);
        let page = self.pages.get_mut(&ppage).unwrap();
        match domains.len() {
            0 => {
                page.state = PageState::Unmapped;
                page.owner = None;
                self.detach_page(ppage);
            }
            1 => {
                if page.state != PageState::Unmapped {
                    page.state = PageState::Exclusive;
                }
                page.owner = None;
                self.set_coa_all(ppage, false);
            }
            _ => {
                // Still multi-domain. An ACCESSED page whose owner departed
                // falls back to SHARED.
                if page.state == PageState::Accessed
                    && page.owner == Some(departed)
                    && departed_count == 0
                {
                    page.state = PageState::Shared;
                    page.owner = None;
                    if self.cfg.coa_enabled {
                        self.set_coa_all(ppage, true);
                    }
                }
            }
        }
    }

    /// Removes a fully unmapped page from the original/copy lists.
    fn detach_page(&mut self, ppage: PageId) {
        let (kind, original_ref, copy_list) = {
            let p = &self.pages[&ppage];
            (p.kind, p.original_ref, p.copy_list.clone())
        };
        match kind {
            PageKind::Copy => {
                if let Some(orig) = original_ref {
                    if let Some(o) = self.pages.get_mut(&orig) {
                        o.copy_list.retain(|c| *c != ppage);
                    }
                }
            }
            PageKind::Original if !copy_list.is_empty() => {
                // The first copy in the list becomes the new original.
                let heir = copy_list[0];
                let rest: Vec<PageId> = copy_list[1..].to_vec();
                {
                    let h = self.pages.get_mut(&heir).unwrap();
                    h.kind = PageKind::Original;
                    h.original_ref = None;
                    h.copy_list = rest.clone();
                }
                for c in rest {
                    self.pages.get_mut(&c).unwrap().original_ref = Some(heir);
                }
            }
            PageKind::Original => {}
        }
        let p = self.pages.get_mut(&ppage).unwrap();
        p.kind = PageKind::Original;
        p.original_ref = None;
        p.copy_list.clear();
        p.tracked = false;
        p.owner = None;
    }

    /// Lifecycle half of an access: takes any pending COA fault, performing
    /// the state transition or copy-on-access redirection, and marks the PTE
    /// accessed. Does not touch the cache.
    pub fn resolve_access(
        &mut self,
        domain: DomainId,
        vpage: VPage,
        _kind: AccessKind,
    ) -> Result<CoaResolution, LifecycleError> {
        let pte = *self
            .ptes
            .get(&(domain, vpage))
            .ok_or(LifecycleError::NoSuchMapping { domain, vpage })?;

        let mut res = CoaResolution {
            faulted: false,
            copied: None,
            allocated: false,
            page: pte.ppage,
        };

        if self.cfg.coa_enabled && pte.coa {
            res.faulted = true;
            let state = self.state(pte.ppage);
            let owner = self.pages[&pte.ppage].owner;
            match state {
                PageState::Shared => {
                    let page = self.pages.get_mut(&pte.ppage).unwrap();
                    page.state = PageState::Accessed;
                    page.owner = Some(domain);
                    page.tracked = true;
                    self.ptes.get_mut(&(domain, vpage)).unwrap().coa = false;
                }
                PageState::Accessed if owner == Some(domain) => {
                    self.ptes.get_mut(&(domain, vpage)).unwrap().coa = false;
                }
                PageState::Accessed => {
                    let (copy, allocated) = self.copy_on_access(domain, pte.ppage);
                    res.copied = Some(copy);
                    res.allocated = allocated;
                    res.page = copy;
                }
                // A stale COA bit on an EXCLUSIVE page: clear and continue.
                PageState::Exclusive | PageState::Unmapped => {
                    debug_assert!(
                        state == PageState::Exclusive,
                        "access resolved to unmapped page {}",
                        pte.ppage
                    );
                    self.ptes.get_mut(&(domain, vpage)).unwrap().coa = false;
                }
            }
        }

        self.ptes.get_mut(&(domain, vpage)).unwrap().accessed = true;
        Ok(res)
    }

    /// Gives `domain` a private copy of ACCESSED page `original`, reusing an
    /// existing copy belonging to that domain when one exists. All of the
    /// domain's PTEs for the original are repointed.
    fn copy_on_access(&mut self, domain: DomainId, original: PageId) -> (PageId, bool) {
        // The true original of the content: copying a copy attaches the new
        // page to the root of the list.
        let root = self.pages[&original].original_ref.unwrap_or(original);

        // A copy "belongs" to the domain only while it is exclusive to it;
        // copies that picked up mappings from other domains are not reused.
        let reusable = self.pages[&root].copy_list.iter().copied().find(|c| {
            *c != original
                && self.counter(domain, *c) > 0
                && self.pages[c].state == PageState::Exclusive
        });

        let (target, allocated) = match reusable {
            Some(c) => (c, false),
            None => {
                let id = self.fresh_page();
                let content = self.pages[&root].content;
                {
                    let page = self.pages.get_mut(&id).unwrap();
                    page.kind = PageKind::Copy;
                    page.original_ref = Some(root);
                    page.tracked = true;
                    page.content = content;
                    page.file_mapped = false; // copies are anonymous-mapped
                }
                self.pages.get_mut(&root).unwrap().copy_list.push(id);
                (id, true)
            }
        };

        // Repoint every PTE this domain holds on the original.
        let mut moved = 0i64;
        for pte in self.ptes.values_mut() {
            if pte.domain == domain && pte.ppage == original {
                pte.ppage = target;
                pte.coa = false;
                pte.nc = self.cfg.nc_on_map;
                moved += 1;
            }
        }
        self.bump_counter(domain, original, -moved);
        self.bump_counter(domain, target, moved);
        debug_assert_eq!(self.mapping_domains(target).len(), 1);
        self.pages.get_mut(&target).unwrap().state = PageState::Exclusive;

        // The original stays behind with whoever still maps it.
        let remaining = self.mapping_domains(original);
        let page = self.pages.get_mut(&original).unwrap();
        page.owner = None;
        if remaining.len() >= 2 {
            page.state = PageState::Shared;
            self.set_coa_all(original, true);
        } else {
            debug_assert_eq!(remaining.len(), 1, "owner must still map an ACCESSED page");
            page.state = PageState::Exclusive;
            self.set_coa_all(original, false);
        }
        (target, allocated)
    }

    /// Full access including the cache effect: loads/stores touch block 0 of
    /// the resolved page, clflush invalidates it (after the same lifecycle
    /// transitions as a load).
    pub fn handle_access(
        &mut self,
        cache: &mut Cache,
        domain: DomainId,
        vpage: VPage,
        kind: AccessKind,
    ) -> Result<AccessOutcome, LifecycleError> {
        let res = self.resolve_access(domain, vpage, kind)?;
        let block = BlockAddr { page: res.page, block: 0 };
        let outcome = match kind {
            AccessKind::Read | AccessKind::Write => AccessOutcome {
                faulted: res.faulted,
                copied: res.copied,
                page: res.page,
                cache: Some(cache.access(domain, block)),
                flushed_lines: 0,
            },
            AccessKind::Clflush => AccessOutcome {
                faulted: res.faulted,
                copied: res.copied,
                page: res.page,
                cache: None,
                flushed_lines: cache.flush_block(block),
            },
        };
        Ok(outcome)
    }

    /// Per-(domain, page) counts of set ACCESSED bits; the shared daemon's
    /// snapshot.
    pub fn accessed_counts(&self) -> BTreeMap<(DomainId, PageId), u32> {
        let mut counts = BTreeMap::new();
        for pte in self.ptes.values() {
            if pte.accessed {
                *counts.entry((pte.domain, pte.ppage)).or_insert(0) += 1;
            }
        }
        counts
    }

    /// The accessed daemon: ACCESSED pages whose owner shows no activity
    /// fall back to SHARED (and are flushed, when configured); ACCESSED
    /// pages left with a single mapping domain become EXCLUSIVE. Inspected
    /// ACCESSED bits are cleared.
    pub fn tick_accessed_daemon(&mut self, cache: &mut Cache) -> Vec<Demotion> {
        if !self.cfg.coa_enabled {
            return Vec::new();
        }
        let accessed_pages: Vec<PageId> = self
            .pages
            .values()
            .filter(|p| p.state == PageState::Accessed)
            .map(|p| p.id)
            .collect();

        let mut events = Vec::new();
        for id in &accessed_pages {
            let owner = self.pages[id].owner.expect("ACCESSED page has an owner");
            let domains = self.mapping_domains(*id);
            if domains.len() == 1 {
                let page = self.pages.get_mut(id).unwrap();
                page.state = PageState::Exclusive;
                page.owner = None;
                self.set_coa_all(*id, false);
                events.push(Demotion { page: *id, to: PageState::Exclusive, flushed_lines: 0 });
                continue;
            }
            let owner_active = self
                .ptes
                .values()
                .any(|pte| pte.domain == owner && pte.ppage == *id && pte.accessed);
            if !owner_active {
                let page = self.pages.get_mut(id).unwrap();
                page.state = PageState::Shared;
                page.owner = None;
                self.set_coa_all(*id, true);
                let flushed = if self.cfg.flush_on_demote { cache.flush_page(*id) } else { 0 };
                events.push(Demotion { page: *id, to: PageState::Shared, flushed_lines: flushed });
            }
        }

        // Clear the inspected bits: owner-domain PTEs of every page that was
        // ACCESSED when the pass started.
        for pte in self.ptes.values_mut() {
            if accessed_pages.contains(&pte.ppage) {
                pte.accessed = false;
            }
        }
        events
    }

    /// The copy daemon: EXCLUSIVE copies with no activity since the last
    /// copy pass merge back into their original. The original is flushed
    /// from cache before the merge completes (when configured); the
    /// now-dead copy's frame is freed and its lines invalidated.
    pub fn tick_copy_daemon(&mut self, cache: &mut Cache) -> Vec<MergeEvent> {
        if !self.cfg.coa_enabled {
            return Vec::new();
        }
        let copies: Vec<PageId> = self
            .pages
            .values()
            .filter(|p| p.kind == PageKind::Copy && p.state == PageState::Exclusive)
            .map(|p| p.id)
            .collect();

        let mut events = Vec::new();
        for id in &copies {
            let active = self.ptes.values().any(|pte| pte.ppage == *id && pte.accessed);
            if active {
                continue;
            }
            let original = self.pages[id].original_ref.expect("copy has an original");
            if self.cfg.flush_on_merge {
                cache.flush_page(original);
            }
            self.merge_into(*id, original);
            cache.flush_page(*id);
            events.push(MergeEvent { copy: *id, original });
        }

        for pte in self.ptes.values_mut() {
            if copies.contains(&pte.ppage) {
                pte.accessed = false;
            }
        }
        events
    }

    /// Moves every PTE from `src` to `dst` and recomputes `dst`'s state;
    /// `src` ends up unmapped and detached. Shared bookkeeping for the copy
    /// daemon and KSM merges.
    fn merge_into(&mut self, src: PageId, dst: PageId) {
        let mut moved: BTreeMap<DomainId, i64> = BTreeMap::new();
        let mut repointed: Vec<(DomainId, VPage)> = Vec::new();
        for pte in self.ptes.values_mut() {
            if pte.ppage == src {
                pte.ppage = dst;
                pte.nc = self.cfg.nc_on_map;
                *moved.entry(pte.domain).or_insert(0) += 1;
                repointed.push((pte.domain, pte.vpage));
            }
        }
        for (domain, n) in &moved {
            self.bump_counter(*domain, src, -n);
            self.bump_counter(*domain, dst, *n);
        }

        {
            let s = self.pages.get_mut(&src).unwrap();
            s.state = PageState::Unmapped;
        }
        self.detach_page(src);

        let domains = self.mapping_domains(dst);
        let dst_page = self.pages.get_mut(&dst).unwrap();
        match dst_page.state {
            PageState::Exclusive | PageState::Unmapped if domains.len() >= 2 => {
                dst_page.state = PageState::Shared;
                dst_page.tracked = true;
                dst_page.owner = None;
                if self.cfg.coa_enabled {
                    self.set_coa_all(dst, true);
                }
            }
            PageState::Unmapped => {
                dst_page.state = PageState::Exclusive;
            }
            PageState::Shared | PageState::Accessed => {
                // Arrived PTEs must fault before their first use.
                if self.cfg.coa_enabled {
                    for key in &repointed {
                        self.ptes.get_mut(key).unwrap().coa = true;
                    }
                }
            }
            PageState::Exclusive => {}
        }
    }

    /// Explicit KSM-style merge of two same-content pages: `src` is merged
    /// into `dst`. Covers copy-into-copy, original-into-copy,
    /// original-into-original and untracked-into-tracked merges.
    pub fn ksm_merge(&mut self, src: PageId, dst: PageId) -> Result<KsmOutcome, LifecycleError> {
        if src == dst {
            return Err(LifecycleError::SelfMerge(src));
        }
        let s = self.pages.get(&src).ok_or(LifecycleError::PageUnmapped(src))?;
        let d = self.pages.get(&dst).ok_or(LifecycleError::PageUnmapped(dst))?;
        if s.state == PageState::Unmapped {
            return Err(LifecycleError::PageUnmapped(src));
        }
        if d.state == PageState::Unmapped {
            return Err(LifecycleError::PageUnmapped(dst));
        }
        if s.content != d.content {
            return Err(LifecycleError::ContentMismatch { src, dst });
        }

        // An original with copies hands its list over before vanishing; the
        // first copy in the list is designated the new original.
        let mut promoted = None;
        if s.kind == PageKind::Original && !s.copy_list.is_empty() {
            let copy_list = s.copy_list.clone();
            let heir = copy_list[0];
            let rest: Vec<PageId> = copy_list[1..].to_vec();
            {
                let h = self.pages.get_mut(&heir).unwrap();
                h.kind = PageKind::Original;
                h.original_ref = None;
                h.copy_list = rest.clone();
            }
            for c in rest {
                self.pages.get_mut(&c).unwrap().original_ref = Some(heir);
            }
            self.pages.get_mut(&src).unwrap().copy_list.clear();
            promoted = Some(heir);
        }

        self.merge_into(src, dst);
        // A tracked page absorbed a merge; make sure it is tracked from now
        // on even if it had never entered SHARED before.
        let dst_page = self.pages.get_mut(&dst).unwrap();
        if dst_page.state == PageState::Shared {
            dst_page.tracked = true;
        }
        Ok(KsmOutcome { survivor: dst, promoted })
    }

    /// Structural consistency of states, counters, owners, lists and COA
    /// bits; used pervasively by the randomized invariant suites.
    pub fn check_consistency(&self) -> Result<(), String> {
        for ((domain, page), n) in &self.counter {
            let actual =
                self.ptes.values().filter(|p| p.domain == *domain && p.ppage == *page).count();
            if actual != *n as usize {
                return Err(format!(
                    "counter[{domain}][{page}] = {n} but {actual} PTEs exist"
                ));
            }
            if *n == 0 {
                return Err(format!("counter table stores zero entry for ({domain}, {page})"));
            }
        }
        for pte in self.ptes.values() {
            let page = self
                .pages
                .get(&pte.ppage)
                .ok_or_else(|| format!("PTE points at unknown page {}", pte.ppage))?;
            if page.state == PageState::Unmapped {
                return Err(format!("PTE ({}, {}) maps unmapped page {}", pte.domain, pte.vpage, pte.ppage));
            }
        }
        for page in self.pages.values() {
            let domains = self.mapping_domains(page.id);
            match page.state {
                PageState::Unmapped => {
                    if !domains.is_empty() {
                        return Err(format!("page {} unmapped but has counters", page.id));
                    }
                }
                PageState::Exclusive => {
                    if domains.len() != 1 {
                        return Err(format!(
                            "page {} exclusive with {} mapping domains",
                            page.id,
                            domains.len()
                        ));
                    }
                }
                PageState::Shared | PageState::Accessed => {
                    if domains.len() < 2 {
                        return Err(format!(
                            "page {} {} with {} mapping domains",
                            page.id,
                            page.state,
                            domains.len()
                        ));
                    }
                }
            }
            if (page.owner.is_some()) != (page.state == PageState::Accessed) {
                return Err(format!(
                    "page {} owner {:?} inconsistent with state {}",
                    page.id, page.owner, page.state
                ));
            }
            if let Some(owner) = page.owner {
                if !domains.contains(&owner) {
                    return Err(format!("page {} owned by non-mapping domain {owner}", page.id));
                }
            }
            if page.kind == PageKind::Copy {
                let orig = page
                    .original_ref
                    .ok_or_else(|| format!("copy {} lacks an original", page.id))?;
                let o = self
                    .pages
                    .get(&orig)
                    .ok_or_else(|| format!("copy {} has unknown original {orig}", page.id))?;
                if o.kind != PageKind::Original || !o.copy_list.contains(&page.id) {
                    return Err(format!("copy {} not linked from original {orig}", page.id));
                }
                if !page.tracked {
                    return Err(format!("copy {} is untracked", page.id));
                }
            }
            if !page.tracked && (!page.copy_list.is_empty() || page.original_ref.is_some()) {
                return Err(format!("untracked page {} carries list links", page.id));
            }
            for c in &page.copy_list {
                let cp = self
                    .pages
                    .get(c)
                    .ok_or_else(|| format!("copy list of {} names unknown page {c}", page.id))?;
                if cp.kind != PageKind::Copy || cp.original_ref != Some(page.id) {
                    return Err(format!("page {c} not parented to {}", page.id));
                }
            }
            if self.cfg.coa_enabled {
                if page.state == PageState::Shared {
                    for pte in self.ptes.values() {
                        if pte.ppage == page.id && !pte.coa {
                            return Err(format!(
                                "shared page {} mapped fault-free by ({}, {})",
                                page.id, pte.domain, pte.vpage
                            ));
                        }
                    }
                }
                if page.state == PageState::Accessed {
                    let fault_free: BTreeSet<DomainId> = self
                        .ptes
                        .values()
                        .filter(|p| p.ppage == page.id && !p.coa)
                        .map(|p| p.domain)
                        .collect();
                    let owner = page.owner.unwrap();
                    if fault_free.iter().any(|d| *d != owner) {
                        return Err(format!(
                            "accessed page {} fault-free in non-owner domains {:?}",
                            page.id, fault_free
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// One trace tick: the accessed daemon runs every tick, the copy daemon
    /// every [`COPY_DAEMON_PERIOD`]th.
    pub fn tick(&mut self, cache: &mut Cache) -> (Vec<Demotion>, Vec<MergeEvent>) {
        self.ticks += 1;
        let demotions = self.tick_accessed_daemon(cache);
        let merges = if self.ticks % COPY_DAEMON_PERIOD == 0 {
            self.tick_copy_daemon(cache)
        } else {
            Vec::new()
        };
        (demotions, merges)
    }

    /// Structured per-page records, ordered by page id.
    pub fn dump(&self) -> Vec<PageRecord> {
        self.pages
            .values()
            .map(|p| PageRecord {
                page: p.id,
                state: p.state,
                owner: p.owner,
                kind: p.kind,
                original: p.original_ref,
                copies: p.copy_list.clone(),
                tracked: p.tracked,
                counters: self
                    .counter
                    .iter()
                    .filter(|(&(_, pg), _)| pg == p.id)
                    .map(|(&(d, _), &n)| (d, n))
                    .collect(),
            })
            .collect()
    }
}

/// One row of a state dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRecord {
    pub page: PageId,
    pub state: PageState,
    pub owner: Option<DomainId>,
    pub kind: PageKind,
    pub original: Option<PageId>,
    pub copies: Vec<PageId>,
    pub tracked: bool,
    pub counters: Vec<(DomainId, u32)>,
}

impl std::fmt::Display for PageRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "page {} state={} owner={} kind={} original={} copies=[{}] counters={{{}}}",
            self.page,
            self.state,
            self.owner.map_or("-".to_string(), |d| d.to_string()),
            match self.kind {
                PageKind::Original => "original",
                PageKind::Copy => "copy",
            },
            self.original.map_or("-".to_string(), |p| p.to_string()),
            self.copies.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","),
            self.counters
                .iter()
                .map(|(d, n)| format!("{d}:{n}"))
                .collect::<Vec<_>>()
                .join(","),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheGeometry;
    use proptest::prelude::*;

    fn geom() -> CacheGeometry {
        CacheGeometry::derive(16 * 64 * 64, 16, 64, 4096).unwrap()
    }

    fn fixture() -> (PageTable, Cache) {
        (PageTable::new(LifecycleConfig::default()), Cache::new(geom()))
    }

    const D1: DomainId = DomainId(1);
    const D2: DomainId = DomainId(2);
    const D3: DomainId = DomainId(3);
    const P: PageId = PageId(0);

    #[test]
    fn first_map_makes_exclusive() {
        let (mut pt, _) = fixture();
        let state = pt.map_page(D1, VPage(0), P).unwrap();
        assert_eq!(state, PageState::Exclusive);
        assert_eq!(pt.counter(D1, P), 1);
        pt.check_consistency().unwrap();
    }

    #[test]
    fn second_domain_makes_shared_and_arms_coa() {
        let (mut pt, _) = fixture();
        pt.map_page(D1, VPage(0), P).unwrap();
        let state = pt.map_page(D2, VPage(0), P).unwrap();
        assert_eq!(state, PageState::Shared);
        assert!(pt.pte(D1, VPage(0)).unwrap().coa);
        assert!(pt.pte(D2, VPage(0)).unwrap().coa);
        pt.check_consistency().unwrap();
    }

    #[test]
    fn same_domain_remap_stays_exclusive() {
        let (mut pt, _) = fixture();
        pt.map_page(D1, VPage(0), P).unwrap();
        let state = pt.map_page(D1, VPage(1), P).unwrap();
        assert_eq!(state, PageState::Exclusive);
        assert_eq!(pt.counter(D1, P), 2);
    }

    #[test]
    fn counter_table_states() {
        // Five pages, four containers; states follow from the counters.
        let (mut pt, _) = fixture();
        let matrix: &[(u32, u64, u32)] = &[
            // (container, page, mappings)
            (2, 1, 2),
            (4, 1, 1),
            (1, 2, 3),
            (2, 2, 1),
            (3, 2, 1),
            (3, 3, 1),
            (1, 4, 1),
            (2, 4, 1),
            (3, 4, 1),
            (4, 4, 1),
        ];
        let mut v = 0u64;
        for &(c, p, n) in matrix {
            for _ in 0..n {
                pt.map_page(DomainId(c), VPage(v), PageId(p)).unwrap();
                v += 1;
            }
        }
        assert_eq!(pt.state(PageId(1)), PageState::Shared);
        assert_eq!(pt.state(PageId(2)), PageState::Shared);
        assert_eq!(pt.state(PageId(3)), PageState::Exclusive);
        assert_eq!(pt.state(PageId(4)), PageState::Shared);
        assert_eq!(pt.state(PageId(5)), PageState::Unmapped);
        assert_eq!(pt.counter(DomainId(1), PageId(2)), 3);
        pt.check_consistency().unwrap();
    }

    #[test]
    fn unmap_back_to_exclusive_then_unmapped() {
        let (mut pt, _) = fixture();
        pt.map_page(D1, VPage(0), P).unwrap();
        pt.map_page(D2, VPage(0), P).unwrap();
        assert_eq!(pt.unmap_page(D2, VPage(0)).unwrap(), PageState::Exclusive);
        assert!(!pt.pte(D1, VPage(0)).unwrap().coa, "sole mapper needs no fault");
        assert_eq!(pt.unmap_page(D1, VPage(0)).unwrap(), PageState::Unmapped);
        assert!(pt.mapped_pages().is_empty());
        pt.check_consistency().unwrap();
    }

    #[test]
    fn unmap_nonexistent_is_error() {
        let (mut pt, _) = fixture();
        assert_eq!(
            pt.unmap_page(D1, VPage(9)),
            Err(LifecycleError::NoSuchMapping { domain: D1, vpage: VPage(9) })
        );
    }

    #[test]
    fn access_unmapped_vpage_is_error() {
        let (mut pt, mut cache) = fixture();
        assert!(matches!(
            pt.handle_access(&mut cache, D1, VPage(0), AccessKind::Read),
            Err(LifecycleError::NoSuchMapping { .. })
        ));
    }

    /// Shared page, two domains; returns the table with D2's access promoted.
    fn shared_then_accessed() -> (PageTable, Cache) {
        let (mut pt, mut cache) = fixture();
        pt.map_page(D1, VPage(0), P).unwrap();
        pt.map_page(D2, VPage(0), P).unwrap();
        let out = pt.handle_access(&mut cache, D2, VPage(0), AccessKind::Read).unwrap();
        assert!(out.faulted);
        assert_eq!(out.copied, None);
        (pt, cache)
    }

    #[test]
    fn shared_access_promotes_to_accessed() {
        let (pt, _) = shared_then_accessed();
        assert_eq!(pt.state(P), PageState::Accessed);
        assert_eq!(pt.page(P).unwrap().owner, Some(D2));
        assert!(!pt.pte(D2, VPage(0)).unwrap().coa);
        assert!(pt.pte(D1, VPage(0)).unwrap().coa);
        pt.check_consistency().unwrap();
    }

    #[test]
    fn cross_domain_access_copies() {
        let (mut pt, mut cache) = shared_then_accessed();
        let out = pt.handle_access(&mut cache, D1, VPage(0), AccessKind::Read).unwrap();
        let copy = out.copied.expect("copy-on-access allocates");
        assert_ne!(copy, P);
        assert_eq!(pt.state(copy), PageState::Exclusive);
        assert_eq!(pt.page(copy).unwrap().kind, PageKind::Copy);
        assert_eq!(pt.page(copy).unwrap().original_ref, Some(P));
        assert_eq!(pt.page(P).unwrap().copy_list, vec![copy]);
        // Original keeps its remaining mapper and is EXCLUSIVE again.
        assert_eq!(pt.state(P), PageState::Exclusive);
        assert_eq!(pt.pte(D1, VPage(0)).unwrap().ppage, copy);
        pt.check_consistency().unwrap();
    }

    #[test]
    fn clflush_triggers_same_copy_transition() {
        let (mut pt, mut cache) = shared_then_accessed();
        let out = pt.handle_access(&mut cache, D1, VPage(0), AccessKind::Clflush).unwrap();
        assert!(out.faulted);
        assert!(out.copied.is_some());
        assert_eq!(pt.state(out.copied.unwrap()), PageState::Exclusive);
        pt.check_consistency().unwrap();
    }

    #[test]
    fn copy_is_reused_not_duplicated() {
        let (mut pt, mut cache) = shared_then_accessed();
        let first = pt.handle_access(&mut cache, D1, VPage(0), AccessKind::Read).unwrap();
        let copy = first.copied.unwrap();
        // D1 maps the original again via a second vpage, promotes it, and
        // D2 steals ownership back; then D1 faults again.
        pt.map_page(D1, VPage(1), P).unwrap();
        pt.handle_access(&mut cache, D2, VPage(0), AccessKind::Read).unwrap();
        assert_eq!(pt.state(P), PageState::Accessed);
        let again = pt.handle_access(&mut cache, D1, VPage(1), AccessKind::Read).unwrap();
        assert_eq!(again.copied, Some(copy), "existing copy belonging to the domain is reused");
        assert_eq!(pt.page(P).unwrap().copy_list, vec![copy]);
        pt.check_consistency().unwrap();
    }

    #[test]
    fn idle_accessed_page_demotes_and_flushes() {
        let (mut pt, mut cache) = shared_then_accessed();
        let block = BlockAddr { page: P, block: 0 };
        assert!(cache.contains(block), "owner access cached the block");
        // First tick: owner bit still set, page stays ACCESSED.
        assert!(pt.tick_accessed_daemon(&mut cache).is_empty());
        assert_eq!(pt.state(P), PageState::Accessed);
        // Second tick: idle, demote to SHARED and flush the whole page.
        let events = pt.tick_accessed_daemon(&mut cache);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].to, PageState::Shared);
        assert_eq!(pt.state(P), PageState::Shared);
        assert!(!cache.contains(block));
        assert!(pt.pte(D2, VPage(0)).unwrap().coa, "demotion re-arms the COA bit");
        pt.check_consistency().unwrap();
    }

    #[test]
    fn touched_accessed_page_survives_tick() {
        let (mut pt, mut cache) = shared_then_accessed();
        pt.tick_accessed_daemon(&mut cache);
        // Touch within the interval, then tick: stays ACCESSED.
        pt.handle_access(&mut cache, D2, VPage(0), AccessKind::Read).unwrap();
        assert!(pt.tick_accessed_daemon(&mut cache).is_empty());
        assert_eq!(pt.state(P), PageState::Accessed);
        assert!(!pt.pte(D2, VPage(0)).unwrap().accessed, "bits cleared in any case");
    }

    #[test]
    fn single_domain_accessed_becomes_exclusive() {
        let (mut pt, mut cache) = shared_then_accessed();
        pt.unmap_page(D1, VPage(0)).unwrap();
        // D2 is alone now; unmap already demoted to EXCLUSIVE.
        assert_eq!(pt.state(P), PageState::Exclusive);

        // Rebuild the situation via the daemon path: three domains, owner
        // keeps the page hot, the others unmap, daemon promotes.
        let (mut pt, mut cache2) = fixture();
        let _ = &mut cache;
        pt.map_page(D1, VPage(0), P).unwrap();
        pt.map_page(D2, VPage(0), P).unwrap();
        pt.handle_access(&mut cache2, D2, VPage(0), AccessKind::Read).unwrap();
        pt.map_page(D3, VPage(0), P).unwrap();
        pt.unmap_page(D1, VPage(0)).unwrap();
        assert_eq!(pt.state(P), PageState::Accessed, "two domains still map it");
        pt.unmap_page(D3, VPage(0)).unwrap();
        assert_eq!(pt.state(P), PageState::Exclusive);
        assert!(!pt.pte(D2, VPage(0)).unwrap().coa);
        pt.check_consistency().unwrap();
    }

    #[test]
    fn unmapped_original_promotes_first_copy() {
        let (mut pt, mut cache) = shared_then_accessed();
        // D1 and D3 both take copies.
        pt.handle_access(&mut cache, D1, VPage(0), AccessKind::Read).unwrap();
        pt.map_page(D3, VPage(0), P).unwrap();
        pt.handle_access(&mut cache, D2, VPage(0), AccessKind::Read).unwrap();
        pt.handle_access(&mut cache, D3, VPage(0), AccessKind::Read).unwrap();
        let copies = pt.page(P).unwrap().copy_list.clone();
        assert_eq!(copies.len(), 2);
        let (c1, c2) = (copies[0], copies[1]);

        // Remove the original entirely: first copy becomes the original.
        pt.unmap_page(D2, VPage(0)).unwrap();
        assert_eq!(pt.state(P), PageState::Unmapped);
        assert_eq!(pt.page(c1).unwrap().kind, PageKind::Original);
        assert_eq!(pt.page(c1).unwrap().copy_list, vec![c2]);
        assert_eq!(pt.page(c2).unwrap().original_ref, Some(c1));
        pt.check_consistency().unwrap();
    }

    #[test]
    fn idle_copy_merges_back() {
        let (mut pt, mut cache) = shared_then_accessed();
        let out = pt.handle_access(&mut cache, D1, VPage(0), AccessKind::Read).unwrap();
        let copy = out.copied.unwrap();
        assert!(cache.contains(BlockAddr { page: copy, block: 0 }));
        // Cache the original again so the merge flush is observable.
        pt.handle_access(&mut cache, D2, VPage(0), AccessKind::Read).unwrap();
        assert!(cache.contains(BlockAddr { page: P, block: 0 }));

        // First copy pass: the copy was touched, only clears bits.
        assert!(pt.tick_copy_daemon(&mut cache).is_empty());
        // Second pass: idle, merges.
        let merges = pt.tick_copy_daemon(&mut cache);
        assert_eq!(merges, vec![MergeEvent { copy, original: P }]);
        assert_eq!(pt.state(copy), PageState::Unmapped);
        assert_eq!(pt.pte(D1, VPage(0)).unwrap().ppage, P);
        assert_eq!(pt.state(P), PageState::Shared, "two domains map it again");
        assert!(!cache.contains(BlockAddr { page: P, block: 0 }), "original flushed");
        assert!(!cache.contains(BlockAddr { page: copy, block: 0 }), "copy frame freed");
        assert!(pt.page(P).unwrap().copy_list.is_empty());
        pt.check_consistency().unwrap();
    }

    #[test]
    fn hot_copy_not_merged() {
        let (mut pt, mut cache) = shared_then_accessed();
        let copy = pt
            .handle_access(&mut cache, D1, VPage(0), AccessKind::Read)
            .unwrap()
            .copied
            .unwrap();
        pt.tick_copy_daemon(&mut cache);
        pt.handle_access(&mut cache, D1, VPage(0), AccessKind::Read).unwrap();
        assert!(pt.tick_copy_daemon(&mut cache).is_empty());
        assert_eq!(pt.state(copy), PageState::Exclusive);
    }

    #[test]
    fn merge_to_two_domains_is_shared() {
        // After the owner unmaps, the original is exclusive to nobody the
        // copy's domain knows; merging the copy back in makes it SHARED
        // again when a second domain still maps it.
        let (mut pt, mut cache) = shared_then_accessed();
        let copy = pt
            .handle_access(&mut cache, D1, VPage(0), AccessKind::Read)
            .unwrap()
            .copied
            .unwrap();
        pt.tick_copy_daemon(&mut cache);
        let merges = pt.tick_copy_daemon(&mut cache);
        assert_eq!(merges.len(), 1);
        assert_eq!(pt.state(P), PageState::Shared);
        assert_eq!(pt.mapping_domains(P).len(), 2);
        let _ = copy;
        pt.check_consistency().unwrap();
    }

    // KSM merge cases: lists as in the four-panel merging example.
    // Original 1 with copies [5, 6']; original 2 with copies [7', 6];
    // original 3 with copies [9', 5'].
    fn ksm_fixture() -> (PageTable, Cache) {
        let (mut pt, mut cache) = fixture();
        let tag = 99;
        // original 1 shared by domains 1, 2; copies via COA.
        for (d, p) in [(1u32, 1u64), (2, 1), (1, 2), (3, 2), (2, 3), (4, 3)] {
            pt.map_page(DomainId(d), VPage(p), PageId(p)).unwrap();
            pt.set_content_tag(PageId(p), tag);
        }
        for p in 1..=3u64 {
            // Promote then force one copy on each original.
            let domains = pt.mapping_domains(PageId(p)).into_iter().collect::<Vec<_>>();
            pt.handle_access(&mut cache, domains[0], VPage(p), AccessKind::Read).unwrap();
            pt.handle_access(&mut cache, domains[1], VPage(p), AccessKind::Read).unwrap();
        }
        (pt, cache)
    }

    #[test]
    fn ksm_copy_into_copy() {
        let (mut pt, _cache) = ksm_fixture();
        let copy_of_1 = pt.page(PageId(1)).unwrap().copy_list[0];
        let copy_of_2 = pt.page(PageId(2)).unwrap().copy_list[0];
        let out = pt.ksm_merge(copy_of_1, copy_of_2).unwrap();
        assert_eq!(out.survivor, copy_of_2);
        assert_eq!(out.promoted, None);
        assert_eq!(pt.state(copy_of_1), PageState::Unmapped);
        assert_eq!(pt.state(copy_of_2), PageState::Shared);
        assert!(pt.page(PageId(1)).unwrap().copy_list.is_empty());
        assert_eq!(pt.page(PageId(2)).unwrap().copy_list, vec![copy_of_2]);
        pt.check_consistency().unwrap();
    }

    #[test]
    fn ksm_original_into_copy() {
        let (mut pt, _cache) = ksm_fixture();
        let copy_of_1 = pt.page(PageId(1)).unwrap().copy_list[0];
        let copy_of_2 = pt.page(PageId(2)).unwrap().copy_list[0];
        let out = pt.ksm_merge(PageId(1), copy_of_2).unwrap();
        assert_eq!(out.promoted, Some(copy_of_1), "first copy in the list takes over");
        assert_eq!(pt.state(PageId(1)), PageState::Unmapped);
        assert_eq!(pt.state(copy_of_2), PageState::Shared);
        assert_eq!(pt.page(copy_of_1).unwrap().kind, PageKind::Original);
        pt.check_consistency().unwrap();
    }

    #[test]
    fn ksm_original_into_original() {
        let (mut pt, _cache) = ksm_fixture();
        let copy_of_3 = pt.page(PageId(3)).unwrap().copy_list[0];
        let out = pt.ksm_merge(PageId(3), PageId(2)).unwrap();
        assert_eq!(out.promoted, Some(copy_of_3));
        assert_eq!(pt.page(copy_of_3).unwrap().kind, PageKind::Original);
        assert_eq!(pt.state(PageId(3)), PageState::Unmapped);
        assert_eq!(pt.state(PageId(2)), PageState::Shared);
        pt.check_consistency().unwrap();
    }

    #[test]
    fn ksm_untracked_into_tracked() {
        let (mut pt, _cache) = ksm_fixture();
        pt.map_page(DomainId(9), VPage(50), PageId(50)).unwrap();
        pt.set_content_tag(PageId(50), 99);
        assert!(!pt.page(PageId(50)).unwrap().tracked);
        let out = pt.ksm_merge(PageId(50), PageId(1)).unwrap();
        assert_eq!(out.survivor, PageId(1));
        assert_eq!(pt.state(PageId(1)), PageState::Shared);
        assert!(pt.page(PageId(1)).unwrap().tracked);
        pt.check_consistency().unwrap();
    }

    #[test]
    fn ksm_rejects_content_mismatch() {
        let (mut pt, _) = fixture();
        pt.map_page(D1, VPage(0), PageId(10)).unwrap();
        pt.map_page(D2, VPage(0), PageId(11)).unwrap();
        assert_eq!(
            pt.ksm_merge(PageId(10), PageId(11)),
            Err(LifecycleError::ContentMismatch { src: PageId(10), dst: PageId(11) })
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_events_keep_invariants(ops in prop::collection::vec((0u8..6, 0u32..4, 0u64..12, 0u64..8), 1..300)) {
            let (mut pt, mut cache) = fixture();
            let mut pte_count = 0i64;
            for (op, d, v, p) in ops {
                let domain = DomainId(d);
                let vpage = VPage(v);
                match op {
                    0 | 1 => {
                        if pt.map_page(domain, vpage, PageId(p)).is_ok() {
                            pte_count += 1;
                        }
                    }
                    2 => {
                        if pt.unmap_page(domain, vpage).is_ok() {
                            pte_count -= 1;
                        }
                    }
                    3 | 4 => {
                        let kind = if p % 3 == 0 { AccessKind::Clflush } else { AccessKind::Read };
                        let _ = pt.handle_access(&mut cache, domain, vpage, kind);
                    }
                    _ => {
                        let (demotions, merges) = pt.tick(&mut cache);
                        for dem in demotions {
                            if dem.to == PageState::Shared {
                                prop_assert!(!cache.page_resident(dem.page),
                                    "demoted page must be flushed");
                            }
                        }
                        for m in merges {
                            prop_assert!(!cache.page_resident(m.original),
                                "merged-into original must be flushed");
                        }
                    }
                }
                pt.check_consistency().unwrap();
                cache.check_consistency().unwrap();
                // Copy-on-access and merges conserve PTEs.
                prop_assert_eq!(pt.ptes().count() as i64, pte_count);
            }
        }
    }
}
