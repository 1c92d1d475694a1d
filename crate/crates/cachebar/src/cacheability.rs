//! Per-(domain, color) cacheable queues enforcing line budgets.
//!
//! A page may be cached by a domain only while it sits in the domain's
//! queue for its color; everything else carries the NC reserved bit and
//! faults on access. Queues hold at most the domain's current budget of
//! pages; the least-recently-ranked page is pushed out (NC bits set, page
//! flushed) to make room. Ranking is refreshed periodically by counting
//! ACCESSED bits, not on every access.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;

use crate::cache::{Cache, DomainId, PageId};
use crate::lifecycle::PageTable;
use crate::optimizer::BudgetPmf;

/// One domain's cacheable pages of one color, most- to least-recently
/// ranked.
#[derive(Debug, Clone)]
pub struct CacheableQueue {
    pub domain: DomainId,
    pub color: usize,
    pub capacity: usize,
    entries: VecDeque<PageId>,
}

impl CacheableQueue {
    fn new(domain: DomainId, color: usize, capacity: usize) -> Self {
        CacheableQueue { domain, color, capacity, entries: VecDeque::new() }
    }

    pub fn contains(&self, page: PageId) -> bool {
        self.entries.contains(&page)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries from most- to least-recently ranked.
    pub fn entries(&self) -> impl Iterator<Item = PageId> + '_ {
        self.entries.iter().copied()
    }

    fn push_mru(&mut self, page: PageId) {
        self.entries.push_front(page);
    }

    fn pop_lru(&mut self) -> Option<PageId> {
        self.entries.pop_back()
    }

    fn remove(&mut self, page: PageId) -> bool {
        if let Some(pos) = self.entries.iter().position(|p| *p == page) {
            self.entries.remove(pos);
            true
        } else {
            false
        }
    }

    /// Reorders entries by descending ACCESSED-bit count, ties stable by
    /// prior order.
    fn resort(&mut self, counts: &BTreeMap<(DomainId, PageId), u32>) {
        let mut v: Vec<PageId> = self.entries.iter().copied().collect();
        v.sort_by_key(|p| std::cmp::Reverse(counts.get(&(self.domain, *p)).copied().unwrap_or(0)));
        self.entries = v.into();
    }
}

/// A draw of per-domain budgets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetAssignment {
    pub budgets: BTreeMap<DomainId, usize>,
    pub draw_tick: u64,
}

/// Outcome of one NC fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NcResolution {
    /// The page was newly admitted (vs. already queued, lazy bit clear).
    pub admitted: bool,
    /// Queue overflow pushed this page out (NC bits set, page flushed).
    pub evicted: Option<PageId>,
    /// The page is in the queue after the fault. False only with budget 0.
    pub cacheable: bool,
}

/// All cacheable queues plus per-domain budgets.
#[derive(Debug, Clone)]
pub struct QueueTable {
    queues: BTreeMap<(DomainId, usize), CacheableQueue>,
    budgets: BTreeMap<DomainId, usize>,
    default_budget: usize,
}

impl QueueTable {
    pub fn new(default_budget: usize) -> Self {
        QueueTable { queues: BTreeMap::new(), budgets: BTreeMap::new(), default_budget }
    }

    pub fn budget(&self, domain: DomainId) -> usize {
        self.budgets.get(&domain).copied().unwrap_or(self.default_budget)
    }

    pub fn domains(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.budgets.keys().copied()
    }

    pub fn register_domain(&mut self, domain: DomainId) {
        self.budgets.entry(domain).or_insert(self.default_budget);
    }

    pub fn queue(&self, domain: DomainId, color: usize) -> Option<&CacheableQueue> {
        self.queues.get(&(domain, color))
    }

    fn queue_mut(&mut self, domain: DomainId, color: usize) -> &mut CacheableQueue {
        let capacity = self.budget(domain);
        self.queues
            .entry((domain, color))
            .or_insert_with(|| CacheableQueue::new(domain, color, capacity))
    }

    pub fn contains(&self, domain: DomainId, color: usize, page: PageId) -> bool {
        self.queue(domain, color).is_some_and(|q| q.contains(page))
    }

    /// Evicts `page` from `domain`'s queue: NC bits set on all the domain's
    /// PTEs to it and the page flushed out of the cache so no residue
    /// remains.
    fn evict_page(
        pages: &mut PageTable,
        cache: &mut Cache,
        domain: DomainId,
        page: PageId,
    ) {
        pages.set_nc_for_domain_page(domain, page, true);
        cache.flush_page(page);
    }

    /// Handles the NC half of a page fault: the page joins the queue (most
    /// recent end), the faulting PTE's NC bit is cleared, and an
    /// over-capacity queue pushes out its least-recently-ranked page.
    pub fn fault_nc(
        &mut self,
        pages: &mut PageTable,
        cache: &mut Cache,
        domain: DomainId,
        vpage: crate::lifecycle::VPage,
        page: PageId,
        color: usize,
    ) -> NcResolution {
        self.register_domain(domain);
        let queue = self.queue_mut(domain, color);
        if queue.contains(page) {
            // Sibling PTE faulting on an already-cacheable page: clear the
            // bit without altering the queue.
            pages.clear_nc_bit(domain, vpage);
            return NcResolution { admitted: false, evicted: None, cacheable: true };
        }
        queue.push_mru(page);
        pages.clear_nc_bit(domain, vpage);
        let mut evicted = None;
        if queue.len() > queue.capacity {
            let victim = queue.pop_lru().expect("over-capacity queue is nonempty");
            Self::evict_page(pages, cache, domain, victim);
            evicted = Some(victim);
        }
        let cacheable = self.contains(domain, color, page);
        NcResolution { admitted: true, evicted, cacheable }
    }

    /// Removes `page` from `domain`'s queue without setting NC bits (the
    /// domain no longer maps it); returns whether it was present.
    pub fn drop_entry(&mut self, domain: DomainId, color: usize, page: PageId) -> bool {
        self.queues.get_mut(&(domain, color)).is_some_and(|q| q.remove(page))
    }

    /// Removes a dead page from every queue (frame freed by a merge).
    pub fn drop_everywhere(&mut self, page: PageId) {
        for q in self.queues.values_mut() {
            q.remove(page);
        }
    }

    /// Re-sorts every queue from an ACCESSED-bit snapshot taken by the
    /// caller (the combined daemon shares one snapshot across queue
    /// re-sorting and lifecycle state checks).
    pub fn resort_all(&mut self, counts: &BTreeMap<(DomainId, PageId), u32>) {
        for q in self.queues.values_mut() {
            q.resort(counts);
        }
    }

    /// Standalone re-sort of one queue: counts the domain's set ACCESSED
    /// bits per queued page, reorders descending (stable), and clears the
    /// inspected bits.
    pub fn resort_queue(&mut self, pages: &mut PageTable, domain: DomainId, color: usize) {
        let counts = pages.accessed_counts();
        if let Some(q) = self.queues.get_mut(&(domain, color)) {
            q.resort(&counts);
            let members: Vec<PageId> = q.entries.iter().copied().collect();
            for p in members {
                pages.clear_accessed_for_domain_page(domain, p);
            }
        }
    }

    /// Sets one domain's budget; queues over the new capacity evict their
    /// least-recently-ranked entries (with NC bits and flushes) until
    /// compliant. Returns the evicted pages.
    pub fn set_budget(
        &mut self,
        pages: &mut PageTable,
        cache: &mut Cache,
        domain: DomainId,
        budget: usize,
    ) -> Vec<PageId> {
        self.budgets.insert(domain, budget);
        let mut evicted = Vec::new();
        for ((d, _), q) in self.queues.iter_mut() {
            if *d != domain {
                continue;
            }
            q.capacity = budget;
            while q.len() > q.capacity {
                let victim = q.pop_lru().unwrap();
                Self::evict_page(pages, cache, domain, victim);
                evicted.push(victim);
            }
        }
        evicted
    }

    /// Draws a fresh budget for every known domain, independently and
    /// memorylessly from `pmf`, shrinking queues as needed.
    pub fn redraw_budgets<R: Rng>(
        &mut self,
        pages: &mut PageTable,
        cache: &mut Cache,
        pmf: &BudgetPmf,
        rng: &mut R,
        draw_tick: u64,
    ) -> BudgetAssignment {
        let domains: Vec<DomainId> = self.budgets.keys().copied().collect();
        let mut budgets = BTreeMap::new();
        for d in domains {
            let q = pmf.sample(rng);
            self.set_budget(pages, cache, d, q);
            budgets.insert(d, q);
        }
        BudgetAssignment { budgets, draw_tick }
    }

    /// Queue invariants: capacity bounds, and the NC-bit contract that any
    /// fault-free (NC clear) PTE names a page in the domain's queue for its
    /// color.
    pub fn check_consistency(
        &self,
        pages: &PageTable,
        geometry: &crate::cache::CacheGeometry,
    ) -> Result<(), String> {
        for ((d, color), q) in &self.queues {
            if q.len() > q.capacity {
                return Err(format!(
                    "queue ({d}, {color}) holds {} > capacity {}",
                    q.len(),
                    q.capacity
                ));
            }
            if q.capacity != self.budget(*d) {
                return Err(format!("queue ({d}, {color}) capacity out of sync with budget"));
            }
        }
        for pte in pages.ptes() {
            if !pte.nc {
                let color = geometry.color_of(pte.ppage);
                if !self.contains(pte.domain, color, pte.ppage) {
                    return Err(format!(
                        "PTE ({}, {}) cacheable but page {} not queued",
                        pte.domain, pte.vpage, pte.ppage
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheGeometry;
    use crate::lifecycle::{LifecycleConfig, VPage};

    fn setup(budget: usize) -> (PageTable, Cache, QueueTable) {
        let geom = CacheGeometry::derive(16 * 64 * 64, 16, 64, 4096).unwrap();
        let pages = PageTable::new(LifecycleConfig {
            nc_on_map: true,
            ..LifecycleConfig::default()
        });
        (pages, Cache::new(geom), QueueTable::new(budget))
    }

    const D: DomainId = DomainId(1);

    #[test]
    fn fifth_page_evicts_first_without_resort() {
        let (mut pages, mut cache, mut queues) = setup(4);
        for i in 0..5u64 {
            pages.map_page(D, VPage(i), PageId(i)).unwrap();
        }
        let mut evicted = Vec::new();
        for i in 0..5u64 {
            let r = queues.fault_nc(&mut pages, &mut cache, D, VPage(i), PageId(i), 0);
            if let Some(p) = r.evicted {
                evicted.push(p);
            }
        }
        assert_eq!(evicted, vec![PageId(0)], "LRU entry is the first page in");
        // The evicted page's PTE faults again.
        assert!(pages.pte(D, VPage(0)).unwrap().nc);
        assert!(!pages.pte(D, VPage(4)).unwrap().nc);
        let geom = *cache.geometry();
        queues.check_consistency(&pages, &geom).unwrap();
    }

    #[test]
    fn sibling_pte_clears_lazily_without_reorder() {
        let (mut pages, mut cache, mut queues) = setup(4);
        pages.map_page(D, VPage(0), PageId(7)).unwrap();
        pages.map_page(D, VPage(1), PageId(7)).unwrap();
        queues.fault_nc(&mut pages, &mut cache, D, VPage(0), PageId(7), 0);
        assert!(pages.pte(D, VPage(1)).unwrap().nc, "sibling stays armed");
        let before: Vec<PageId> = queues.queue(D, 0).unwrap().entries().collect();
        let r = queues.fault_nc(&mut pages, &mut cache, D, VPage(1), PageId(7), 0);
        assert!(!r.admitted);
        assert!(!pages.pte(D, VPage(1)).unwrap().nc);
        let after: Vec<PageId> = queues.queue(D, 0).unwrap().entries().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn resort_orders_by_accessed_count_stable() {
        let (mut pages, mut cache, mut queues) = setup(8);
        for i in 0..3u64 {
            pages.map_page(D, VPage(i), PageId(i)).unwrap();
            queues.fault_nc(&mut pages, &mut cache, D, VPage(i), PageId(i), 0);
        }
        // Queue (MRU->LRU): [2, 1, 0]. Counts: p0: 0, p1: 3, p2: 1.
        pages.map_page(D, VPage(10), PageId(1)).unwrap();
        pages.map_page(D, VPage(11), PageId(1)).unwrap();
        for v in [1, 10, 11] {
            let pte = pages.pte(D, VPage(v)).unwrap();
            assert_eq!(pte.ppage, PageId(1));
        }
        for v in [1u64, 10, 11] {
            pages
                .handle_access(&mut cache, D, VPage(v), crate::lifecycle::AccessKind::Read)
                .unwrap();
        }
        pages.handle_access(&mut cache, D, VPage(2), crate::lifecycle::AccessKind::Read).unwrap();

        queues.resort_queue(&mut pages, D, 0);
        let order: Vec<PageId> = queues.queue(D, 0).unwrap().entries().collect();
        assert_eq!(order, vec![PageId(1), PageId(2), PageId(0)]);
        // Inspected bits cleared: a second resort keeps prior order.
        queues.resort_queue(&mut pages, D, 0);
        let order2: Vec<PageId> = queues.queue(D, 0).unwrap().entries().collect();
        assert_eq!(order2, order, "all-equal counts leave the order unchanged");
    }

    #[test]
    fn resort_empty_queue_is_noop() {
        let (mut pages, _cache, mut queues) = setup(4);
        queues.resort_queue(&mut pages, D, 3);
        assert!(queues.queue(D, 3).is_none());
    }

    #[test]
    fn budget_shrink_evicts_lru_tail() {
        let (mut pages, mut cache, mut queues) = setup(8);
        for i in 0..8u64 {
            pages.map_page(D, VPage(i), PageId(i)).unwrap();
            queues.fault_nc(&mut pages, &mut cache, D, VPage(i), PageId(i), 0);
            cache.access(D, crate::cache::BlockAddr { page: PageId(i), block: 0 });
        }
        let evicted = queues.set_budget(&mut pages, &mut cache, D, 4);
        assert_eq!(evicted.len(), 4);
        assert_eq!(evicted, vec![PageId(0), PageId(1), PageId(2), PageId(3)]);
        for p in &evicted {
            assert!(!cache.page_resident(*p), "evicted pages are flushed");
            assert!(pages.pte(D, VPage(p.0)).unwrap().nc);
        }
        assert_eq!(queues.queue(D, 0).unwrap().len(), 4);
    }

    #[test]
    fn redraw_matches_pmf_within_tv() {
        use rand::SeedableRng;
        let (mut pages, mut cache, mut queues) = setup(16);
        queues.register_domain(D);
        let pmf = BudgetPmf::new(vec![0.0, 0.0, 0.3, 0.0, 0.5, 0.2]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let draws = 100_000usize;
        let mut freq = vec![0f64; 6];
        for t in 0..draws {
            let a = queues.redraw_budgets(&mut pages, &mut cache, &pmf, &mut rng, t as u64);
            freq[a.budgets[&D]] += 1.0;
        }
        let tv: f64 = freq
            .iter()
            .enumerate()
            .map(|(q, f)| (f / draws as f64 - pmf.prob(q)).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "empirical TV {tv} too large");
    }

    #[test]
    fn degenerate_pmf_at_capacity_never_evicts() {
        use rand::SeedableRng;
        let (mut pages, mut cache, mut queues) = setup(4);
        for i in 0..4u64 {
            pages.map_page(D, VPage(i), PageId(i)).unwrap();
            queues.fault_nc(&mut pages, &mut cache, D, VPage(i), PageId(i), 0);
        }
        let pmf = BudgetPmf::degenerate(4, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = queues.redraw_budgets(&mut pages, &mut cache, &pmf, &mut rng, 0);
        assert_eq!(a.budgets[&D], 4);
        assert_eq!(queues.queue(D, 0).unwrap().len(), 4);
    }
}
