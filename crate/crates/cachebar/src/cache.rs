//! Minimal set-associative last-level cache model with per-set LRU
//! replacement, page coloring and explicit flush.
//!
//! Time is a logical event counter: there is no wall clock anywhere in the
//! simulator. Entries are tagged with the domain that last touched them so
//! that experiment harnesses can attribute evictions; classifiers must not
//! look at that tag (a real attacker only sees timing).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a security domain (container).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainId(pub u32);

impl std::fmt::Display for DomainId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier of a physical page frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PageId(pub u64);

impl std::fmt::Display for PageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A cache-line-sized block of a physical page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockAddr {
    pub page: PageId,
    /// Index of the block within its page, `< lines_per_page`.
    pub block: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("{name} must be a positive power of two, got {value}")]
    NotPowerOfTwo { name: &'static str, value: usize },
    #[error("cache size {cache_bytes} not divisible by ways*line_size = {per_way}")]
    NotDivisible { cache_bytes: usize, per_way: usize },
    #[error("page size {page_size} smaller than line size {line_size}")]
    PageSmallerThanLine { page_size: usize, line_size: usize },
    #[error("sets ({sets}) not divisible by lines per page ({lines_per_page})")]
    NoColors { sets: usize, lines_per_page: usize },
}

/// Shape of the modeled LLC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub ways: usize,
    pub sets: usize,
    pub line_size: usize,
    pub page_size: usize,
}

impl CacheGeometry {
    /// Derives the set count from total capacity. All inputs must be powers
    /// of two and the derived set count must be divisible by the number of
    /// lines per page so that page colors exist.
    pub fn derive(
        cache_bytes: usize,
        ways: usize,
        line_size: usize,
        page_size: usize,
    ) -> Result<Self, GeometryError> {
        let pow2 = |name: &'static str, value: usize| {
            if value == 0 || !value.is_power_of_two() {
                Err(GeometryError::NotPowerOfTwo { name, value })
            } else {
                Ok(())
            }
        };
        pow2("cache_bytes", cache_bytes)?;
        pow2("ways", ways)?;
        pow2("line_size", line_size)?;
        pow2("page_size", page_size)?;
        if page_size < line_size {
            return Err(GeometryError::PageSmallerThanLine { page_size, line_size });
        }
        let per_way = ways * line_size;
        if cache_bytes % per_way != 0 {
            return Err(GeometryError::NotDivisible { cache_bytes, per_way });
        }
        let sets = cache_bytes / per_way;
        let geom = CacheGeometry { ways, sets, line_size, page_size };
        if sets % geom.lines_per_page() != 0 {
            return Err(GeometryError::NoColors { sets, lines_per_page: geom.lines_per_page() });
        }
        Ok(geom)
    }

    pub fn lines_per_page(&self) -> usize {
        self.page_size / self.line_size
    }

    /// Number of page colors: pages of the same color contend for the same
    /// group of cache sets.
    pub fn colors(&self) -> usize {
        self.sets / self.lines_per_page()
    }

    pub fn color_of(&self, page: PageId) -> usize {
        (page.0 % self.colors() as u64) as usize
    }

    /// Maps a block to its cache set and its page's color. Blocks of one
    /// page land in `lines_per_page` distinct consecutive sets.
    pub fn locate(&self, block: BlockAddr) -> (usize, usize) {
        debug_assert!(block.block < self.lines_per_page());
        let color = self.color_of(block.page);
        (color * self.lines_per_page() + block.block, color)
    }

    /// The block of `page` that maps to cache set `set`, if any.
    pub fn block_for_set(&self, page: PageId, set: usize) -> Option<BlockAddr> {
        let color = self.color_of(page);
        let base = color * self.lines_per_page();
        if set >= base && set < base + self.lines_per_page() {
            Some(BlockAddr { page, block: set - base })
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Line {
    block: BlockAddr,
    domain: DomainId,
}

/// Outcome of a cache access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessResult {
    /// The block was already cached; `prior_domain` is who touched it last.
    Hit { prior_domain: DomainId },
    /// The block was inserted; a full set reports the evicted LRU entry.
    Miss { evicted: Option<(BlockAddr, DomainId)> },
}

impl AccessResult {
    pub fn is_hit(&self) -> bool {
        matches!(self, AccessResult::Hit { .. })
    }
}

/// Cache contents: per set, an MRU-to-LRU ordered list of at most
/// `ways` lines. A block appears at most once per set.
#[derive(Debug, Clone)]
pub struct Cache {
    geometry: CacheGeometry,
    sets: Vec<VecDeque<Line>>,
}

impl Cache {
    pub fn new(geometry: CacheGeometry) -> Self {
        Cache { geometry, sets: vec![VecDeque::new(); geometry.sets] }
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geometry
    }

    /// Accesses `block` on behalf of `domain`: the block becomes MRU in its
    /// set; on a miss with a full set the LRU line is evicted and reported.
    pub fn access(&mut self, domain: DomainId, block: BlockAddr) -> AccessResult {
        let (set_index, _) = self.geometry.locate(block);
        let set = &mut self.sets[set_index];
        if let Some(pos) = set.iter().position(|l| l.block == block) {
            let prior = set[pos].domain;
            set.remove(pos);
            set.push_front(Line { block, domain });
            return AccessResult::Hit { prior_domain: prior };
        }
        let evicted = if set.len() == self.geometry.ways {
            set.pop_back().map(|l| (l.block, l.domain))
        } else {
            None
        };
        set.push_front(Line { block, domain });
        AccessResult::Miss { evicted }
    }

    /// Invalidates one block; relative LRU order of other lines is
    /// unchanged. Returns the number of lines removed (0 or 1).
    pub fn flush_block(&mut self, block: BlockAddr) -> usize {
        let (set_index, _) = self.geometry.locate(block);
        let set = &mut self.sets[set_index];
        if let Some(pos) = set.iter().position(|l| l.block == block) {
            set.remove(pos);
            1
        } else {
            0
        }
    }

    /// Invalidates every block of `page`, as clflush applied to each of the
    /// page's memory blocks would.
    pub fn flush_page(&mut self, page: PageId) -> usize {
        let mut count = 0;
        for block in 0..self.geometry.lines_per_page() {
            count += self.flush_block(BlockAddr { page, block });
        }
        count
    }

    pub fn contains(&self, block: BlockAddr) -> bool {
        let (set_index, _) = self.geometry.locate(block);
        self.sets[set_index].iter().any(|l| l.block == block)
    }

    pub fn page_resident(&self, page: PageId) -> bool {
        (0..self.geometry.lines_per_page())
            .any(|block| self.contains(BlockAddr { page, block }))
    }

    /// MRU-to-LRU contents of one set as (block, last toucher) pairs.
    pub fn set_contents(&self, set_index: usize) -> Vec<(BlockAddr, DomainId)> {
        self.sets[set_index].iter().map(|l| (l.block, l.domain)).collect()
    }

    pub fn clear(&mut self) {
        for set in &mut self.sets {
            set.clear();
        }
    }

    /// Checks structural invariants: set occupancy and block uniqueness.
    pub fn check_consistency(&self) -> Result<(), String> {
        for (i, set) in self.sets.iter().enumerate() {
            if set.len() > self.geometry.ways {
                return Err(format!("set {i} holds {} > {} lines", set.len(), self.geometry.ways));
            }
            for (a, line) in set.iter().enumerate() {
                if set.iter().skip(a + 1).any(|l| l.block == line.block) {
                    return Err(format!("set {i} holds duplicate block {:?}", line.block));
                }
                let (expect, _) = self.geometry.locate(line.block);
                if expect != i {
                    return Err(format!("block {:?} cached in set {i}, maps to {expect}", line.block));
                }
            }
        }
        Ok(())
    }
}
