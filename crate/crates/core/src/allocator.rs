// SPDX-License-Identifier: Apache-2.0

//! Page-token allocator for confidential memory.
//!
//! Ownership of every confidential page is represented by a unique, movable
//! page token. The allocator hands tokens out and takes them back; a page
//! can be written through a token only by whoever holds it, and the token
//! type is neither cloneable nor copyable, so exclusivity is a property of
//! the type system backed by a runtime registry.
//!
//! Free tokens live in a size-hierarchy tree: one level per architectural
//! page size, each level 512 times larger than the one below. Allocation
//! pops the lowest-addressed free token of the right size, splitting the
//! lowest-addressed larger token level by level when the right size is
//! empty. Release zeroizes the page range, then greedily merges whenever
//! all 512 aligned siblings of a span are free, keeping the tree canonical:
//! no 512 contiguous, aligned free siblings of one size ever coexist.
//!
//! Heap accounting is modeled, not measured: a page token costs 9 bytes
//! and each non-empty tree node costs 32 bytes, where a node is a distinct
//! (level, parent-aligned 512-ary span) group holding at least one free
//! token. A fresh 1 GiB region is one token (9 B); the same region fully
//! carved into 4 KiB tokens is 262 144 tokens (2 359 296 B) and an empty
//! tree.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use crate::machine::{AddrInterval, Machine, PageSize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum Error {
    #[error("out of confidential memory for a {0} token")]
    OutOfMemory(PageSize),
    #[error("foreign or already-released token: {addr:#x} ({size})")]
    ForeignToken { addr: u64, size: PageSize },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Content state a token promises about its page range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenState {
    /// The range reads as all-zero.
    Zeroed,
    /// The holder has written payload into the range.
    Carrying,
}

/// Exclusive ownership of one naturally-aligned page range in confidential
/// memory. Deliberately not `Clone`/`Copy`: moving the token moves the
/// ownership. Only the allocator mints tokens.
#[derive(Debug, PartialEq, Eq)]
pub struct PageToken {
    addr: u64,
    size: PageSize,
    state: TokenState,
}

impl PageToken {
    fn new(addr: u64, size: PageSize) -> PageToken {
        PageToken { addr, size, state: TokenState::Zeroed }
    }

    pub fn address(&self) -> u64 {
        self.addr
    }

    pub fn size(&self) -> PageSize {
        self.size
    }

    pub fn len(&self) -> u64 {
        self.size.in_bytes()
    }

    pub fn state(&self) -> TokenState {
        self.state
    }

    /// Interval covered by this token.
    pub fn interval(&self) -> AddrInterval {
        AddrInterval::new(self.addr, self.len())
    }

    /// Mark the token as carrying payload. Crate-internal: flipped by the
    /// components that copy data into the page range they hold.
    pub(crate) fn set_carrying(&mut self) {
        self.state = TokenState::Carrying;
    }

    /// Mint a token out of thin air, bypassing the allocator.
    ///
    /// This models a *replayed token identifier* for adversarial tests
    /// (double-free attempts). It must never appear in non-test code.
    #[doc(hidden)]
    pub fn forge_for_tests(addr: u64, size: PageSize) -> PageToken {
        PageToken::new(addr, size)
    }
}

/// Work counters for the most recent operation, for the bounded-work
/// guarantee: an operation touches at most one node per level and at most
/// 512 entries within a node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpStats {
    /// Levels whose free set was read or written.
    pub levels_touched: usize,
    /// Largest number of per-level set insertions/removals.
    pub max_entries_per_level: usize,
}

/// The four modeled occupancy counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverheadReport {
    /// Tokens currently in the free tree.
    pub free_tokens: u64,
    /// Tokens currently held by owners (TVM pages, tables, save areas...).
    pub allocated_tokens: u64,
    /// Non-empty tree nodes: distinct (level, 512-aligned parent span)
    /// groups containing at least one free token.
    pub nonempty_nodes: u64,
    /// Modeled heap bytes: 9 per token (free or allocated) + 32 per node.
    pub modeled_bytes: u64,
}

/// Modeled cost of one page token.
pub const TOKEN_COST_BYTES: u64 = 9;
/// Modeled cost of one non-empty tree node.
pub const NODE_COST_BYTES: u64 = 32;

/// Free-token tree plus the live-token registry. Interior type; callers go
/// through [`PageAllocator`], which serializes access.
#[derive(Debug)]
struct AllocatorTree {
    /// Free token base addresses, one ordered set per page size.
    free: [BTreeSet<u64>; 4],
    /// Live (handed-out) tokens by base address.
    allocated: BTreeMap<u64, PageSize>,
    region: AddrInterval,
    max_size: PageSize,
    /// Adversarial-test hook: when false, release skips the registry
    /// check that catches double frees and foreign tokens.
    double_free_check: bool,
    last_stats: OpStats,
}

impl AllocatorTree {
    /// Greedy maximal cover: from the low end of the region, repeatedly
    /// take the largest enabled size that is aligned at the cursor and
    /// fits in the remainder. Produces the fewest, largest tokens.
    fn init(region: AddrInterval, max_size: PageSize) -> AllocatorTree {
        let mut free: [BTreeSet<u64>; 4] = Default::default();
        let mut cursor = region.start;
        while cursor < region.end {
            let remaining = region.end - cursor;
            let size = PageSize::ALL
                .iter()
                .rev()
                .copied()
                .find(|s| {
                    s.index() <= max_size.index() && s.is_aligned(cursor) && s.in_bytes() <= remaining
                })
                .expect("region bounds are 4 KiB aligned");
            free[size.index()].insert(cursor);
            cursor += size.in_bytes();
        }
        AllocatorTree {
            free,
            allocated: BTreeMap::new(),
            region,
            max_size,
            double_free_check: true,
            last_stats: OpStats::default(),
        }
    }

    /// Pop the lowest-addressed free token at `level`, splitting the
    /// lowest-addressed larger token if the level is empty. Splitting
    /// recurses at most once per level above.
    fn take_at(&mut self, level: usize, stats: &mut OpStats) -> Result<u64> {
        stats.levels_touched += 1;
        if let Some(&base) = self.free[level].iter().next() {
            self.free[level].remove(&base);
            stats.max_entries_per_level = stats.max_entries_per_level.max(1);
            return Ok(base);
        }
        if level >= self.max_size.index() {
            return Err(Error::OutOfMemory(PageSize::from_index(level).unwrap()));
        }
        let parent = self.take_at(level + 1, stats)?;
        let child = PageSize::from_index(level).unwrap().in_bytes();
        for i in 1..512u64 {
            self.free[level].insert(parent + i * child);
        }
        stats.max_entries_per_level = stats.max_entries_per_level.max(512);
        Ok(parent)
    }

    fn allocate(&mut self, size: PageSize) -> Result<PageToken> {
        let mut stats = OpStats::default();
        if size.index() > self.max_size.index() {
            self.last_stats = stats;
            return Err(Error::OutOfMemory(size));
        }
        let result = self.take_at(size.index(), &mut stats);
        self.last_stats = stats;
        let base = result.map_err(|_| Error::OutOfMemory(size))?;
        self.allocated.insert(base, size);
        Ok(PageToken::new(base, size))
    }

    fn deallocate(&mut self, token: PageToken, machine: &mut Machine) -> Result<()> {
        let mut stats = OpStats::default();
        if self.double_free_check && self.allocated.get(&token.addr) != Some(&token.size) {
            self.last_stats = stats;
            return Err(Error::ForeignToken { addr: token.addr, size: token.size });
        }
        self.allocated.remove(&token.addr);
        // Zero-on-free: the page range is scrubbed before the span can
        // ever be handed out again.
        machine.zero_fill(token.addr, token.len());

        let mut level = token.size.index();
        let mut base = token.addr;
        self.free[level].insert(base);
        stats.levels_touched += 1;
        stats.max_entries_per_level = stats.max_entries_per_level.max(1);

        // Canonical form: merge whenever all 512 aligned siblings of the
        // parent span are free and the merged span stays inside the region
        // and the enabled maximum size.
        while level < self.max_size.index() {
            let child = PageSize::from_index(level).unwrap().in_bytes();
            let parent_span = child * 512;
            let parent = base - (base % parent_span);
            if parent < self.region.start || parent + parent_span > self.region.end {
                break;
            }
            let all_free = (0..512u64).all(|i| self.free[level].contains(&(parent + i * child)));
            if !all_free {
                break;
            }
            for i in 0..512u64 {
                self.free[level].remove(&(parent + i * child));
            }
            level += 1;
            self.free[level].insert(parent);
            base = parent;
            stats.levels_touched += 1;
            stats.max_entries_per_level = stats.max_entries_per_level.max(512);
        }
        self.last_stats = stats;
        Ok(())
    }

    fn report(&self) -> OverheadReport {
        let free_tokens: u64 = self.free.iter().map(|s| s.len() as u64).sum();
        let allocated_tokens = self.allocated.len() as u64;
        // A node is a (level, parent-span) group with at least one free
        // token; count distinct groups per level.
        let mut nonempty_nodes = 0u64;
        for (level, set) in self.free.iter().enumerate() {
            let span = PageSize::from_index(level).unwrap().in_bytes() * 512;
            let mut last_group = None;
            for &base in set {
                let group = base - (base % span);
                if last_group != Some(group) {
                    nonempty_nodes += 1;
                    last_group = Some(group);
                }
            }
        }
        let tokens = free_tokens + allocated_tokens;
        OverheadReport {
            free_tokens,
            allocated_tokens,
            nonempty_nodes,
            modeled_bytes: TOKEN_COST_BYTES * tokens + NODE_COST_BYTES * nonempty_nodes,
        }
    }

    fn free_bytes(&self) -> u64 {
        self.free
            .iter()
            .enumerate()
            .map(|(level, set)| PageSize::from_index(level).unwrap().in_bytes() * set.len() as u64)
            .sum()
    }
}

/// Thread-safe allocator service: the free tree behind one mutex, the
/// single internal mutual-exclusion region all token operations pass
/// through.
#[derive(Debug)]
pub struct PageAllocator {
    tree: Mutex<AllocatorTree>,
}

impl PageAllocator {
    /// Seed the tree with a greedy maximal cover of the confidential
    /// region. `region` bounds must be 4 KiB aligned; `max_size` caps the
    /// token sizes in play (1 GiB in the default profile, 512 GiB only
    /// when explicitly enabled).
    pub fn init(region: AddrInterval, max_size: PageSize) -> PageAllocator {
        assert!(
            PageSize::Size4KiB.is_aligned(region.start) && PageSize::Size4KiB.is_aligned(region.end),
            "confidential interval must be 4 KiB aligned"
        );
        assert!(!region.is_empty(), "confidential interval must be nonempty");
        PageAllocator { tree: Mutex::new(AllocatorTree::init(region, max_size)) }
    }

    /// Take exclusive ownership of one zeroed page of the given size.
    /// Splits the lowest-addressed larger free token when needed.
    pub fn allocate(&self, size: PageSize) -> Result<PageToken> {
        self.tree.lock().unwrap().allocate(size)
    }

    /// Return a token. The page range is zeroized through the machine
    /// before the span becomes allocatable again, and adjacent free
    /// siblings are merged back to canonical form. A token that is not
    /// currently live (double free, forged identifier) is refused.
    pub fn deallocate(&self, token: PageToken, machine: &mut Machine) -> Result<()> {
        self.tree.lock().unwrap().deallocate(token, machine)
    }

    /// The four modeled occupancy counters.
    pub fn report(&self) -> OverheadReport {
        self.tree.lock().unwrap().report()
    }

    /// Total bytes covered by free tokens (conservation oracle input).
    pub fn free_bytes(&self) -> u64 {
        self.tree.lock().unwrap().free_bytes()
    }

    /// Region this allocator manages.
    pub fn region(&self) -> AddrInterval {
        self.tree.lock().unwrap().region
    }

    /// Work counters of the most recent allocate/deallocate.
    pub fn last_op_stats(&self) -> OpStats {
        self.tree.lock().unwrap().last_stats
    }

    /// Adversarial-test hook: disable the live-token registry check so a
    /// double free goes through. Exists so the attack suite can prove the
    /// check is what catches the attack.
    #[doc(hidden)]
    pub fn set_double_free_check(&self, enabled: bool) {
        self.tree.lock().unwrap().double_free_check = enabled;
    }

    /// Free token multiset as (base, size) pairs, ascending. Oracle input.
    pub fn free_tokens(&self) -> Vec<(u64, PageSize)> {
        let tree = self.tree.lock().unwrap();
        let mut out = Vec::new();
        for (level, set) in tree.free.iter().enumerate() {
            let size = PageSize::from_index(level).unwrap();
            out.extend(set.iter().map(|&b| (b, size)));
        }
        out.sort_unstable();
        out
    }

    /// Live token multiset as (base, size) pairs, ascending. Oracle input.
    pub fn live_tokens(&self) -> Vec<(u64, PageSize)> {
        let tree = self.tree.lock().unwrap();
        tree.allocated.iter().map(|(&b, &s)| (b, s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{Machine, MachineConfig};

    const GIB: u64 = 1 << 30;
    const MIB: u64 = 1 << 20;

    fn test_machine() -> Machine {
        Machine::build(MachineConfig {
            memory_base: 0x8000_0000,
            memory_size: 2 * GIB,
            confidential_base: 0xC000_0000,
            confidential_size: GIB,
            hart_count: 1,
        })
        .unwrap()
    }

    fn gib_allocator() -> PageAllocator {
        PageAllocator::init(AddrInterval::new(0xC000_0000, GIB), PageSize::Size1GiB)
    }

    #[test]
    fn fresh_gib_region_is_one_token_costing_9_bytes() {
        let alloc = gib_allocator();
        let report = alloc.report();
        assert_eq!(report.free_tokens, 1);
        assert_eq!(report.allocated_tokens, 0);
        assert_eq!(TOKEN_COST_BYTES * (report.free_tokens + report.allocated_tokens), 9);
        assert_eq!(alloc.free_tokens(), vec![(0xC000_0000, PageSize::Size1GiB)]);
    }

    #[test]
    fn greedy_cover_uses_fewest_largest_tokens() {
        // 2 MiB region: a single 2 MiB token.
        let a = PageAllocator::init(AddrInterval::new(0xC000_0000, 2 * MIB), PageSize::Size1GiB);
        assert_eq!(a.free_tokens(), vec![(0xC000_0000, PageSize::Size2MiB)]);

        // 1 GiB + 2 MiB, 1 GiB-aligned base: one of each.
        let b = PageAllocator::init(AddrInterval::new(0xC000_0000, GIB + 2 * MIB), PageSize::Size1GiB);
        assert_eq!(
            b.free_tokens(),
            vec![(0xC000_0000, PageSize::Size1GiB), (0xC000_0000 + GIB, PageSize::Size2MiB)]
        );

        // 8 MiB: four 2 MiB tokens.
        let c = PageAllocator::init(AddrInterval::new(0xC000_0000, 8 * MIB), PageSize::Size1GiB);
        assert_eq!(c.free_tokens().len(), 4);
        assert!(c.free_tokens().iter().all(|&(_, s)| s == PageSize::Size2MiB));
    }

    #[test]
    fn first_4kib_allocation_splits_down_the_low_edge() {
        let alloc = gib_allocator();
        let token = alloc.allocate(PageSize::Size4KiB).unwrap();
        // Deterministic split policy: the token is the region base.
        assert_eq!(token.address(), 0xC000_0000);
        assert_eq!(token.state(), TokenState::Zeroed);

        let free = alloc.free_tokens();
        let free_2m = free.iter().filter(|&&(_, s)| s == PageSize::Size2MiB).count();
        let free_4k = free.iter().filter(|&&(_, s)| s == PageSize::Size4KiB).count();
        assert_eq!(free_2m, 511);
        assert_eq!(free_4k, 511);
        assert_eq!(free.len(), 1022);

        // 1022 free + 1 allocated = 1023 tokens -> 9207 modeled token bytes.
        let report = alloc.report();
        assert_eq!(report.free_tokens + report.allocated_tokens, 1023);
        assert_eq!(TOKEN_COST_BYTES * (report.free_tokens + report.allocated_tokens), 9207);
        // 511 siblings split from one 1 GiB parent and 511 from one 2 MiB
        // parent: two non-empty nodes.
        assert_eq!(report.nonempty_nodes, 2);
    }

    #[test]
    fn release_merges_back_to_the_initial_cover() {
        let mut machine = test_machine();
        let alloc = gib_allocator();
        let t1 = alloc.allocate(PageSize::Size4KiB).unwrap();
        let t2 = alloc.allocate(PageSize::Size4KiB).unwrap();
        alloc.deallocate(t2, &mut machine).unwrap();
        alloc.deallocate(t1, &mut machine).unwrap();
        assert_eq!(alloc.free_tokens(), vec![(0xC000_0000, PageSize::Size1GiB)]);
        assert_eq!(alloc.free_bytes(), GIB);
    }

    #[test]
    fn double_free_is_refused() {
        let mut machine = test_machine();
        let alloc = gib_allocator();
        let token = alloc.allocate(PageSize::Size4KiB).unwrap();
        let addr = token.address();
        alloc.deallocate(token, &mut machine).unwrap();
        let replayed = PageToken::forge_for_tests(addr, PageSize::Size4KiB);
        assert!(matches!(
            alloc.deallocate(replayed, &mut machine),
            Err(Error::ForeignToken { .. })
        ));
    }

    #[test]
    fn foreign_token_with_wrong_size_is_refused() {
        let mut machine = test_machine();
        let alloc = gib_allocator();
        let token = alloc.allocate(PageSize::Size4KiB).unwrap();
        let forged = PageToken::forge_for_tests(token.address(), PageSize::Size2MiB);
        assert!(alloc.deallocate(forged, &mut machine).is_err());
        alloc.deallocate(token, &mut machine).unwrap();
    }

    #[test]
    fn release_zeroizes_the_page_range() {
        let mut machine = test_machine();
        let alloc = gib_allocator();
        let mut token = alloc.allocate(PageSize::Size4KiB).unwrap();
        let addr = token.address();
        machine.write(crate::machine::AccessDomain::Tsm, addr, &[0xAB; 4096]).unwrap();
        token.set_carrying();
        assert!(!machine.range_is_zero(addr, 4096));
        alloc.deallocate(token, &mut machine).unwrap();
        assert!(machine.range_is_zero(addr, 4096));
    }

    #[test]
    fn exhaustion_reports_out_of_memory() {
        let alloc = PageAllocator::init(AddrInterval::new(0xC000_0000, 8 * 4096), PageSize::Size1GiB);
        let mut held = Vec::new();
        for _ in 0..8 {
            held.push(alloc.allocate(PageSize::Size4KiB).unwrap());
        }
        assert!(matches!(alloc.allocate(PageSize::Size4KiB), Err(Error::OutOfMemory(_))));
        // Larger than anything the region could hold.
        assert!(alloc.allocate(PageSize::Size2MiB).is_err());
    }

    #[test]
    fn operations_touch_bounded_work() {
        let alloc = gib_allocator();
        let _t = alloc.allocate(PageSize::Size4KiB).unwrap();
        let stats = alloc.last_op_stats();
        assert!(stats.levels_touched <= PageSize::ALL.len());
        assert!(stats.max_entries_per_level <= 512);
    }

    #[test]
    fn allocation_walks_addresses_in_order() {
        let alloc = gib_allocator();
        let a = alloc.allocate(PageSize::Size4KiB).unwrap();
        let b = alloc.allocate(PageSize::Size4KiB).unwrap();
        let c = alloc.allocate(PageSize::Size2MiB).unwrap();
        assert_eq!(a.address(), 0xC000_0000);
        assert_eq!(b.address(), 0xC000_1000);
        // The first whole free 2 MiB span sits right after the split one.
        assert_eq!(c.address(), 0xC000_0000 + 2 * MIB);
    }
}
