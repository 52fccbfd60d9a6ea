// SPDX-License-Identifier: Apache-2.0

//! Guest second-stage page-table validation and copy.
//!
//! During promotion the hypervisor hands over a second-stage page table it
//! built in non-confidential memory. Nothing in it is trusted: the walker
//! validates every entry, copies the table structure and every mapped
//! non-zero page into freshly allocated confidential page tokens, and
//! produces the translation map the security manager uses from then on.
//! The hypervisor-owned original never becomes load-bearing.
//!
//! Table geometry is a 4-level, 512-ary radix tree over a 50-bit
//! guest-physical space: a 16 KiB root with 2048 entries, 4 KiB tables
//! with 512 entries below it, 8-byte little-endian entries. An entry with
//! any of R/W/X set is a leaf; a valid entry with none set points at the
//! next-level table. Leaves are accepted at the 4 KiB, 2 MiB, and 1 GiB
//! levels.
//!
//! Entry bits: V (bit 0), R/W/X (bits 1-3), physical page number
//! (bits 10-53). Every other bit is reserved-must-be-zero, and an invalid
//! entry must be entirely zero — the strictest verifiable reading, so a
//! malformed table is always an error, never silently tolerated.
//!
//! Three rules make the copy safe:
//!
//! * every address the walker reads — tables and mapped pages alike — must
//!   validate as non-confidential, so a table that points into confidential
//!   memory (the page-table-remap attack) dies with `InvalidAddress`;
//! * every table may be visited once, so cycles and diamonds die with
//!   `MalformedTable` instead of looping;
//! * the walk is all-or-nothing: on any error every token acquired so far
//!   is released (and thereby zeroized) before the error is returned.
//!
//! Pages whose source content is all-zero are not copied: they enter the
//! map as `LazyZero` and get a real zeroed token on first touch. The
//! measurement list is normalized to non-zero 4 KiB guest pages in
//! ascending guest-physical order regardless of leaf size, so an owner
//! computing expected measurements from an image never needs to know how
//! the hypervisor chose to map it.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::allocator::{PageAllocator, PageToken};
use crate::machine::{Machine, PageSize, PAGE_BYTES};

/// Root level of the table hierarchy. Levels 2..0 are interior/leaf.
const ROOT_LEVEL: usize = 3;
/// The root table is four consecutive 4 KiB pages.
pub const ROOT_TABLE_BYTES: u64 = 16 * 1024;
const ROOT_ENTRIES: usize = 2048;
const TABLE_ENTRIES: usize = 512;

/// Page-table entry encoding.
pub mod pte {
    pub const V: u64 = 1 << 0;
    pub const R: u64 = 1 << 1;
    pub const W: u64 = 1 << 2;
    pub const X: u64 = 1 << 3;
    pub const PERMS: u64 = R | W | X;
    pub const PPN_SHIFT: u32 = 10;
    pub const PPN_BITS: u32 = 44;
    pub const PPN_MASK: u64 = (((1u64 << PPN_BITS) - 1)) << PPN_SHIFT;
    /// Bits the format defines; everything else is reserved-must-be-zero.
    pub const KNOWN_MASK: u64 = V | PERMS | PPN_MASK;

    /// Entry whose target is `addr` (4 KiB-aligned) with given flag bits.
    pub fn encode(addr: u64, flags: u64) -> u64 {
        ((addr >> 12) << PPN_SHIFT) | flags
    }

    /// Physical address the entry points at.
    pub fn target(raw: u64) -> u64 {
        ((raw & PPN_MASK) >> PPN_SHIFT) << 12
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum Error {
    /// A table or leaf target failed non-confidential validation — it
    /// points into confidential memory or outside memory entirely.
    #[error("invalid address in guest table: {context} at {addr:#x}")]
    InvalidAddress { addr: u64, context: &'static str },
    #[error("malformed guest table: {reason}")]
    MalformedTable { reason: &'static str },
    #[error("out of confidential memory during table copy")]
    OutOfMemory,
    #[error("guest fault: no mapping for guest address {gpa:#x}")]
    GuestFault { gpa: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Where a guest page lives after validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafState {
    /// Backed by a confidential page at this address.
    Mapped(u64),
    /// All-zero at walk time; materialized on first touch.
    LazyZero,
    /// Explicitly shared non-confidential page at this address.
    Shared(u64),
}

/// Result of translating one guest-physical address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Translation {
    Confidential(u64),
    Shared(u64),
    LazyZero,
}

/// A guest page that participates in the code+data measurement:
/// a non-zero 4 KiB page and its content at walk time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasuredPage {
    /// Guest page number (guest-physical address >> 12).
    pub gpn: u64,
    /// Exactly 4096 bytes.
    pub bytes: Vec<u8>,
}

/// The confidential copy of a TVM's page tables plus the authoritative
/// translation map. Tokens for the data pages themselves live with the
/// TVM descriptor, not here.
#[derive(Debug)]
pub struct TvmPageTables {
    /// Four 4 KiB tokens backing the 16 KiB root table copy.
    root: Vec<PageToken>,
    /// One 4 KiB token per copied interior table.
    intermediates: Vec<PageToken>,
    /// Guest page base (4 KiB-aligned guest-physical address) -> backing.
    leaf_map: BTreeMap<u64, LeafState>,
}

impl TvmPageTables {
    /// Authoritative lookup used by every guest access.
    pub fn translate(&self, gpa: u64) -> Result<Translation> {
        let page = gpa & !(PAGE_BYTES - 1);
        let offset = gpa & (PAGE_BYTES - 1);
        match self.leaf_map.get(&page) {
            None => Err(Error::GuestFault { gpa }),
            Some(LeafState::Mapped(base)) => Ok(Translation::Confidential(base + offset)),
            Some(LeafState::Shared(npa)) => Ok(Translation::Shared(npa + offset)),
            Some(LeafState::LazyZero) => Ok(Translation::LazyZero),
        }
    }

    pub fn leaf(&self, gpa_page: u64) -> Option<LeafState> {
        self.leaf_map.get(&gpa_page).copied()
    }

    /// Record a shared non-confidential page. Refused (returns false) when
    /// the guest page already has any backing.
    pub fn set_shared(&mut self, gpa_page: u64, npa: u64) -> bool {
        if self.leaf_map.contains_key(&gpa_page) {
            return false;
        }
        self.leaf_map.insert(gpa_page, LeafState::Shared(npa));
        true
    }

    /// Confidential page bases of all `Mapped` entries (for access rules).
    pub fn mapped_page_bases(&self) -> impl Iterator<Item = u64> + '_ {
        self.leaf_map.values().filter_map(|s| match s {
            LeafState::Mapped(a) => Some(*a),
            _ => None,
        })
    }

    /// Shared non-confidential page bases.
    pub fn shared_page_bases(&self) -> impl Iterator<Item = u64> + '_ {
        self.leaf_map.values().filter_map(|s| match s {
            LeafState::Shared(a) => Some(*a),
            _ => None,
        })
    }

    pub fn guest_pages(&self) -> impl Iterator<Item = (u64, LeafState)> + '_ {
        self.leaf_map.iter().map(|(&g, &s)| (g, s))
    }

    /// Tear down into the table tokens (root then interior) for release.
    pub fn into_tokens(self) -> Vec<PageToken> {
        let mut tokens = self.root;
        tokens.extend(self.intermediates);
        tokens
    }

    /// Table-structure tokens count (root tokens + interior tables).
    pub fn table_token_count(&self) -> usize {
        self.root.len() + self.intermediates.len()
    }

    /// Assemble a translation map with no backing tokens, for lifecycle
    /// model checks that never touch memory. Not part of the real flow.
    #[doc(hidden)]
    pub fn synthetic(leaves: &[(u64, LeafState)]) -> TvmPageTables {
        TvmPageTables {
            root: Vec::new(),
            intermediates: Vec::new(),
            leaf_map: leaves.iter().copied().collect(),
        }
    }
}

/// Everything a successful walk yields.
#[derive(Debug)]
pub struct WalkOutcome {
    pub tables: TvmPageTables,
    /// Tokens carrying copied guest pages, keyed by confidential base.
    pub data_tokens: Vec<PageToken>,
    /// Non-zero 4 KiB guest pages, ascending by guest-physical address.
    pub measured: Vec<MeasuredPage>,
}

/// Validate the guest table rooted at `root_addr` (which must be 16 KiB
/// aligned) and copy tables and mapped non-zero pages into confidential
/// tokens. All-or-nothing: on error, every acquired token is released and
/// the allocator is exactly as before the call.
pub fn walk_and_copy(
    machine: &mut Machine,
    alloc: &PageAllocator,
    root_addr: u64,
) -> Result<WalkOutcome> {
    if root_addr % ROOT_TABLE_BYTES != 0 {
        return Err(Error::MalformedTable { reason: "root table not 16 KiB aligned" });
    }
    let mut walk = Walk {
        machine,
        alloc,
        visited: HashSet::new(),
        root: Vec::new(),
        intermediates: Vec::new(),
        data_tokens: Vec::new(),
        leaf_map: BTreeMap::new(),
        measured: Vec::new(),
    };
    match walk.copy_table(root_addr, ROOT_LEVEL, 0) {
        Ok(_) => Ok(WalkOutcome {
            tables: TvmPageTables {
                root: walk.root,
                intermediates: walk.intermediates,
                leaf_map: walk.leaf_map,
            },
            data_tokens: walk.data_tokens,
            measured: walk.measured,
        }),
        Err(err) => {
            walk.release_all();
            Err(err)
        }
    }
}

/// First-touch materialization of a `LazyZero` page: allocate one zeroed
/// 4 KiB token and bind it. Idempotent against an already-mapped page —
/// the same address comes back and no token is spent. Returns the
/// confidential page base and the fresh token, if one was created (the
/// caller owns it).
pub fn materialize_zero_page(
    tables: &mut TvmPageTables,
    alloc: &PageAllocator,
    gpa: u64,
) -> Result<(u64, Option<PageToken>)> {
    let page = gpa & !(PAGE_BYTES - 1);
    match tables.leaf_map.get(&page) {
        None | Some(LeafState::Shared(_)) => Err(Error::GuestFault { gpa }),
        Some(LeafState::Mapped(base)) => Ok((*base, None)),
        Some(LeafState::LazyZero) => {
            let token = alloc
                .allocate(PageSize::Size4KiB)
                .map_err(|_| Error::OutOfMemory)?;
            let base = token.address();
            tables.leaf_map.insert(page, LeafState::Mapped(base));
            Ok((base, Some(token)))
        }
    }
}

struct Walk<'a> {
    machine: &'a mut Machine,
    alloc: &'a PageAllocator,
    visited: HashSet<u64>,
    root: Vec<PageToken>,
    intermediates: Vec<PageToken>,
    data_tokens: Vec<PageToken>,
    leaf_map: BTreeMap<u64, LeafState>,
    measured: Vec<MeasuredPage>,
}

impl Walk<'_> {
    /// Copy one table. Returns the confidential base of the copy (interior
    /// tables are single tokens, so the base is the whole story; the root
    /// copy may span non-adjacent tokens and its base is informational).
    fn copy_table(&mut self, src: u64, level: usize, gpa_base: u64) -> Result<u64> {
        if !self.visited.insert(src) {
            return Err(Error::MalformedTable { reason: "table visited twice (loop or diamond)" });
        }
        let (entries, table_bytes) = if level == ROOT_LEVEL {
            (ROOT_ENTRIES, ROOT_TABLE_BYTES)
        } else {
            (TABLE_ENTRIES, PAGE_BYTES)
        };
        let src_range = self
            .machine
            .validate_non_confidential(src, table_bytes)
            .map_err(|_| Error::InvalidAddress { addr: src, context: "page table" })?;
        let mut raw = vec![0u8; table_bytes as usize];
        self.machine.read_non_confidential(&src_range, 0, &mut raw);

        // The confidential copy, rewritten as entries resolve.
        let mut copy = vec![0u8; table_bytes as usize];

        for i in 0..entries {
            let raw_pte = u64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap());
            if raw_pte == 0 {
                continue;
            }
            if raw_pte & pte::V == 0 {
                return Err(Error::MalformedTable { reason: "invalid entry carries nonzero payload" });
            }
            if raw_pte & !pte::KNOWN_MASK != 0 {
                return Err(Error::MalformedTable { reason: "reserved bits set" });
            }
            let perms = raw_pte & pte::PERMS;
            let target = pte::target(raw_pte);
            let gpa = gpa_base + ((i as u64) << (12 + 9 * level as u64));
            let rewritten = if perms != 0 {
                self.copy_leaf(level, gpa, target, perms)?
            } else {
                if level == 0 {
                    return Err(Error::MalformedTable { reason: "table pointer at leaf level" });
                }
                let child = self.copy_table(target, level - 1, gpa)?;
                pte::encode(child, pte::V)
            };
            copy[i * 8..i * 8 + 8].copy_from_slice(&rewritten.to_le_bytes());
        }

        // Materialize the confidential copy across 4 KiB tokens.
        let token_count = (table_bytes / PAGE_BYTES) as usize;
        let mut first = 0u64;
        for t in 0..token_count {
            let mut token = self.alloc.allocate(PageSize::Size4KiB).map_err(|_| Error::OutOfMemory)?;
            if t == 0 {
                first = token.address();
            }
            let dst = self
                .machine
                .validate_confidential(token.address(), PAGE_BYTES)
                .expect("allocator tokens are confidential");
            self.machine
                .write_confidential(&dst, 0, &copy[t * PAGE_BYTES as usize..(t + 1) * PAGE_BYTES as usize]);
            token.set_carrying();
            if level == ROOT_LEVEL {
                self.root.push(token);
            } else {
                self.intermediates.push(token);
            }
        }
        Ok(first)
    }

    /// Validate and copy one leaf mapping of `level`-sized pages.
    fn copy_leaf(&mut self, level: usize, gpa: u64, target: u64, perms: u64) -> Result<u64> {
        if level > 2 {
            return Err(Error::MalformedTable { reason: "leaf above the largest supported page size" });
        }
        let size = PageSize::from_index(level).expect("levels 0..=2 map to page sizes");
        let len = size.in_bytes();
        if target % len != 0 {
            return Err(Error::MalformedTable { reason: "leaf target misaligned for its page size" });
        }
        // The defense at the heart of single-call promotion: data sources
        // must be hypervisor-owned memory, nothing else.
        let src_range = self
            .machine
            .validate_non_confidential(target, len)
            .map_err(|_| Error::InvalidAddress { addr: target, context: "leaf target" })?;

        if self.machine.range_is_zero(target, len) {
            for k in 0..len / PAGE_BYTES {
                self.leaf_map.insert(gpa + k * PAGE_BYTES, LeafState::LazyZero);
            }
            // Lazy pages keep an all-zero (invalid) entry in the copy;
            // the translation map is what backs them later.
            return Ok(0);
        }

        let mut token = self.alloc.allocate(size).map_err(|_| Error::OutOfMemory)?;
        let conf_base = token.address();
        let dst_range = self
            .machine
            .validate_confidential(conf_base, len)
            .expect("allocator tokens are confidential");
        // Copy and measure page by page from one read, so the copied and
        // the measured bytes cannot diverge.
        let mut page = vec![0u8; PAGE_BYTES as usize];
        for k in 0..len / PAGE_BYTES {
            self.machine.read_non_confidential(&src_range, k * PAGE_BYTES, &mut page);
            self.machine.write_confidential(&dst_range, k * PAGE_BYTES, &page);
            let guest_page = gpa + k * PAGE_BYTES;
            self.leaf_map.insert(guest_page, LeafState::Mapped(conf_base + k * PAGE_BYTES));
            if page.iter().any(|&b| b != 0) {
                self.measured.push(MeasuredPage { gpn: guest_page >> 12, bytes: page.clone() });
            }
        }
        token.set_carrying();
        self.data_tokens.push(token);
        Ok(pte::encode(conf_base, pte::V | perms))
    }

    /// Error path: hand every acquired token back, zeroizing as we go.
    fn release_all(&mut self) {
        for token in self
            .root
            .drain(..)
            .chain(self.intermediates.drain(..))
            .chain(self.data_tokens.drain(..))
        {
            self.alloc
                .deallocate(token, self.machine)
                .expect("walk tokens are genuine");
        }
    }
}

/// Hypervisor-side table builder: lays out a guest page table in
/// non-confidential memory the way a hypervisor would before promotion.
/// Used by the scenario loader, the owner tooling, and tests — including
/// adversarial tests, which corrupt the built bytes afterwards.
#[derive(Debug, Default)]
pub struct GuestTableBuilder {
    /// (guest-physical address, target physical address, size, perm bits)
    leaves: Vec<(u64, u64, PageSize, u64)>,
}

/// Layout produced by [`GuestTableBuilder::write`].
#[derive(Debug)]
pub struct BuiltTables {
    pub root: u64,
    /// (level, first guest address covered, table base address)
    pub tables: Vec<(usize, u64, u64)>,
    /// First free address after the layout.
    pub end: u64,
}

impl BuiltTables {
    /// Address of the entry that covers `gpa` at `level`. For corrupting
    /// specific entries in adversarial tests.
    pub fn entry_addr(&self, level: usize, gpa: u64) -> Option<u64> {
        let span = 1u64 << (12 + 9 * (level as u64 + 1));
        let prefix = if level == ROOT_LEVEL { 0 } else { gpa & !(span - 1) };
        let index = (gpa >> (12 + 9 * level as u64))
            & if level == ROOT_LEVEL { 0x7ff } else { 0x1ff };
        self.tables
            .iter()
            .find(|&&(l, p, _)| l == level && p == prefix)
            .map(|&(_, _, base)| base + index * 8)
    }
}

impl GuestTableBuilder {
    pub fn new() -> GuestTableBuilder {
        GuestTableBuilder::default()
    }

    /// Map `size` bytes of guest-physical space at `gpa` to physical
    /// memory at `target`, with R/W/X permission bits.
    pub fn map(&mut self, gpa: u64, target: u64, size: PageSize, perms: u64) -> &mut Self {
        assert!(size.index() <= 2, "leaves are at most 1 GiB");
        assert!(size.is_aligned(gpa) && size.is_aligned(target), "mapping must be naturally aligned");
        self.leaves.push((gpa, target, size, perms));
        self
    }

    /// Write the table tree at `root_base` (16 KiB aligned), child tables
    /// following contiguously. Returns the layout. Writing bypasses access
    /// checks: this models the hypervisor preparing its own memory before
    /// any call is made.
    pub fn write(&self, machine: &mut Machine, root_base: u64) -> BuiltTables {
        assert_eq!(root_base % ROOT_TABLE_BYTES, 0, "root must be 16 KiB aligned");
        // Entry maps per (level, covered-prefix), built leaf by leaf.
        let mut tables: BTreeMap<(usize, u64), HashMap<usize, u64>> = BTreeMap::new();
        // Walk order is stable, so table discovery order is stable too.
        let mut order: Vec<(usize, u64)> = vec![(ROOT_LEVEL, 0)];
        tables.insert((ROOT_LEVEL, 0), HashMap::new());
        for &(gpa, target, size, perms) in &self.leaves {
            let leaf_level = size.index();
            let mut level = ROOT_LEVEL;
            loop {
                let span_above = 1u64 << (12 + 9 * (level as u64 + 1));
                let prefix = if level == ROOT_LEVEL { 0 } else { gpa & !(span_above - 1) };
                let index = ((gpa >> (12 + 9 * level as u64))
                    & if level == ROOT_LEVEL { 0x7ff } else { 0x1ff }) as usize;
                if level == leaf_level {
                    tables
                        .get_mut(&(level, prefix))
                        .unwrap()
                        .insert(index, pte::encode(target, pte::V | perms));
                    break;
                }
                let child_span = 1u64 << (12 + 9 * level as u64);
                let child_prefix = gpa & !(child_span - 1);
                let child_key = (level - 1, child_prefix);
                if !tables.contains_key(&child_key) {
                    tables.insert(child_key, HashMap::new());
                    order.push(child_key);
                }
                // Pointer entries are encoded once addresses are assigned.
                level -= 1;
            }
        }

        // Assign addresses in discovery order: root first, then children.
        let mut addr_of: HashMap<(usize, u64), u64> = HashMap::new();
        let mut cursor = root_base;
        for &key in &order {
            addr_of.insert(key, cursor);
            cursor += if key.0 == ROOT_LEVEL { ROOT_TABLE_BYTES } else { PAGE_BYTES };
        }

        // Encode and write each table.
        for &(level, prefix) in &order {
            let entry_count = if level == ROOT_LEVEL { ROOT_ENTRIES } else { TABLE_ENTRIES };
            let mut bytes = vec![0u8; (entry_count * 8) as usize];
            let explicit = &tables[&(level, prefix)];
            for index in 0..entry_count {
                let mut raw = explicit.get(&index).copied().unwrap_or(0);
                if raw == 0 && level > 0 {
                    // Is there a child table at this slot?
                    let child_span = 1u64 << (12 + 9 * level as u64);
                    let child_prefix = prefix + index as u64 * child_span;
                    if let Some(&child_addr) = addr_of.get(&(level - 1, child_prefix)) {
                        raw = pte::encode(child_addr, pte::V);
                    }
                }
                if raw != 0 {
                    bytes[index * 8..index * 8 + 8].copy_from_slice(&raw.to_le_bytes());
                }
            }
            machine.poke(addr_of[&(level, prefix)], &bytes);
        }

        BuiltTables {
            root: root_base,
            tables: order.iter().map(|&(l, p)| (l, p, addr_of[&(l, p)])).collect(),
            end: cursor,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{AccessDomain, AddrInterval, MachineConfig};

    const GIB: u64 = 1 << 30;

    fn machine() -> Machine {
        Machine::build(MachineConfig {
            memory_base: 0x8000_0000,
            memory_size: 2 * GIB,
            confidential_base: 0xC000_0000,
            confidential_size: GIB,
            hart_count: 1,
        })
        .unwrap()
    }

    fn allocator() -> PageAllocator {
        PageAllocator::init(AddrInterval::new(0xC000_0000, GIB), PageSize::Size1GiB)
    }

    const ROOT: u64 = 0x9000_0000;

    #[test]
    fn single_page_walk_copies_and_maps() {
        let mut m = machine();
        let alloc = allocator();
        let payload = [0x5Au8; 4096];
        m.poke(0xA000_0000, &payload);
        GuestTableBuilder::new()
            .map(0x0, 0xA000_0000, PageSize::Size4KiB, pte::R | pte::W | pte::X)
            .write(&mut m, ROOT);

        let free_before = alloc.free_bytes();
        let out = walk_and_copy(&mut m, &alloc, ROOT).unwrap();

        // One data token plus the table structure: 4 root tokens and one
        // interior table per level below the root.
        assert_eq!(out.data_tokens.len(), 1);
        assert_eq!(out.tables.table_token_count(), 4 + 3);
        assert_eq!(out.measured.len(), 1);
        assert_eq!(out.measured[0].gpn, 0);
        assert_eq!(out.measured[0].bytes, payload);

        // The copy matches the source.
        match out.tables.translate(0x123).unwrap() {
            Translation::Confidential(addr) => {
                let mut copied = [0u8; 4096];
                m.peek(addr & !0xfff, &mut copied);
                assert_eq!(copied, payload);
                assert_eq!(addr & 0xfff, 0x123);
            }
            other => panic!("expected confidential mapping, got {other:?}"),
        }
        // Token accounting: 8 tokens of 4 KiB are out.
        assert_eq!(free_before - alloc.free_bytes(), 8 * 4096);
    }

    #[test]
    fn confidential_leaf_target_is_rejected_and_conserves_tokens() {
        let mut m = machine();
        let alloc = allocator();
        m.poke(0xA000_0000, &[1u8; 4096]);
        GuestTableBuilder::new()
            .map(0x0, 0xA000_0000, PageSize::Size4KiB, pte::R)
            .map(0x1000, 0xC000_0000, PageSize::Size4KiB, pte::R) // inside confidential memory
            .write(&mut m, ROOT);

        let free_before = alloc.free_bytes();
        let report_before = alloc.report();
        let err = walk_and_copy(&mut m, &alloc, ROOT).unwrap_err();
        assert!(matches!(err, Error::InvalidAddress { addr: 0xC000_0000, .. }));
        assert_eq!(alloc.free_bytes(), free_before);
        assert_eq!(alloc.report(), report_before);
    }

    #[test]
    fn table_pointer_into_confidential_memory_is_rejected() {
        let mut m = machine();
        let alloc = allocator();
        // Root entry 0 pointing at a "table" inside confidential memory.
        let entry = pte::encode(0xC000_0000, pte::V);
        m.poke(ROOT, &entry.to_le_bytes());
        let err = walk_and_copy(&mut m, &alloc, ROOT).unwrap_err();
        assert!(matches!(err, Error::InvalidAddress { addr: 0xC000_0000, .. }));
    }

    #[test]
    fn loops_and_diamonds_are_rejected() {
        let mut m = machine();
        let alloc = allocator();
        // Root entry 0 -> table A; A entry 0 -> root (a loop).
        let table_a = ROOT + ROOT_TABLE_BYTES;
        m.poke(ROOT, &pte::encode(table_a, pte::V).to_le_bytes());
        m.poke(table_a, &pte::encode(ROOT, pte::V).to_le_bytes());
        let err = walk_and_copy(&mut m, &alloc, ROOT).unwrap_err();
        assert_eq!(err, Error::MalformedTable { reason: "table visited twice (loop or diamond)" });

        // Diamond: two root entries pointing at the same child table.
        let mut m = machine();
        m.poke(ROOT, &pte::encode(table_a, pte::V).to_le_bytes());
        m.poke(ROOT + 8, &pte::encode(table_a, pte::V).to_le_bytes());
        let err = walk_and_copy(&mut m, &alloc, ROOT).unwrap_err();
        assert!(matches!(err, Error::MalformedTable { .. }));
    }

    #[test]
    fn reserved_bits_and_malformed_shapes_are_rejected() {
        let alloc = allocator();

        // Reserved bit set. Crafted below the root so the reserved-bit
        // check is isolated from the oversized-leaf check.
        let mut m = machine();
        let table_a = ROOT + ROOT_TABLE_BYTES;
        m.poke(ROOT, &pte::encode(table_a, pte::V).to_le_bytes());
        m.poke(table_a, &(pte::encode(0xA000_0000, pte::V | pte::R) | (1 << 8)).to_le_bytes());
        let err = walk_and_copy(&mut m, &alloc, ROOT).unwrap_err();
        assert_eq!(err, Error::MalformedTable { reason: "reserved bits set" });

        // Invalid entry with nonzero payload.
        let mut m = machine();
        m.poke(ROOT, &(pte::encode(0xA000_0000, 0) | pte::R).to_le_bytes());
        assert!(matches!(walk_and_copy(&mut m, &alloc, ROOT), Err(Error::MalformedTable { .. })));

        // Root-level leaf (would map 512 GiB).
        let mut m = machine();
        m.poke(ROOT, &pte::encode(0xA000_0000, pte::V | pte::R).to_le_bytes());
        assert_eq!(
            walk_and_copy(&mut m, &alloc, ROOT).unwrap_err(),
            Error::MalformedTable { reason: "leaf above the largest supported page size" }
        );

        // Misaligned root.
        let mut m = machine();
        assert!(matches!(
            walk_and_copy(&mut m, &alloc, ROOT + 4096),
            Err(Error::MalformedTable { .. })
        ));

        // Misaligned 2 MiB leaf target.
        let mut m = machine();
        let table_a = ROOT + ROOT_TABLE_BYTES;
        let table_b = table_a + 4096;
        m.poke(ROOT, &pte::encode(table_a, pte::V).to_le_bytes());
        m.poke(table_a, &pte::encode(table_b, pte::V).to_le_bytes());
        m.poke(table_b, &pte::encode(0xA000_1000, pte::V | pte::R).to_le_bytes());
        assert_eq!(
            walk_and_copy(&mut m, &alloc, ROOT).unwrap_err(),
            Error::MalformedTable { reason: "leaf target misaligned for its page size" }
        );

        // Pointer at the leaf level.
        let mut m = machine();
        let t2 = ROOT + ROOT_TABLE_BYTES;
        let t1 = t2 + 4096;
        let t0 = t1 + 4096;
        m.poke(ROOT, &pte::encode(t2, pte::V).to_le_bytes());
        m.poke(t2, &pte::encode(t1, pte::V).to_le_bytes());
        m.poke(t1, &pte::encode(t0, pte::V).to_le_bytes());
        m.poke(t0, &pte::encode(0xA000_0000, pte::V).to_le_bytes());
        assert_eq!(
            walk_and_copy(&mut m, &alloc, ROOT).unwrap_err(),
            Error::MalformedTable { reason: "table pointer at leaf level" }
        );
    }

    #[test]
    fn zero_pages_become_lazy_and_materialize_once() {
        let mut m = machine();
        let alloc = allocator();
        // Map a page whose source is all-zero.
        GuestTableBuilder::new()
            .map(0x0, 0xA000_0000, PageSize::Size4KiB, pte::R | pte::W)
            .write(&mut m, ROOT);
        let mut out = walk_and_copy(&mut m, &alloc, ROOT).unwrap();
        assert!(out.data_tokens.is_empty());
        assert!(out.measured.is_empty());
        assert_eq!(out.tables.translate(0x42).unwrap(), Translation::LazyZero);

        let free_before = alloc.free_bytes();
        let (addr, fresh) = materialize_zero_page(&mut out.tables, &alloc, 0x42).unwrap();
        assert!(fresh.is_some());
        assert!(m.range_is_zero(addr & !0xfff, 4096));
        // Second touch: same address, no new token.
        let (again, none) = materialize_zero_page(&mut out.tables, &alloc, 0x42).unwrap();
        assert_eq!(again, addr);
        assert!(none.is_none());
        assert_eq!(free_before - alloc.free_bytes(), 4096);
    }

    #[test]
    fn huge_leaf_copies_through_and_measures_per_page() {
        let mut m = machine();
        let alloc = allocator();
        // 2 MiB leaf with two non-zero 4 KiB pages in it.
        m.poke(0xA020_0000, &[1u8; 4096]);
        m.poke(0xA020_3000, &[2u8; 4096]);
        GuestTableBuilder::new()
            .map(0x20_0000, 0xA020_0000, PageSize::Size2MiB, pte::R | pte::X)
            .write(&mut m, ROOT);

        let out = walk_and_copy(&mut m, &alloc, ROOT).unwrap();
        assert_eq!(out.data_tokens.len(), 1);
        assert_eq!(out.data_tokens[0].size(), PageSize::Size2MiB);
        assert_eq!(out.measured.len(), 2);
        assert_eq!(out.measured[0].gpn, 0x20_0000 >> 12);
        assert_eq!(out.measured[1].gpn, (0x20_3000u64) >> 12);
        // Interior pages of the leaf translate too.
        assert!(matches!(
            out.tables.translate(0x20_1000).unwrap(),
            Translation::Confidential(_)
        ));
    }

    #[test]
    fn measured_pages_ascend_by_guest_address() {
        let mut m = machine();
        let alloc = allocator();
        for i in 0..3u64 {
            m.poke(0xA000_0000 + i * 4096, &[i as u8 + 1; 4096]);
        }
        GuestTableBuilder::new()
            .map(0x40_0000, 0xA000_0000, PageSize::Size4KiB, pte::R)
            .map(0x1000, 0xA000_1000, PageSize::Size4KiB, pte::R)
            .map(0x8000_0000, 0xA000_2000, PageSize::Size4KiB, pte::R)
            .write(&mut m, ROOT);
        let out = walk_and_copy(&mut m, &alloc, ROOT).unwrap();
        let gpns: Vec<u64> = out.measured.iter().map(|p| p.gpn).collect();
        assert_eq!(gpns, vec![0x1, 0x400, 0x80000]);
    }

    #[test]
    fn walk_never_reads_confidential_memory() {
        let mut m = machine();
        let alloc = allocator();
        m.poke(0xA000_0000, &[9u8; 4096]);
        GuestTableBuilder::new()
            .map(0x0, 0xA000_0000, PageSize::Size4KiB, pte::R)
            .map(0x20_0000, 0xA020_0000, PageSize::Size2MiB, pte::R)
            .write(&mut m, ROOT);
        m.take_access_log();
        walk_and_copy(&mut m, &alloc, ROOT).unwrap();
        let nc = m.layout().non_confidential;
        for rec in m.access_log() {
            if rec.kind == crate::machine::AccessKind::Read {
                assert!(
                    nc.contains_range(rec.addr, rec.len),
                    "walk read outside non-confidential memory at {:#x}",
                    rec.addr
                );
            }
        }
    }

    #[test]
    fn out_of_memory_mid_walk_releases_everything() {
        let mut m = machine();
        // Room for 6 tokens only; the walk needs 8.
        let alloc = PageAllocator::init(AddrInterval::new(0xC000_0000, 6 * 4096), PageSize::Size1GiB);
        m.poke(0xA000_0000, &[1u8; 4096]);
        GuestTableBuilder::new()
            .map(0x0, 0xA000_0000, PageSize::Size4KiB, pte::R)
            .write(&mut m, ROOT);
        let report_before = alloc.report();
        assert_eq!(walk_and_copy(&mut m, &alloc, ROOT).unwrap_err(), Error::OutOfMemory);
        assert_eq!(alloc.report(), report_before);
        assert_eq!(alloc.free_bytes(), 6 * 4096);
    }

    #[test]
    fn empty_table_walks_to_an_empty_map() {
        let mut m = machine();
        let alloc = allocator();
        // All-zero root: no mappings, but structure is still copied.
        let out = walk_and_copy(&mut m, &alloc, ROOT).unwrap();
        assert_eq!(out.tables.table_token_count(), 4);
        assert!(out.data_tokens.is_empty());
        assert!(matches!(out.tables.translate(0), Err(Error::GuestFault { .. })));
    }

    #[test]
    fn shared_pages_translate_to_non_confidential_targets() {
        let mut tables = TvmPageTables::synthetic(&[(0x1000, LeafState::LazyZero)]);
        assert!(tables.set_shared(0x2000, 0x9500_0000));
        // Occupied slots refuse sharing.
        assert!(!tables.set_shared(0x1000, 0x9500_0000));
        assert_eq!(tables.translate(0x2084).unwrap(), Translation::Shared(0x9500_0084));
        assert_eq!(tables.translate(0x3000).unwrap_err(), Error::GuestFault { gpa: 0x3000 });
        assert_eq!(tables.shared_page_bases().collect::<Vec<_>>(), vec![0x9500_0000]);
    }

    #[test]
    fn access_domain_sanity_for_copied_pages() {
        let mut m = machine();
        let alloc = allocator();
        m.poke(0xA000_0000, &[3u8; 4096]);
        GuestTableBuilder::new()
            .map(0x0, 0xA000_0000, PageSize::Size4KiB, pte::R | pte::W)
            .write(&mut m, ROOT);
        let out = walk_and_copy(&mut m, &alloc, ROOT).unwrap();
        let conf = match out.tables.translate(0).unwrap() {
            Translation::Confidential(a) => a,
            _ => unreachable!(),
        };
        // The hypervisor cannot read the copy.
        let mut buf = [0u8; 16];
        assert!(m.read(AccessDomain::Hypervisor, conf, &mut buf).is_err());
    }
}
