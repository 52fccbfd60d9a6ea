// SPDX-License-Identifier: Apache-2.0

//! Physical machine model: statically partitioned memory, typed addresses,
//! and PMP-style access control.
//!
//! Main memory is split once, at construction time, into two contiguous
//! half-open intervals: non-confidential memory (hypervisor-owned) and
//! confidential memory (security-manager-owned). The split never moves for
//! the lifetime of the machine. Every byte of configured memory belongs to
//! exactly one interval; addresses outside configured memory belong to
//! neither.
//!
//! Access control is evaluated on every access against per-domain rules,
//! the software analogue of physical-memory-protection checks performed by
//! hardware on each bus transaction:
//!
//! * the security manager may access everything,
//! * the hypervisor may access non-confidential memory only,
//! * a TVM may access exactly the confidential pages it owns plus the
//!   non-confidential pages it has explicitly shared.
//!
//! Memory contents live in a sparse page-keyed store so that multi-gigabyte
//! machines cost only what is actually written. Absent pages read as zero,
//! which also gives "freed memory reads as zero" a cheap representation:
//! zero-filling a range simply drops its pages.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::hart::HartArchState;

/// Identifier of a promoted TVM. Assigned sequentially starting at 1.
pub type TvmId = u64;

/// Smallest page, and the granularity of the sparse store.
pub const PAGE_BYTES: u64 = 4096;

/// Architectural page sizes. Each level is 512 times larger than the
/// previous one, mirroring a 4-level, 512-ary radix page-table geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PageSize {
    Size4KiB,
    Size2MiB,
    Size1GiB,
    Size512GiB,
}

impl PageSize {
    /// All sizes, smallest first. Index order matches `index()`.
    pub const ALL: [PageSize; 4] = [
        PageSize::Size4KiB,
        PageSize::Size2MiB,
        PageSize::Size1GiB,
        PageSize::Size512GiB,
    ];

    pub const fn in_bytes(self) -> u64 {
        match self {
            PageSize::Size4KiB => 4096,
            PageSize::Size2MiB => 4096 * 512,
            PageSize::Size1GiB => 4096 * 512 * 512,
            PageSize::Size512GiB => 4096 * 512 * 512 * 512,
        }
    }

    /// Position in the size hierarchy: 0 for 4 KiB up to 3 for 512 GiB.
    pub const fn index(self) -> usize {
        match self {
            PageSize::Size4KiB => 0,
            PageSize::Size2MiB => 1,
            PageSize::Size1GiB => 2,
            PageSize::Size512GiB => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<PageSize> {
        PageSize::ALL.get(i).copied()
    }

    pub fn larger(self) -> Option<PageSize> {
        PageSize::from_index(self.index() + 1)
    }

    pub fn smaller(self) -> Option<PageSize> {
        self.index().checked_sub(1).and_then(PageSize::from_index)
    }

    pub fn is_aligned(self, addr: u64) -> bool {
        addr % self.in_bytes() == 0
    }

    /// Largest size, no bigger than `cap`, whose footprint fits in `len`.
    /// Used both for size-class selection and for the natural-alignment
    /// rule on confidential regions.
    pub fn largest_fitting(len: u64, cap: PageSize) -> Option<PageSize> {
        PageSize::ALL
            .iter()
            .rev()
            .copied()
            .find(|s| s.index() <= cap.index() && s.in_bytes() <= len)
    }
}

impl std::fmt::Display for PageSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PageSize::Size4KiB => write!(f, "4KiB"),
            PageSize::Size2MiB => write!(f, "2MiB"),
            PageSize::Size1GiB => write!(f, "1GiB"),
            PageSize::Size512GiB => write!(f, "512GiB"),
        }
    }
}

/// Half-open address interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddrInterval {
    pub start: u64,
    pub end: u64,
}

impl AddrInterval {
    pub fn new(start: u64, len: u64) -> AddrInterval {
        AddrInterval { start, end: start + len }
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.start && addr < self.end
    }

    /// Whole-range containment; `len == 0` only tests the start address.
    pub fn contains_range(&self, addr: u64, len: u64) -> bool {
        let end = match addr.checked_add(len) {
            Some(e) => e,
            None => return false,
        };
        self.contains(addr) && end <= self.end
    }

    pub fn overlaps(&self, other: &AddrInterval) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Machine shape, fixed at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineConfig {
    pub memory_base: u64,
    pub memory_size: u64,
    pub confidential_base: u64,
    pub confidential_size: u64,
    pub hart_count: usize,
}

/// The static two-way partition plus the per-domain access rules derived
/// from it. The split is immutable; the only mutable rule state is the set
/// of pages each live TVM may touch, updated when TVMs gain or lose pages.
#[derive(Debug)]
pub struct MemoryLayout {
    pub memory: AddrInterval,
    pub non_confidential: AddrInterval,
    pub confidential: AddrInterval,
}

/// Proof-carrying address: a range that was validated to lie entirely in
/// non-confidential memory. Only `Machine::validate_non_confidential`
/// constructs one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonConfidentialAddress {
    addr: u64,
    len: u64,
}

impl NonConfidentialAddress {
    pub fn address(&self) -> u64 {
        self.addr
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Proof-carrying address for a range entirely in confidential memory.
/// Only `Machine::validate_confidential` constructs one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfidentialAddress {
    addr: u64,
    len: u64,
}

impl ConfidentialAddress {
    pub fn address(&self) -> u64 {
        self.addr
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Who is performing an access. The security manager itself is a domain so
/// its internal copies show up in the access log for audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessDomain {
    Hypervisor,
    Tsm,
    Tvm(TvmId),
}

impl std::fmt::Display for AccessDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AccessDomain::Hypervisor => write!(f, "hypervisor"),
            AccessDomain::Tsm => write!(f, "tsm"),
            AccessDomain::Tvm(id) => write!(f, "tvm{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

/// One entry of the machine's access log: every domain-checked access is
/// recorded, allowed or not, so tests can audit exactly who touched what.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessRecord {
    pub domain: AccessDomain,
    pub kind: AccessKind,
    pub addr: u64,
    pub len: u64,
    pub allowed: bool,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum Error {
    #[error("invalid machine configuration: {0}")]
    Config(&'static str),
    #[error("invalid address: {addr:#x}+{len:#x} not inside {expected}")]
    InvalidAddress {
        addr: u64,
        len: u64,
        expected: &'static str,
    },
    #[error("access fault: {domain} {kind:?} at {addr:#x}+{len:#x}")]
    AccessFault {
        domain: AccessDomain,
        kind: AccessKind,
        addr: u64,
        len: u64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Sparse byte store keyed by 4 KiB page base. Absent pages read as zero.
#[derive(Debug, Default)]
struct SparseMemory {
    pages: HashMap<u64, Box<[u8; PAGE_BYTES as usize]>>,
}

impl SparseMemory {
    fn read_into(&self, addr: u64, buf: &mut [u8]) {
        let mut cursor = addr;
        let mut off = 0usize;
        while off < buf.len() {
            let page = cursor & !(PAGE_BYTES - 1);
            let in_page = (cursor - page) as usize;
            let take = ((PAGE_BYTES as usize) - in_page).min(buf.len() - off);
            match self.pages.get(&page) {
                Some(bytes) => buf[off..off + take].copy_from_slice(&bytes[in_page..in_page + take]),
                None => buf[off..off + take].fill(0),
            }
            cursor += take as u64;
            off += take;
        }
    }

    fn write(&mut self, addr: u64, data: &[u8]) {
        let mut cursor = addr;
        let mut off = 0usize;
        while off < data.len() {
            let page = cursor & !(PAGE_BYTES - 1);
            let in_page = (cursor - page) as usize;
            let take = ((PAGE_BYTES as usize) - in_page).min(data.len() - off);
            let bytes = self
                .pages
                .entry(page)
                .or_insert_with(|| Box::new([0u8; PAGE_BYTES as usize]));
            bytes[in_page..in_page + take].copy_from_slice(&data[off..off + take]);
            cursor += take as u64;
            off += take;
        }
    }

    /// Zero a range. Fully covered pages are dropped from the store (zero
    /// is the default); partially covered pages are zeroed in place.
    fn zero_range(&mut self, addr: u64, len: u64) {
        let end = addr + len;
        let mut cursor = addr;
        while cursor < end {
            let page = cursor & !(PAGE_BYTES - 1);
            let in_page = cursor - page;
            let take = (PAGE_BYTES - in_page).min(end - cursor);
            if in_page == 0 && take == PAGE_BYTES {
                self.pages.remove(&page);
            } else if let Some(bytes) = self.pages.get_mut(&page) {
                bytes[in_page as usize..(in_page + take) as usize].fill(0);
            }
            cursor += take;
        }
    }

    /// True when every byte of the range reads as zero. Costs only the
    /// pages actually present in the store.
    fn range_is_zero(&self, addr: u64, len: u64) -> bool {
        let end = addr + len;
        let mut cursor = addr;
        while cursor < end {
            let page = cursor & !(PAGE_BYTES - 1);
            let in_page = cursor - page;
            let take = (PAGE_BYTES - in_page).min(end - cursor);
            if let Some(bytes) = self.pages.get(&page) {
                if bytes[in_page as usize..(in_page + take) as usize]
                    .iter()
                    .any(|&b| b != 0)
                {
                    return false;
                }
            }
            cursor += take;
        }
        true
    }
}

/// The machine: configuration, partition, byte store, per-hart register
/// files, the mutable per-TVM access rules, and the access log.
///
/// The machine makes no internal concurrency guarantees; all mutation is
/// meant to be serialized by its single logical owner (the security
/// manager's event loop). It is `Send`, so an owner may hand it between
/// threads wholesale.
#[derive(Debug)]
pub struct Machine {
    config: MachineConfig,
    layout: MemoryLayout,
    mem: SparseMemory,
    harts: Vec<HartArchState>,
    /// Pages each live TVM may access: owned confidential pages plus
    /// explicitly shared non-confidential pages, by 4 KiB page base.
    tvm_access: BTreeMap<TvmId, BTreeSet<u64>>,
    access_log: Vec<AccessRecord>,
}

impl Machine {
    /// Validate a configuration and construct the machine.
    ///
    /// Alignment rule: the confidential base and size must be multiples of
    /// the region's natural page size — the largest architectural page size
    /// that is no bigger than the region itself (capped at 1 GiB; 512 GiB
    /// pages are representable but not enabled by default). A 1 GiB region
    /// must therefore be 1 GiB-aligned, while an 8 MiB test region only
    /// needs 2 MiB alignment.
    ///
    /// The confidential region must sit at one end of configured memory so
    /// that the non-confidential remainder is itself a single contiguous
    /// interval.
    pub fn build(config: MachineConfig) -> Result<Machine> {
        if config.hart_count == 0 {
            return Err(Error::Config("hart_count must be at least 1"));
        }
        if config.memory_size == 0 {
            return Err(Error::Config("memory_size must be nonzero"));
        }
        if config.confidential_size == 0 {
            return Err(Error::Config("confidential_size must be nonzero"));
        }
        if !PageSize::Size4KiB.is_aligned(config.memory_base)
            || !PageSize::Size4KiB.is_aligned(config.memory_size)
        {
            return Err(Error::Config("memory interval must be 4 KiB aligned"));
        }
        if config.memory_base.checked_add(config.memory_size).is_none() {
            return Err(Error::Config("memory interval wraps the address space"));
        }
        let memory = AddrInterval::new(config.memory_base, config.memory_size);

        let natural = PageSize::largest_fitting(config.confidential_size, PageSize::Size1GiB)
            .ok_or(Error::Config("confidential region smaller than one page"))?;
        if !natural.is_aligned(config.confidential_base) {
            return Err(Error::Config(
                "confidential_base not aligned to the region's natural page size",
            ));
        }
        if !natural.is_aligned(config.confidential_size) {
            return Err(Error::Config(
                "confidential_size not aligned to the region's natural page size",
            ));
        }
        if config
            .confidential_base
            .checked_add(config.confidential_size)
            .is_none()
        {
            return Err(Error::Config("confidential interval wraps the address space"));
        }
        let confidential = AddrInterval::new(config.confidential_base, config.confidential_size);
        if !memory.contains_range(confidential.start, confidential.len()) {
            return Err(Error::Config("confidential interval exceeds configured memory"));
        }
        // The complement must be one interval: confidential memory is a
        // prefix or a suffix of configured memory, never an interior hole.
        let non_confidential = if confidential.start == memory.start {
            AddrInterval { start: confidential.end, end: memory.end }
        } else if confidential.end == memory.end {
            AddrInterval { start: memory.start, end: confidential.start }
        } else {
            return Err(Error::Config(
                "confidential interval must touch one end of configured memory",
            ));
        };

        let harts = (0..config.hart_count).map(|_| HartArchState::new()).collect();
        Ok(Machine {
            config,
            layout: MemoryLayout { memory, non_confidential, confidential },
            mem: SparseMemory::default(),
            harts,
            tvm_access: BTreeMap::new(),
            access_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn layout(&self) -> &MemoryLayout {
        &self.layout
    }

    pub fn hart_count(&self) -> usize {
        self.harts.len()
    }

    pub fn hart(&self, hart: usize) -> &HartArchState {
        &self.harts[hart]
    }

    pub fn hart_mut(&mut self, hart: usize) -> &mut HartArchState {
        &mut self.harts[hart]
    }

    /// Prove that `[addr, addr+len)` lies entirely in non-confidential
    /// memory. Zero-length ranges are rejected; a caller holding a typed
    /// address always holds at least one byte.
    pub fn validate_non_confidential(&self, addr: u64, len: u64) -> Result<NonConfidentialAddress> {
        if len > 0 && self.layout.non_confidential.contains_range(addr, len) {
            Ok(NonConfidentialAddress { addr, len })
        } else {
            Err(Error::InvalidAddress { addr, len, expected: "non-confidential memory" })
        }
    }

    /// Prove that `[addr, addr+len)` lies entirely in confidential memory.
    pub fn validate_confidential(&self, addr: u64, len: u64) -> Result<ConfidentialAddress> {
        if len > 0 && self.layout.confidential.contains_range(addr, len) {
            Ok(ConfidentialAddress { addr, len })
        } else {
            Err(Error::InvalidAddress { addr, len, expected: "confidential memory" })
        }
    }

    /// Rule table, evaluated on every access:
    /// the security manager everywhere; the hypervisor inside the
    /// non-confidential interval; a TVM inside its registered page set.
    fn check_rules(&self, domain: AccessDomain, addr: u64, len: u64) -> bool {
        match domain {
            AccessDomain::Tsm => true,
            AccessDomain::Hypervisor => self.layout.non_confidential.contains_range(addr, len),
            AccessDomain::Tvm(id) => match self.tvm_access.get(&id) {
                Some(pages) => {
                    if len == 0 {
                        return false;
                    }
                    let first = addr & !(PAGE_BYTES - 1);
                    let last = (addr + len - 1) & !(PAGE_BYTES - 1);
                    (first..=last)
                        .step_by(PAGE_BYTES as usize)
                        .all(|p| pages.contains(&p))
                }
                None => false,
            },
        }
    }

    fn log(&mut self, domain: AccessDomain, kind: AccessKind, addr: u64, len: u64, allowed: bool) {
        self.access_log.push(AccessRecord { domain, kind, addr, len, allowed });
    }

    /// Domain-checked read. A denied access models a protection trap: it
    /// transfers no bytes, is recorded in the log, and returns AccessFault.
    pub fn read(&mut self, domain: AccessDomain, addr: u64, buf: &mut [u8]) -> Result<()> {
        let allowed = self.check_rules(domain, addr, buf.len() as u64);
        self.log(domain, AccessKind::Read, addr, buf.len() as u64, allowed);
        if !allowed {
            return Err(Error::AccessFault { domain, kind: AccessKind::Read, addr, len: buf.len() as u64 });
        }
        self.mem.read_into(addr, buf);
        Ok(())
    }

    /// Domain-checked write; see `read`.
    pub fn write(&mut self, domain: AccessDomain, addr: u64, data: &[u8]) -> Result<()> {
        let allowed = self.check_rules(domain, addr, data.len() as u64);
        self.log(domain, AccessKind::Write, addr, data.len() as u64, allowed);
        if !allowed {
            return Err(Error::AccessFault { domain, kind: AccessKind::Write, addr, len: data.len() as u64 });
        }
        self.mem.write(addr, data);
        Ok(())
    }

    /// Security-manager read through a proven non-confidential range.
    /// `offset`/`buf` must stay inside the validated range.
    pub fn read_non_confidential(&mut self, src: &NonConfidentialAddress, offset: u64, buf: &mut [u8]) {
        assert!(offset + buf.len() as u64 <= src.len, "read outside validated range");
        self.log(AccessDomain::Tsm, AccessKind::Read, src.addr + offset, buf.len() as u64, true);
        self.mem.read_into(src.addr + offset, buf);
    }

    /// Security-manager write through a proven confidential range.
    pub fn write_confidential(&mut self, dst: &ConfidentialAddress, offset: u64, data: &[u8]) {
        assert!(offset + data.len() as u64 <= dst.len, "write outside validated range");
        self.log(AccessDomain::Tsm, AccessKind::Write, dst.addr + offset, data.len() as u64, true);
        self.mem.write(dst.addr + offset, data);
    }

    /// Security-manager read through a proven confidential range.
    pub fn read_confidential(&mut self, src: &ConfidentialAddress, offset: u64, buf: &mut [u8]) {
        assert!(offset + buf.len() as u64 <= src.len, "read outside validated range");
        self.log(AccessDomain::Tsm, AccessKind::Read, src.addr + offset, buf.len() as u64, true);
        self.mem.read_into(src.addr + offset, buf);
    }

    /// Zeroize a range. Not an access-checked operation: only the security
    /// manager's own page lifecycle (token release, scrubbing) calls it.
    pub fn zero_fill(&mut self, addr: u64, len: u64) {
        self.mem.zero_range(addr, len);
    }

    /// True when the range reads as all-zero.
    pub fn range_is_zero(&self, addr: u64, len: u64) -> bool {
        self.mem.range_is_zero(addr, len)
    }

    /// Unchecked debug read, for oracles and scenario loaders that need to
    /// look at raw memory without perturbing the access log.
    pub fn peek(&self, addr: u64, buf: &mut [u8]) {
        self.mem.read_into(addr, buf);
    }

    /// Unchecked write for scenario loaders modelling pre-boot memory
    /// contents (the hypervisor placing a VM image). Bypasses the log.
    pub fn poke(&mut self, addr: u64, data: &[u8]) {
        self.mem.write(addr, data);
    }

    /// Replace the set of pages a TVM may access (4 KiB page bases).
    /// Called when a TVM is created or destroyed — the "re-pointing" of
    /// access rules at a security-domain boundary.
    pub fn set_tvm_access(&mut self, tvm: TvmId, pages: BTreeSet<u64>) {
        self.tvm_access.insert(tvm, pages);
    }

    /// Extend a TVM's accessible page set (page materialization, sharing).
    pub fn grant_tvm_page(&mut self, tvm: TvmId, page_base: u64) {
        self.tvm_access.entry(tvm).or_default().insert(page_base);
    }

    pub fn clear_tvm_access(&mut self, tvm: TvmId) {
        self.tvm_access.remove(&tvm);
    }

    /// Access log since construction or the last `take_access_log`.
    pub fn access_log(&self) -> &[AccessRecord] {
        &self.access_log
    }

    pub fn take_access_log(&mut self) -> Vec<AccessRecord> {
        std::mem::take(&mut self.access_log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_config() -> MachineConfig {
        MachineConfig {
            memory_base: 0x8000_0000,
            memory_size: 2 << 30,
            confidential_base: 0xC000_0000,
            confidential_size: 1 << 30,
            hart_count: 2,
        }
    }

    #[test]
    fn builds_reference_configuration() {
        let m = Machine::build(default_config()).unwrap();
        assert_eq!(m.layout().non_confidential, AddrInterval { start: 0x8000_0000, end: 0xC000_0000 });
        assert_eq!(m.layout().confidential, AddrInterval { start: 0xC000_0000, end: 0x1_0000_0000 });
        assert_eq!(m.hart_count(), 2);
    }

    #[test]
    fn rejects_misaligned_confidential_size() {
        let cfg = MachineConfig { confidential_size: (1 << 30) + 4096, ..default_config() };
        assert!(matches!(Machine::build(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_confidential_interval_past_memory_top() {
        let cfg = MachineConfig { confidential_base: 0x1_0000_0000, ..default_config() };
        assert!(matches!(Machine::build(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_interior_confidential_island() {
        // 1 GiB-aligned and inside memory, but leaves non-confidential
        // memory split in two.
        let cfg = MachineConfig {
            memory_base: 0x4000_0000,
            memory_size: 3 << 30,
            confidential_base: 0x8000_0000,
            confidential_size: 1 << 30,
            hart_count: 1,
        };
        assert!(matches!(Machine::build(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn accepts_small_test_region_with_natural_alignment() {
        // 8 MiB region: natural alignment is 2 MiB, not 1 GiB.
        let cfg = MachineConfig {
            memory_base: 0x8000_0000,
            memory_size: 64 << 20,
            confidential_base: 0x8000_0000 + (56 << 20),
            confidential_size: 8 << 20,
            hart_count: 1,
        };
        assert!(Machine::build(cfg).is_ok());
    }

    #[test]
    fn validates_reference_addresses() {
        let m = Machine::build(default_config()).unwrap();
        assert!(m.validate_non_confidential(0x9000_0000, 4096).is_ok());
        // First confidential byte: not a non-confidential range.
        assert!(m.validate_non_confidential(0xC000_0000, 8).is_err());
        // Straddles the partition boundary.
        assert!(m.validate_non_confidential(0xBFFF_F000, 8192).is_err());
        assert!(m.validate_confidential(0xBFFF_F000, 8192).is_err());
        // Above the top of configured memory.
        assert!(m.validate_non_confidential(0xF_FFFF_F000, 4096).is_err());
        assert!(m.validate_confidential(0xC000_0000, 8).is_ok());
    }

    #[test]
    fn partition_is_total_and_disjoint() {
        let m = Machine::build(default_config()).unwrap();
        let layout = m.layout();
        // Intervals are page-aligned, so page granularity plus the
        // boundary bytes is exhaustive for membership.
        let mut addr = layout.memory.start;
        while addr < layout.memory.end {
            let in_nc = layout.non_confidential.contains(addr);
            let in_c = layout.confidential.contains(addr);
            assert!(in_nc ^ in_c, "address {addr:#x} must be in exactly one interval");
            addr += PAGE_BYTES;
        }
        for boundary in [
            layout.memory.start,
            layout.memory.end - 1,
            layout.confidential.start,
            layout.confidential.start - 1,
        ] {
            let in_nc = layout.non_confidential.contains(boundary);
            let in_c = layout.confidential.contains(boundary);
            assert!(in_nc ^ in_c);
        }
        assert!(!layout.non_confidential.contains(layout.memory.end));
        assert!(!layout.confidential.contains(layout.memory.end));
    }

    #[test]
    fn hypervisor_cannot_touch_confidential_memory() {
        let mut m = Machine::build(default_config()).unwrap();
        let err = m.write(AccessDomain::Hypervisor, 0xC000_0000, &[1, 2, 3]).unwrap_err();
        assert!(matches!(err, Error::AccessFault { domain: AccessDomain::Hypervisor, .. }));
        // The attempt is on the record.
        let last = *m.access_log().last().unwrap();
        assert!(!last.allowed);
        // And no bytes moved.
        assert!(m.range_is_zero(0xC000_0000, 4096));
    }

    #[test]
    fn tsm_reads_and_writes_everywhere() {
        let mut m = Machine::build(default_config()).unwrap();
        m.write(AccessDomain::Tsm, 0xC000_0000, &[7u8; 16]).unwrap();
        let mut buf = [0u8; 16];
        m.read(AccessDomain::Tsm, 0xC000_0000, &mut buf).unwrap();
        assert_eq!(buf, [7u8; 16]);
        m.write(AccessDomain::Tsm, 0x9000_0000, &[9u8; 8]).unwrap();
    }

    #[test]
    fn tvm_rules_track_registered_pages() {
        let mut m = Machine::build(default_config()).unwrap();
        let mut pages = BTreeSet::new();
        pages.insert(0xC000_0000);
        m.set_tvm_access(1, pages);
        m.write(AccessDomain::Tvm(1), 0xC000_0010, &[1u8; 4]).unwrap();
        // Next page over is not granted.
        assert!(m.write(AccessDomain::Tvm(1), 0xC000_1000, &[1u8; 4]).is_err());
        // Unknown TVM has no rules at all.
        assert!(m.read(AccessDomain::Tvm(2), 0xC000_0000, &mut [0u8; 4]).is_err());
        m.clear_tvm_access(1);
        assert!(m.write(AccessDomain::Tvm(1), 0xC000_0010, &[1u8; 4]).is_err());
    }

    #[test]
    fn sparse_store_round_trips_across_page_boundaries() {
        let mut m = Machine::build(default_config()).unwrap();
        let data: Vec<u8> = (0..8192u32).map(|i| (i % 251) as u8).collect();
        m.write(AccessDomain::Tsm, 0x9000_0800, &data).unwrap();
        let mut buf = vec![0u8; data.len()];
        m.read(AccessDomain::Tsm, 0x9000_0800, &mut buf).unwrap();
        assert_eq!(buf, data);
        // Zero-fill drops the middle page; the rest is intact.
        m.zero_fill(0x9000_1000, 4096);
        let mut mid = [0u8; 4096];
        m.peek(0x9000_1000, &mut mid);
        assert!(mid.iter().all(|&b| b == 0));
        assert!(!m.range_is_zero(0x9000_0800, data.len() as u64));
    }
}
