// SPDX-License-Identifier: Apache-2.0

//! Confidential-VM descriptors and the single-call promotion path.
//!
//! Promotion takes a prepared, ordinary VM and converts it into a
//! confidential VM in one call with four arguments: the address of a
//! 304-byte canonical boot processor state, the address of the guest's
//! second-stage page table root (16 KiB aligned), and the addresses of two
//! length-prefixed blobs — the device-tree blob and the sealed attestation
//! payload. Everything is validated and copied into confidential memory
//! before the confidential VM exists; on any failure every acquired page
//! token is released, so a failed promotion leaves no trace in the
//! allocator.
//!
//! Blobs are framed in hypervisor memory as a 4-byte big-endian length
//! followed by the payload. The device tree here is a model: the magic
//! `MFDT`, a big-endian virtual-hart count (1..=64), then free-form
//! payload; the whole blob is measured and copied into confidential
//! memory. The sealed attestation payload is opened with the security
//! manager's own keystore and its reference measurements are compared
//! against the freshly computed ones before the VM may exist: on mismatch
//! promotion aborts, so an image that does not match its sealed
//! expectations never runs and never holds a secret.

use std::collections::BTreeSet;

use crate::abi::SbiError;
use crate::allocator::{PageAllocator, PageToken};
use crate::attestation::{self, Measurements, SecretEntry};
use crate::gstage::{self, LeafState, Translation, TvmPageTables};
use crate::hart::{Csr, DomainTag, HartArchState, CANONICAL_STATE_BYTES};
use crate::kem::KemSecretKey;
use crate::machine::{Machine, PageSize, TvmId, PAGE_BYTES};

pub const FDT_MAGIC: &[u8; 4] = b"MFDT";
pub const MAX_VHARTS: u64 = 64;
/// Device-tree blobs are capped at 2 MiB.
pub const MAX_FDT_BYTES: u64 = 2 * 1024 * 1024;
/// Sealed attestation payloads are capped at 1 MiB.
pub const MAX_TAP_BYTES: u64 = 1024 * 1024;

/// Byte offset of a control register inside the canonical state.
pub fn csr_offset(csr: Csr) -> u64 {
    (32 + csr.index() as u64) * 8
}

/// Virtual-hart lifecycle. Transition rules live in the lifecycle module;
/// this is the state each virtual hart carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsmState {
    Stopped,
    StartPending { pc: u64, opaque: u64 },
    Started,
    Suspended,
}

impl HsmState {
    pub fn name(&self) -> &'static str {
        match self {
            HsmState::Stopped => "stopped",
            HsmState::StartPending { .. } => "start-pending",
            HsmState::Started => "started",
            HsmState::Suspended => "suspended",
        }
    }
}

/// Per-virtual-hart control state. Register state lives in the hart's
/// confidential save area, not here; this is scheduling metadata.
#[derive(Debug, Clone)]
pub struct VhartControl {
    pub hsm: HsmState,
    /// Confidential page base of this hart's 4 KiB save area.
    pub save_area: u64,
    /// A one-shot timer is armed (its comparand is the save-area CSR).
    pub timer_armed: bool,
    /// The only timer datum the hypervisor ever sees: the deadline this
    /// hart last programmed, reclassified at program time. Firing or
    /// disarming never updates it — that would be a covert channel.
    pub disclosed_timer: u64,
    /// Identifier of the injected-and-pending external interrupt, if any.
    pub pending_ext_irq: Option<u64>,
    /// A remote fence is pending application at next execution entry.
    pub pending_fence: Option<&'static str>,
    /// Return value staged for delivery when this hart next executes: the
    /// guest made a call whose answer arrives after the switch back in,
    /// written into its a0/a1 as (error, value).
    pub staged_ret: Option<(i64, u64)>,
}

impl VhartControl {
    fn new(hsm: HsmState, save_area: u64) -> VhartControl {
        VhartControl {
            hsm,
            save_area,
            timer_armed: false,
            disclosed_timer: 0,
            pending_ext_irq: None,
            pending_fence: None,
            staged_ret: None,
        }
    }
}

/// Whole-VM lifecycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TvmLifecycle {
    Ready,
    /// Killed by resource exhaustion; only destruction remains.
    Poisoned,
}

#[derive(Debug)]
pub struct TvmDescriptor {
    pub id: TvmId,
    pub lifecycle: TvmLifecycle,
    pub tables: TvmPageTables,
    /// Every token the VM owns besides its page-table structure: copied
    /// data pages, the device-tree copy, lazily materialized pages, and
    /// save areas.
    pub owned_tokens: Vec<PageToken>,
    pub vharts: Vec<VhartControl>,
    /// Virtual harts currently executing on some physical hart.
    pub running: BTreeSet<usize>,
    /// External interrupt numbers the hypervisor may inject.
    pub allowed_irqs: BTreeSet<u64>,
    pub measurements: Measurements,
    /// Secrets released by the attestation check at promotion.
    pub secrets: Vec<SecretEntry>,
}

impl TvmDescriptor {
    /// Decode a virtual hart's register state from its save area.
    pub fn load_vhart_state(&self, machine: &mut Machine, vhart: usize) -> HartArchState {
        let src = machine
            .validate_confidential(self.vharts[vhart].save_area, CANONICAL_STATE_BYTES as u64)
            .expect("save areas are confidential");
        let mut bytes = [0u8; CANONICAL_STATE_BYTES];
        machine.read_confidential(&src, 0, &mut bytes);
        HartArchState::decode_canonical(&bytes, DomainTag::Tvm { tvm: self.id, vhart })
            .expect("save areas always hold canonical state")
    }

    /// Encode a virtual hart's register state into its save area.
    pub fn store_vhart_state(&self, machine: &mut Machine, vhart: usize, state: &HartArchState) {
        let dst = machine
            .validate_confidential(self.vharts[vhart].save_area, CANONICAL_STATE_BYTES as u64)
            .expect("save areas are confidential");
        machine.write_confidential(&dst, 0, &state.encode_canonical());
    }

    /// Read one control register straight from a save area.
    pub fn vhart_csr(&self, machine: &mut Machine, vhart: usize, csr: Csr) -> u64 {
        let src = machine
            .validate_confidential(self.vharts[vhart].save_area, CANONICAL_STATE_BYTES as u64)
            .expect("save areas are confidential");
        let mut bytes = [0u8; 8];
        machine.read_confidential(&src, csr_offset(csr), &mut bytes);
        u64::from_be_bytes(bytes)
    }

    /// Write one control register straight into a save area.
    pub fn set_vhart_csr(&self, machine: &mut Machine, vhart: usize, csr: Csr, value: u64) {
        let dst = machine
            .validate_confidential(self.vharts[vhart].save_area, CANONICAL_STATE_BYTES as u64)
            .expect("save areas are confidential");
        machine.write_confidential(&dst, csr_offset(csr), &value.to_be_bytes());
    }

    /// Zero a stopped hart's save area so nothing survives into a future
    /// start.
    pub fn scrub_vhart(&self, machine: &mut Machine, vhart: usize) {
        machine.zero_fill(self.vharts[vhart].save_area, PAGE_BYTES);
    }

    /// A descriptor with no memory behind it, for lifecycle model checks.
    /// The given guest pages translate; nothing else exists.
    #[doc(hidden)]
    pub fn synthetic(id: TvmId, vharts: usize, leaves: &[(u64, LeafState)]) -> TvmDescriptor {
        TvmDescriptor {
            id,
            lifecycle: TvmLifecycle::Ready,
            tables: TvmPageTables::synthetic(leaves),
            owned_tokens: Vec::new(),
            vharts: (0..vharts)
                .map(|_| VhartControl::new(HsmState::Stopped, 0))
                .collect(),
            running: BTreeSet::new(),
            allowed_irqs: BTreeSet::new(),
            measurements: Measurements {
                code_data: [0; 48],
                fdt: [0; 48],
                boot_state: [0; 48],
            },
            secrets: Vec::new(),
        }
    }
}

/// The four promotion arguments, as passed in `a0..a3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromoteArgs {
    pub boot_state_addr: u64,
    pub root_addr: u64,
    pub fdt_addr: u64,
    pub tap_addr: u64,
}

/// Facts about a successful promotion, for tracing and reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromoteInfo {
    pub measured_pages: usize,
    pub data_tokens: usize,
    pub table_tokens: usize,
    pub fdt_tokens: usize,
    pub vhart_count: u64,
    pub secrets: usize,
}

/// Read a `u32` big-endian length-prefixed blob from hypervisor memory.
fn read_blob(machine: &mut Machine, addr: u64, cap: u64) -> Result<Vec<u8>, SbiError> {
    let hdr = machine
        .validate_non_confidential(addr, 4)
        .map_err(|_| SbiError::InvalidAddress)?;
    let mut len_bytes = [0u8; 4];
    machine.read_non_confidential(&hdr, 0, &mut len_bytes);
    let len = u64::from(u32::from_be_bytes(len_bytes));
    if len == 0 || len > cap {
        return Err(SbiError::InvalidParam);
    }
    let body = machine
        .validate_non_confidential(addr + 4, len)
        .map_err(|_| SbiError::InvalidAddress)?;
    let mut blob = vec![0u8; len as usize];
    machine.read_non_confidential(&body, 0, &mut blob);
    Ok(blob)
}

/// Validate the model device-tree blob; returns the virtual-hart count.
pub fn parse_fdt(blob: &[u8]) -> Result<u64, SbiError> {
    if blob.len() < 8 || &blob[..4] != FDT_MAGIC {
        return Err(SbiError::InvalidParam);
    }
    let count = u64::from(u32::from_be_bytes(blob[4..8].try_into().unwrap()));
    if count == 0 || count > MAX_VHARTS {
        return Err(SbiError::InvalidParam);
    }
    Ok(count)
}

/// Promote a prepared VM into confidential VM `id` in one call.
/// All-or-nothing: on error the allocator is exactly as before.
///
/// Pipeline order is part of the contract: validate the four addresses,
/// copy-and-validate the guest table, copy the device tree, build save
/// areas, measure, then open the sealed payload and compare measurements.
/// A mismatch aborts promotion — an unattested image never runs.
pub fn promote(
    machine: &mut Machine,
    alloc: &PageAllocator,
    keystore: &[KemSecretKey],
    id: TvmId,
    args: &PromoteArgs,
) -> Result<(TvmDescriptor, PromoteInfo), SbiError> {
    // 1. Validate all hypervisor-memory inputs: boot processor state
    //    (fixed-size canonical blob), device-tree blob (shape and
    //    virtual-hart count), sealed payload (address range only — it is
    //    opened after measurement).
    let boot_src = machine
        .validate_non_confidential(args.boot_state_addr, CANONICAL_STATE_BYTES as u64)
        .map_err(|_| SbiError::InvalidAddress)?;
    let mut boot_bytes = [0u8; CANONICAL_STATE_BYTES];
    machine.read_non_confidential(&boot_src, 0, &mut boot_bytes);
    let boot_state = HartArchState::decode_canonical(&boot_bytes, DomainTag::Tvm { tvm: id, vhart: 0 })
        .ok_or(SbiError::InvalidParam)?;
    let fdt_blob = read_blob(machine, args.fdt_addr, MAX_FDT_BYTES)?;
    let vhart_count = parse_fdt(&fdt_blob)?;
    let tap_blob = read_blob(machine, args.tap_addr, MAX_TAP_BYTES)?;

    // 2. Validate and copy the guest page table and every mapped page.
    let walk = gstage::walk_and_copy(machine, alloc, args.root_addr).map_err(|e| match e {
        gstage::Error::InvalidAddress { .. } => SbiError::InvalidAddress,
        gstage::Error::MalformedTable { .. } => SbiError::MalformedTable,
        gstage::Error::OutOfMemory => SbiError::OutOfMemory,
        gstage::Error::GuestFault { .. } => SbiError::Failed,
    })?;
    let table_tokens = walk.tables.table_token_count();
    let tables = walk.tables;
    let mut owned_tokens = walk.data_tokens;
    let measured_pages = walk.measured.len();

    // Everything acquired from here on joins `owned_tokens`; this single
    // release path makes promotion all-or-nothing.
    let release_all = |tables: TvmPageTables, owned: Vec<PageToken>, machine: &mut Machine| {
        for token in tables.into_tokens().into_iter().chain(owned) {
            alloc.deallocate(token, machine).expect("promotion tokens are genuine");
        }
    };

    // 3. Copy the device tree into confidential pages the VM owns.
    let fdt_tokens = fdt_blob.len().div_ceil(PAGE_BYTES as usize);
    for chunk_idx in 0..fdt_tokens {
        let token = match alloc.allocate(PageSize::Size4KiB) {
            Ok(t) => t,
            Err(_) => {
                release_all(tables, owned_tokens, machine);
                return Err(SbiError::OutOfMemory);
            }
        };
        let start = chunk_idx * PAGE_BYTES as usize;
        let chunk = &fdt_blob[start..fdt_blob.len().min(start + PAGE_BYTES as usize)];
        let dst = machine
            .validate_confidential(token.address(), chunk.len() as u64)
            .expect("fresh tokens are confidential");
        machine.write_confidential(&dst, 0, chunk);
        let mut token = token;
        token.set_carrying();
        owned_tokens.push(token);
    }

    // 4. One save area per virtual hart. A fresh token is zeroed, which is
    //    exactly the canonical encoding of a scrubbed hart, so only the
    //    boot hart's area needs writing.
    let mut save_areas = Vec::with_capacity(vhart_count as usize);
    for _ in 0..vhart_count {
        match alloc.allocate(PageSize::Size4KiB) {
            Ok(token) => save_areas.push(token),
            Err(_) => {
                owned_tokens.extend(save_areas);
                release_all(tables, owned_tokens, machine);
                return Err(SbiError::OutOfMemory);
            }
        }
    }

    // 5. Measurements over the walker's normalized page list, the whole
    //    device-tree blob, and the re-encoded boot state.
    let canonical_boot = boot_state.encode_canonical();
    let measurements = Measurements::compute(&walk.measured, &fdt_blob, &canonical_boot);

    // 6. Open the sealed payload and verify the attestation: all three
    //    measurement registers must equal the sealed references, or the
    //    VM is not allowed to exist and everything is released.
    let tap = match attestation::unseal(&tap_blob, keystore) {
        Ok(tap) => tap,
        Err(e) => {
            owned_tokens.extend(save_areas);
            release_all(tables, owned_tokens, machine);
            return Err(match e {
                attestation::TapError::Parse(_) => SbiError::TapParse,
                attestation::TapError::NoMatchingLockbox => SbiError::NoMatchingLockbox,
                attestation::TapError::AuthFailure => SbiError::AuthFailure,
            });
        }
    };
    if tap.measurements != measurements {
        owned_tokens.extend(save_areas);
        release_all(tables, owned_tokens, machine);
        return Err(SbiError::AttestationFailed);
    }

    // 7. Assemble: boot hart started with the provided state, the rest
    //    stopped; register the guest-visible pages for access checks.
    let vharts: Vec<VhartControl> = save_areas
        .iter()
        .enumerate()
        .map(|(i, token)| {
            let hsm = if i == 0 { HsmState::Started } else { HsmState::Stopped };
            VhartControl::new(hsm, token.address())
        })
        .collect();
    let boot_area = machine
        .validate_confidential(vharts[0].save_area, CANONICAL_STATE_BYTES as u64)
        .expect("save areas are confidential");
    machine.write_confidential(&boot_area, 0, &canonical_boot);
    for mut token in save_areas {
        token.set_carrying();
        owned_tokens.push(token);
    }

    let pages: BTreeSet<u64> = tables.mapped_page_bases().collect();
    machine.set_tvm_access(id, pages);

    let info = PromoteInfo {
        measured_pages,
        data_tokens: owned_tokens.len() - vhart_count as usize - fdt_tokens,
        table_tokens,
        fdt_tokens,
        vhart_count,
        secrets: tap.secrets.len(),
    };
    let descriptor = TvmDescriptor {
        id,
        lifecycle: TvmLifecycle::Ready,
        tables,
        owned_tokens,
        vharts,
        running: BTreeSet::new(),
        allowed_irqs: BTreeSet::new(),
        measurements,
        secrets: tap.secrets,
    };
    Ok((descriptor, info))
}

/// Tear a confidential VM down: every owned token is released (and thereby
/// zeroized) and its access rules are dropped. The caller has already
/// checked that no virtual hart is running.
pub fn destroy(machine: &mut Machine, alloc: &PageAllocator, desc: TvmDescriptor) -> usize {
    debug_assert!(desc.running.is_empty(), "caller checks business before destroy");
    let id = desc.id;
    let mut released = 0usize;
    for token in desc.tables.into_tokens().into_iter().chain(desc.owned_tokens) {
        alloc.deallocate(token, machine).expect("descriptor tokens are genuine");
        released += 1;
    }
    machine.clear_tvm_access(id);
    released
}

/// Add a shared non-confidential page to the guest's address space.
pub fn share_page(
    machine: &mut Machine,
    desc: &mut TvmDescriptor,
    gpa: u64,
    npa: u64,
) -> Result<(), SbiError> {
    if gpa % PAGE_BYTES != 0 || npa % PAGE_BYTES != 0 {
        return Err(SbiError::InvalidParam);
    }
    machine
        .validate_non_confidential(npa, PAGE_BYTES)
        .map_err(|_| SbiError::InvalidAddress)?;
    if !desc.tables.set_shared(gpa, npa) {
        return Err(SbiError::AlreadyMapped);
    }
    machine.grant_tvm_page(desc.id, npa);
    Ok(())
}

/// Permit the hypervisor to inject external interrupt `irq`.
pub fn allow_interrupt(desc: &mut TvmDescriptor, irq: u64) -> Result<(), SbiError> {
    if irq >= 64 {
        return Err(SbiError::InvalidParam);
    }
    desc.allowed_irqs.insert(irq);
    Ok(())
}

/// Copy secret `index` into guest confidential memory at `dest_gpa`.
/// The secrets were released to this VM by the attestation check at
/// promotion; retrieval only locates and copies. Returns the length.
pub fn retrieve_secret(
    machine: &mut Machine,
    alloc: &PageAllocator,
    desc: &mut TvmDescriptor,
    index: u64,
    dest_gpa: u64,
    max_len: u64,
) -> Result<u64, SbiError> {
    let secret = desc
        .secrets
        .iter()
        .find(|s| s.index == index)
        .ok_or(SbiError::NoSuchSecret)?;
    let len = secret.value.len() as u64;
    if len > max_len {
        return Err(SbiError::InvalidParam);
    }
    let value = secret.value.clone();

    // Walk the destination page by page. Secrets land only in
    // confidential memory: a shared page would leak the secret.
    let mut off = 0u64;
    while off < len {
        let gpa = dest_gpa + off;
        let page_rest = PAGE_BYTES - (gpa % PAGE_BYTES);
        let chunk = page_rest.min(len - off);
        let target = match desc.tables.translate(gpa) {
            Ok(Translation::Confidential(addr)) => addr,
            Ok(Translation::LazyZero) => {
                let (addr, fresh) = gstage::materialize_zero_page(&mut desc.tables, alloc, gpa)
                    .map_err(|_| SbiError::OutOfMemory)?;
                if let Some(token) = fresh {
                    machine.grant_tvm_page(desc.id, token.address());
                    desc.owned_tokens.push(token);
                }
                addr + (gpa % PAGE_BYTES)
            }
            Ok(Translation::Shared(_)) => return Err(SbiError::Denied),
            Err(_) => return Err(SbiError::InvalidAddress),
        };
        let dst = machine
            .validate_confidential(target, chunk)
            .map_err(|_| SbiError::InvalidAddress)?;
        machine.write_confidential(&dst, 0, &value[off as usize..(off + chunk) as usize]);
        off += chunk;
    }
    Ok(len)
}
