// SPDX-License-Identifier: Apache-2.0

//! Per-hart architectural state and its canonical byte encoding.
//!
//! The same encoding serves three purposes, so they can never drift apart:
//!
//! * save/restore through confidential save-state areas,
//! * the boot-hart-state blob the hypervisor hands to `promote`,
//! * the input of the boot-hart measurement register.
//!
//! Layout (304 bytes, all fields 8-byte big-endian):
//!
//! | offset | field                                  |
//! |--------|----------------------------------------|
//! | 0      | x0..x31 general-purpose registers      |
//! | 256    | CSRs in canonical order (see [`Csr`])  |

use crate::machine::TvmId;

/// Security domain a hart is executing in, as seen by the register file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DomainTag {
    Hypervisor,
    Tvm { tvm: TvmId, vhart: usize },
}

/// Control and status registers carried by the model. The variant order is
/// the canonical encoding and measurement order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Csr {
    /// Program-counter surrogate.
    Pc,
    /// Trap cause of the most recent trap taken by this hart.
    Cause,
    /// Trap value (faulting address or instruction) of that trap.
    Tval,
    /// Timer comparand for the hart-local timer.
    TimerCmp,
    /// Pending-interrupt bits (see the `IP_*` masks).
    Ip,
    /// Enabled-interrupt bits, same bit layout as `Ip`.
    Ie,
}

impl Csr {
    /// Canonical order: encoding, save areas, and measurement all use it.
    pub const CANONICAL: [Csr; 6] = [Csr::Pc, Csr::Cause, Csr::Tval, Csr::TimerCmp, Csr::Ip, Csr::Ie];

    pub const fn index(self) -> usize {
        match self {
            Csr::Pc => 0,
            Csr::Cause => 1,
            Csr::Tval => 2,
            Csr::TimerCmp => 3,
            Csr::Ip => 4,
            Csr::Ie => 5,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Csr::Pc => "pc",
            Csr::Cause => "cause",
            Csr::Tval => "tval",
            Csr::TimerCmp => "timer_cmp",
            Csr::Ip => "ip",
            Csr::Ie => "ie",
        }
    }

    pub fn from_name(name: &str) -> Option<Csr> {
        Csr::CANONICAL.iter().copied().find(|c| c.name() == name)
    }
}

/// Software-interrupt pending/enable bit.
pub const IP_SOFT: u64 = 1 << 1;
/// Timer-interrupt pending/enable bit.
pub const IP_TIMER: u64 = 1 << 5;
/// External-interrupt pending/enable bit.
pub const IP_EXTERNAL: u64 = 1 << 9;

/// Conventional argument-register indices (x10..x17).
pub const A0: usize = 10;
pub const A1: usize = 11;
pub const A2: usize = 12;
pub const A3: usize = 13;
pub const A4: usize = 14;
pub const A5: usize = 15;
pub const A6: usize = 16;
pub const A7: usize = 17;

/// Size of the canonical encoding: 32 GPRs + 6 CSRs, 8 bytes each.
pub const CANONICAL_STATE_BYTES: usize = (32 + 6) * 8;

/// Architectural register state of one hart (physical or virtual).
///
/// `x0` is hardwired to zero: reads yield 0 and writes are dropped, so a
/// state decoded from untrusted bytes cannot smuggle a nonzero x0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HartArchState {
    gprs: [u64; 32],
    csrs: [u64; 6],
    domain: DomainTag,
}

impl HartArchState {
    /// Fresh state: all registers zero, hypervisor domain.
    pub fn new() -> HartArchState {
        HartArchState { gprs: [0; 32], csrs: [0; 6], domain: DomainTag::Hypervisor }
    }

    pub fn gpr(&self, index: usize) -> u64 {
        if index == 0 {
            0
        } else {
            self.gprs[index]
        }
    }

    pub fn set_gpr(&mut self, index: usize, value: u64) {
        if index != 0 {
            self.gprs[index] = value;
        }
    }

    pub fn csr(&self, csr: Csr) -> u64 {
        self.csrs[csr.index()]
    }

    pub fn set_csr(&mut self, csr: Csr, value: u64) {
        self.csrs[csr.index()] = value;
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn set_domain(&mut self, domain: DomainTag) {
        self.domain = domain;
    }

    /// Zero every register; the domain tag is unaffected. Used when a
    /// vhart is powered off so no residue survives into a future start.
    pub fn scrub(&mut self) {
        self.gprs = [0; 32];
        self.csrs = [0; 6];
    }

    /// Canonical encoding; see the module doc for the layout.
    pub fn encode_canonical(&self) -> [u8; CANONICAL_STATE_BYTES] {
        let mut out = [0u8; CANONICAL_STATE_BYTES];
        for (i, g) in self.gprs.iter().enumerate() {
            let v = if i == 0 { 0 } else { *g };
            out[i * 8..i * 8 + 8].copy_from_slice(&v.to_be_bytes());
        }
        for (i, c) in Csr::CANONICAL.iter().enumerate() {
            let off = (32 + i) * 8;
            out[off..off + 8].copy_from_slice(&self.csrs[c.index()].to_be_bytes());
        }
        out
    }

    /// Decode a canonical blob. Fails if the length is wrong or the x0
    /// slot carries a nonzero value (the blob is hypervisor-supplied, so
    /// its shape is validated, not trusted). The decoded state carries the
    /// given domain tag.
    pub fn decode_canonical(bytes: &[u8], domain: DomainTag) -> Option<HartArchState> {
        if bytes.len() != CANONICAL_STATE_BYTES {
            return None;
        }
        let word = |i: usize| u64::from_be_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        if word(0) != 0 {
            return None;
        }
        let mut state = HartArchState::new();
        for i in 1..32 {
            state.gprs[i] = word(i);
        }
        for (i, c) in Csr::CANONICAL.iter().enumerate() {
            state.csrs[c.index()] = word(32 + i);
        }
        state.domain = domain;
        Some(state)
    }
}

impl Default for HartArchState {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainTag::Hypervisor => write!(f, "hypervisor"),
            DomainTag::Tvm { tvm, vhart } => write!(f, "tvm{tvm}.v{vhart}"),
        }
    }
}
