// SPDX-License-Identifier: Apache-2.0

//! The binary call interface between domains.
//!
//! Calls follow the supervisor binary-interface register convention:
//! extension id in `a7`, function id in `a6`, up to six arguments in
//! `a0..a5`; on return `a0` carries a signed error code (zero on success)
//! and `a1` a value. The same convention is used by the hypervisor calling
//! down and by guests calling out of their virtual machines — which side
//! may make which call is enforced by the dispatcher, and a call from the
//! wrong side fails with [`SbiError::FlowViolation`].
//!
//! When a `run` call returns to the hypervisor, the return registers are
//! reclassified as an exit report: `a0` zero, `a1` the exit reason code,
//! `a2..a5` reason payload, and `a6` the nearest armed guest timer (zero
//! when none) so the hypervisor can schedule a timely re-entry without
//! seeing any other guest state.

use crate::hart::{HartArchState, A0, A1, A2, A6, A7};

/// Confidential-VM management extension ("TVS1").
pub const EXT_TVM: u64 = 0x5456_5331;
/// Hart state management extension.
pub const EXT_HSM: u64 = 0x48_534D;
/// Inter-processor interrupt extension.
pub const EXT_IPI: u64 = 0x73_5049;
/// Remote fence extension.
pub const EXT_RFENCE: u64 = 0x5246_4E43;
/// Timer extension.
pub const EXT_TIME: u64 = 0x5449_4D45;

/// Function ids on [`EXT_TVM`].
pub mod tvm_fid {
    /// Hypervisor: promote a prepared VM to a confidential VM.
    pub const PROMOTE: u64 = 0;
    /// Hypervisor: run one virtual hart until it exits.
    pub const RUN: u64 = 1;
    /// Hypervisor: destroy a confidential VM and reclaim its memory.
    pub const DESTROY: u64 = 2;
    /// Hypervisor: add a shared non-confidential page to a guest space.
    pub const SHARE_PAGE: u64 = 3;
    /// Guest: copy a sealed secret into guest-owned confidential memory.
    pub const RETRIEVE_SECRET: u64 = 4;
    /// Hypervisor: allow an external interrupt number to be injected.
    pub const ALLOW_INTERRUPT: u64 = 5;
}

/// Function ids on [`EXT_HSM`].
pub mod hsm_fid {
    pub const HART_START: u64 = 0;
    pub const HART_STOP: u64 = 1;
    pub const HART_SUSPEND: u64 = 3;
}

/// Function ids on [`EXT_IPI`].
pub mod ipi_fid {
    pub const SEND_IPI: u64 = 0;
}

/// Function ids on [`EXT_RFENCE`].
pub mod rfence_fid {
    pub const FENCE_I: u64 = 0;
    pub const SFENCE_VMA: u64 = 1;
}

/// Function ids on [`EXT_TIME`].
pub mod time_fid {
    pub const SET_TIMER: u64 = 0;
}

/// Signed error codes returned in `a0`. Zero is success. Codes `-1..-6`
/// follow the common binary-interface convention; `-16` and below are
/// specific to confidential-VM management.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SbiError {
    Failed,
    NotSupported,
    InvalidParam,
    Denied,
    InvalidAddress,
    AlreadyAvailable,
    MalformedTable,
    OutOfMemory,
    TapParse,
    NoMatchingLockbox,
    AuthFailure,
    AttestationFailed,
    NoSuchTvm,
    HartNotStarted,
    TvmBusy,
    AlreadyMapped,
    NoSuchSecret,
    InvalidState,
    FlowViolation,
}

impl SbiError {
    pub const ALL: [SbiError; 19] = [
        SbiError::Failed,
        SbiError::NotSupported,
        SbiError::InvalidParam,
        SbiError::Denied,
        SbiError::InvalidAddress,
        SbiError::AlreadyAvailable,
        SbiError::MalformedTable,
        SbiError::OutOfMemory,
        SbiError::TapParse,
        SbiError::NoMatchingLockbox,
        SbiError::AuthFailure,
        SbiError::AttestationFailed,
        SbiError::NoSuchTvm,
        SbiError::HartNotStarted,
        SbiError::TvmBusy,
        SbiError::AlreadyMapped,
        SbiError::NoSuchSecret,
        SbiError::InvalidState,
        SbiError::FlowViolation,
    ];

    pub fn code(self) -> i64 {
        match self {
            SbiError::Failed => -1,
            SbiError::NotSupported => -2,
            SbiError::InvalidParam => -3,
            SbiError::Denied => -4,
            SbiError::InvalidAddress => -5,
            SbiError::AlreadyAvailable => -6,
            SbiError::MalformedTable => -16,
            SbiError::OutOfMemory => -17,
            SbiError::TapParse => -18,
            SbiError::NoMatchingLockbox => -19,
            SbiError::AuthFailure => -20,
            SbiError::AttestationFailed => -21,
            SbiError::NoSuchTvm => -22,
            SbiError::HartNotStarted => -23,
            SbiError::TvmBusy => -24,
            SbiError::AlreadyMapped => -25,
            SbiError::NoSuchSecret => -26,
            SbiError::InvalidState => -27,
            SbiError::FlowViolation => -28,
        }
    }

    pub fn from_code(code: i64) -> Option<SbiError> {
        SbiError::ALL.iter().copied().find(|e| e.code() == code)
    }

    /// Stable name used by scenario files and trace lines.
    pub fn name(self) -> &'static str {
        match self {
            SbiError::Failed => "Failed",
            SbiError::NotSupported => "NotSupported",
            SbiError::InvalidParam => "InvalidParam",
            SbiError::Denied => "Denied",
            SbiError::InvalidAddress => "InvalidAddress",
            SbiError::AlreadyAvailable => "AlreadyAvailable",
            SbiError::MalformedTable => "MalformedTable",
            SbiError::OutOfMemory => "OutOfMemory",
            SbiError::TapParse => "TapParse",
            SbiError::NoMatchingLockbox => "NoMatchingLockbox",
            SbiError::AuthFailure => "AuthFailure",
            SbiError::AttestationFailed => "AttestationFailed",
            SbiError::NoSuchTvm => "NoSuchTvm",
            SbiError::HartNotStarted => "HartNotStarted",
            SbiError::TvmBusy => "TvmBusy",
            SbiError::AlreadyMapped => "AlreadyMapped",
            SbiError::NoSuchSecret => "NoSuchSecret",
            SbiError::InvalidState => "InvalidState",
            SbiError::FlowViolation => "FlowViolation",
        }
    }

    pub fn from_name(name: &str) -> Option<SbiError> {
        SbiError::ALL.iter().copied().find(|e| e.name() == name)
    }
}

impl std::fmt::Display for SbiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.name(), self.code())
    }
}

/// A decoded call: extension, function, arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SbiCall {
    pub ext: u64,
    pub fid: u64,
    pub args: [u64; 6],
}

impl SbiCall {
    pub fn new(ext: u64, fid: u64, args: &[u64]) -> SbiCall {
        assert!(args.len() <= 6);
        let mut a = [0u64; 6];
        a[..args.len()].copy_from_slice(args);
        SbiCall { ext, fid, args: a }
    }

    /// Stage this call in a hart's argument registers.
    pub fn store(&self, hart: &mut HartArchState) {
        hart.set_gpr(A7, self.ext);
        hart.set_gpr(A6, self.fid);
        for (i, &arg) in self.args.iter().enumerate() {
            hart.set_gpr(A0 + i, arg);
        }
    }

    /// Read a staged call back out of the argument registers.
    pub fn load(hart: &HartArchState) -> SbiCall {
        let mut args = [0u64; 6];
        for (i, slot) in args.iter_mut().enumerate() {
            *slot = hart.gpr(A0 + i);
        }
        SbiCall { ext: hart.gpr(A7), fid: hart.gpr(A6), args }
    }
}

/// A call result: error code in `a0`, value in `a1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SbiRet {
    pub error: i64,
    pub value: u64,
}

impl SbiRet {
    pub fn ok(value: u64) -> SbiRet {
        SbiRet { error: 0, value }
    }

    pub fn err(e: SbiError) -> SbiRet {
        SbiRet { error: e.code(), value: 0 }
    }

    pub fn is_ok(&self) -> bool {
        self.error == 0
    }

    pub fn store(&self, hart: &mut HartArchState) {
        hart.set_gpr(A0, self.error as u64);
        hart.set_gpr(A1, self.value);
    }

    pub fn load(hart: &HartArchState) -> SbiRet {
        SbiRet { error: hart.gpr(A0) as i64, value: hart.gpr(A1) }
    }
}

impl From<SbiError> for SbiRet {
    fn from(e: SbiError) -> SbiRet {
        SbiRet::err(e)
    }
}

/// Why a `run` call came back to the hypervisor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitReason {
    /// The guest made a call this interface does not own; it is forwarded
    /// with its extension, function, and first two arguments.
    GuestEcall { ext: u64, fid: u64, arg0: u64, arg1: u64 },
    /// The guest touched an unmapped guest-physical address.
    GuestPageFault { gpa: u64 },
    /// The guest asked for another virtual hart to be started.
    VhartStartRequested { vhart: u64 },
    /// The running virtual hart stopped itself.
    VhartStopped { vhart: u64 },
    /// The running virtual hart suspended itself.
    Suspended { vhart: u64 },
    /// An allowed external interrupt was delivered and the guest yielded.
    ExternalInterrupt { irq: u64 },
    /// The confidential VM was killed (resource exhaustion); it can only
    /// be destroyed now.
    TvmKilled,
    /// The virtual hart has nothing further to execute.
    Idle,
}

impl ExitReason {
    pub fn code(&self) -> u64 {
        match self {
            ExitReason::GuestEcall { .. } => 1,
            ExitReason::GuestPageFault { .. } => 2,
            ExitReason::VhartStartRequested { .. } => 3,
            ExitReason::VhartStopped { .. } => 4,
            ExitReason::Suspended { .. } => 5,
            ExitReason::ExternalInterrupt { .. } => 6,
            ExitReason::TvmKilled => 7,
            ExitReason::Idle => 8,
        }
    }

    /// Stable name used by scenario files and trace lines.
    pub fn name(&self) -> &'static str {
        match self {
            ExitReason::GuestEcall { .. } => "guest-ecall",
            ExitReason::GuestPageFault { .. } => "guest-page-fault",
            ExitReason::VhartStartRequested { .. } => "vhart-start-requested",
            ExitReason::VhartStopped { .. } => "vhart-stopped",
            ExitReason::Suspended { .. } => "suspended",
            ExitReason::ExternalInterrupt { .. } => "external-interrupt",
            ExitReason::TvmKilled => "tvm-killed",
            ExitReason::Idle => "idle",
        }
    }

    pub fn payload(&self) -> [u64; 4] {
        match *self {
            ExitReason::GuestEcall { ext, fid, arg0, arg1 } => [ext, fid, arg0, arg1],
            ExitReason::GuestPageFault { gpa } => [gpa, 0, 0, 0],
            ExitReason::VhartStartRequested { vhart } => [vhart, 0, 0, 0],
            ExitReason::VhartStopped { vhart } => [vhart, 0, 0, 0],
            ExitReason::Suspended { vhart } => [vhart, 0, 0, 0],
            ExitReason::ExternalInterrupt { irq } => [irq, 0, 0, 0],
            ExitReason::TvmKilled => [0, 0, 0, 0],
            ExitReason::Idle => [0, 0, 0, 0],
        }
    }

    /// Write the exit report into the hypervisor's return registers:
    /// `a0`=0, `a1`=reason code, `a2..a5`=payload, `a6`=timer disclosure.
    pub fn store(&self, hart: &mut HartArchState, timer_disclosure: u64) {
        hart.set_gpr(A0, 0);
        hart.set_gpr(A1, self.code());
        for (i, &p) in self.payload().iter().enumerate() {
            hart.set_gpr(A2 + i, p);
        }
        hart.set_gpr(A6, timer_disclosure);
    }

    /// Decode an exit report from the return registers.
    pub fn load(hart: &HartArchState) -> Option<(ExitReason, u64)> {
        if hart.gpr(A0) != 0 {
            return None;
        }
        let p = [hart.gpr(A2), hart.gpr(A2 + 1), hart.gpr(A2 + 2), hart.gpr(A2 + 3)];
        let reason = match hart.gpr(A1) {
            1 => ExitReason::GuestEcall { ext: p[0], fid: p[1], arg0: p[2], arg1: p[3] },
            2 => ExitReason::GuestPageFault { gpa: p[0] },
            3 => ExitReason::VhartStartRequested { vhart: p[0] },
            4 => ExitReason::VhartStopped { vhart: p[0] },
            5 => ExitReason::Suspended { vhart: p[0] },
            6 => ExitReason::ExternalInterrupt { irq: p[0] },
            7 => ExitReason::TvmKilled,
            8 => ExitReason::Idle,
            _ => return None,
        };
        Some((reason, hart.gpr(A6)))
    }

    pub fn from_name(name: &str) -> Option<u64> {
        Some(match name {
            "guest-ecall" => 1,
            "guest-page-fault" => 2,
            "vhart-start-requested" => 3,
            "vhart-stopped" => 4,
            "suspended" => 5,
            "external-interrupt" => 6,
            "tvm-killed" => 7,
            "idle" => 8,
            _ => return None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_are_stable_and_bijective() {
        assert_eq!(SbiError::Failed.code(), -1);
        assert_eq!(SbiError::NotSupported.code(), -2);
        assert_eq!(SbiError::InvalidParam.code(), -3);
        assert_eq!(SbiError::Denied.code(), -4);
        assert_eq!(SbiError::InvalidAddress.code(), -5);
        assert_eq!(SbiError::AlreadyAvailable.code(), -6);
        assert_eq!(SbiError::MalformedTable.code(), -16);
        assert_eq!(SbiError::FlowViolation.code(), -28);
        for e in SbiError::ALL {
            assert_eq!(SbiError::from_code(e.code()), Some(e));
            assert_eq!(SbiError::from_name(e.name()), Some(e));
        }
        assert_eq!(SbiError::from_code(0), None);
        assert_eq!(SbiError::from_code(-7), None);
    }

    #[test]
    fn calls_and_returns_round_trip_through_registers() {
        let mut hart = HartArchState::new();
        let call = SbiCall::new(EXT_TVM, tvm_fid::RUN, &[1, 0, 9]);
        call.store(&mut hart);
        assert_eq!(SbiCall::load(&hart), call);
        assert_eq!(hart.gpr(A7), EXT_TVM);

        SbiRet::ok(42).store(&mut hart);
        assert_eq!(SbiRet::load(&hart), SbiRet { error: 0, value: 42 });
        SbiRet::err(SbiError::TvmBusy).store(&mut hart);
        assert_eq!(SbiRet::load(&hart).error, -24);
    }

    #[test]
    fn exit_reports_round_trip_with_timer_disclosure() {
        let mut hart = HartArchState::new();
        let cases = [
            ExitReason::GuestEcall { ext: 0x10, fid: 3, arg0: 7, arg1: 8 },
            ExitReason::GuestPageFault { gpa: 0x8000_0000 },
            ExitReason::VhartStartRequested { vhart: 1 },
            ExitReason::VhartStopped { vhart: 0 },
            ExitReason::Suspended { vhart: 1 },
            ExitReason::ExternalInterrupt { irq: 9 },
            ExitReason::TvmKilled,
            ExitReason::Idle,
        ];
        for reason in cases {
            reason.store(&mut hart, 12345);
            assert_eq!(ExitReason::load(&hart), Some((reason, 12345)));
            assert_eq!(ExitReason::from_name(reason.name()), Some(reason.code()));
        }
        // A nonzero a0 is a plain error return, not an exit report.
        SbiRet::err(SbiError::NoSuchTvm).store(&mut hart);
        assert_eq!(ExitReason::load(&hart), None);
    }
}
