// SPDX-License-Identifier: Apache-2.0

//! The line-oriented scenario format: a versioned, diff-friendly text file
//! that declares a machine, raw memory contents, named VM images, and an
//! ordered script of calls, guest events, and expectations.
//!
//! # Format
//!
//! The first non-blank line must be the version header `tsm-scenario v1`.
//! `#` starts a comment; blank lines are ignored. Four section kinds:
//!
//! ```text
//! [machine]            # key = value: memory_base, memory_size,
//!                      # confidential_base, confidential_size, harts
//! [memory]             # <addr> : <hex bytes> — staged before the run
//! [image NAME]         # a promotable VM image, see below
//! [script]             # ordered directives, see below
//! ```
//!
//! An `[image]` section accepts:
//!
//! ```text
//! page gpa=0x0 fill=5a perms=rwx      # frame filled with one byte
//! page gpa=0x1000 data=deadbeef perms=rw
//! page gpa=0x2000 lazy perms=rw      # all-zero frame (lazily mapped)
//! page gpa=0x0 fill=5a perms=rwx npa=0xc0000000   # explicit frame target
//! boot pc=0x0 ie=soft,timer,external  # boot hart register state
//! fdt vharts=2 extra=6d6f64656c
//! secret index=7 value=726f74617465
//! tap mode=auto                       # auto | flip-bit | wrong-key | mismatch
//! ```
//!
//! Script directives:
//!
//! ```text
//! hart 0 promote boot                 # lifecycle sugar
//! hart 0 run 1 0 [inject=9]
//! hart 0 destroy 1
//! hart 0 call 0x54565331 3 0x4000     # raw call: ext fid args...
//! guest 1.0 read 0x10                 # queue actions for tvm 1, vhart 0
//! guest 1.0 write 0x20 0xfeed
//! guest 1.0 share 0x4000 0xa1000000   # call sugar; also: retrieve, allow,
//! guest 1.0 start 1 0x0 0x77          #   stop, suspend, ipi, fence, timer,
//! guest 1.0 irq 33                    #   park, ecall <ext> <fid> <args...>
//! advance_clock 6000
//! poke 0xa1000000 c0ffee00            # hypervisor-domain write, checked
//! report free as baseline
//! expect result == 1                  # binds to the last call/poke
//! expect error == FlowViolation
//! expect free == baseline
//! expect trace has "ev=enter tvm=1 vhart=0"
//! expect trace lacks "stray="
//! ```
//!
//! Every `expect` must follow the directive it checks: result/error
//! expectations bind to the most recent `hart` call or `poke`, free
//! expectations to a named `report free`, and trace expectations may
//! follow any action directive (they are evaluated against the final
//! trace). An `expect` with nothing to bind to is a parse error.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::abi::{hsm_fid, ipi_fid, rfence_fid, time_fid, tvm_fid, SbiCall, SbiError, EXT_HSM, EXT_IPI, EXT_RFENCE, EXT_TIME, EXT_TVM};
use crate::attestation::{seal, Measurements, SecretEntry, TapPayload};
use crate::fixtures;
use crate::gstage::{pte, GuestTableBuilder, MeasuredPage, ROOT_TABLE_BYTES};
use crate::hart::{Csr, HartArchState, IP_EXTERNAL, IP_SOFT, IP_TIMER};
use crate::kem::KemAlgorithm;
use crate::machine::{MachineConfig, PageSize, TvmId, PAGE_BYTES};
use crate::tsm::{GuestAction, Tsm};
use crate::tvm::{PromoteArgs, FDT_MAGIC};

pub const SCENARIO_HEADER: &str = "tsm-scenario v1";

/// Where image staging begins inside non-confidential memory, relative to
/// the machine's memory base, and how much room each image block gets.
const STAGING_OFFSET: u64 = 0x1000_0000;
const IMAGE_STRIDE: u64 = 0x0200_0000;
const BOOT_STATE_OFFSET: u64 = 0x8_0000;
const FDT_OFFSET: u64 = 0x8_1000;
const TAP_OFFSET: u64 = 0x8_2000;
const FRAMES_OFFSET: u64 = 0x10_0000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseError {}

/// A parsed, validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub machine: MachineConfig,
    pub memory_image: Vec<(u64, Vec<u8>)>,
    pub images: BTreeMap<String, ImageSpec>,
    pub script: Vec<Directive>,
}

#[derive(Debug, Clone)]
pub struct ImageSpec {
    pub pages: Vec<PageSpec>,
    pub boot_pc: u64,
    pub boot_ie: u64,
    pub fdt_vharts: u32,
    pub fdt_extra: Vec<u8>,
    pub secrets: Vec<SecretEntry>,
    pub tap: TapMode,
}

#[derive(Debug, Clone)]
pub struct PageSpec {
    pub gpa: u64,
    pub content: PageContent,
    pub perms: u64,
    /// Point the table entry somewhere other than the staged frame
    /// (adversarial images).
    pub npa_override: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PageContent {
    Fill(u8),
    Data(Vec<u8>),
    Lazy,
}

/// How the sealed attestation payload is produced for an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TapMode {
    /// Seal the loader-computed measurements to the fixture recipient.
    Auto,
    /// Seal correctly, then flip one bit of the sealed bytes in transit.
    FlipBit { byte: usize, bit: u8 },
    /// Rewrite the lockbox algorithm id after sealing: the payload ends
    /// up addressed to a key this manager does not hold.
    WrongKey,
    /// Seal measurements that do not match the staged image.
    Mismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    HypCall { line: usize, hart: usize, call: CallSpec },
    GuestQueue { line: usize, tvm: TvmId, vhart: u64, action: GuestAction },
    AdvanceClock { line: usize, ticks: u64 },
    Poke { line: usize, addr: u64, bytes: Vec<u8> },
    ReportFree { line: usize, name: String },
    Expect { line: usize, check: Check },
}

impl Directive {
    pub fn line(&self) -> usize {
        match self {
            Directive::HypCall { line, .. }
            | Directive::GuestQueue { line, .. }
            | Directive::AdvanceClock { line, .. }
            | Directive::Poke { line, .. }
            | Directive::ReportFree { line, .. }
            | Directive::Expect { line, .. } => *line,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallSpec {
    /// Resolved to a promote call against the named image at load time.
    Promote { image: String },
    Raw(SbiCall),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Check {
    /// The bound call succeeded with this value.
    Result { value: u64 },
    /// The bound call failed with this named error.
    Error { error: SbiError },
    /// The final rendered trace contains the pattern.
    TraceHas { pattern: String },
    /// The final rendered trace does not contain the pattern.
    TraceLacks { pattern: String },
    /// Allocator free bytes equal the named earlier report.
    FreeEquals { name: String },
}

// ---------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------

fn err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError { line, message: message.into() }
}

fn parse_int(line: usize, token: &str) -> Result<u64, ParseError> {
    let parsed = if let Some(hex) = token.strip_prefix("0x").or_else(|| token.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16)
    } else {
        token.replace('_', "").parse::<u64>()
    };
    parsed.map_err(|_| err(line, format!("expected a number, found \"{token}\"")))
}

fn parse_hex_bytes(line: usize, token: &str) -> Result<Vec<u8>, ParseError> {
    let cleaned: String = token.chars().filter(|c| *c != '_').collect();
    if cleaned.len() % 2 != 0 {
        return Err(err(line, format!("hex byte string has odd length: \"{token}\"")));
    }
    (0..cleaned.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&cleaned[i..i + 2], 16)
                .map_err(|_| err(line, format!("invalid hex byte string: \"{token}\"")))
        })
        .collect()
}

/// Split a directive tail into `key=value` pairs.
fn parse_kv<'a>(
    line: usize,
    tokens: &[&'a str],
    context: &str,
) -> Result<BTreeMap<&'a str, &'a str>, ParseError> {
    let mut map = BTreeMap::new();
    for token in tokens {
        let Some((key, value)) = token.split_once('=') else {
            return Err(err(line, format!("expected key=value in {context}, found \"{token}\"")));
        };
        if map.insert(key, value).is_some() {
            return Err(err(line, format!("duplicate key \"{key}\" in {context}")));
        }
    }
    Ok(map)
}

fn parse_perms(line: usize, token: &str) -> Result<u64, ParseError> {
    let mut perms = 0;
    for c in token.chars() {
        perms |= match c {
            'r' => pte::R,
            'w' => pte::W,
            'x' => pte::X,
            other => return Err(err(line, format!("unknown permission flag '{other}'"))),
        };
    }
    Ok(perms)
}

fn parse_ie(line: usize, token: &str) -> Result<u64, ParseError> {
    if token == "none" {
        return Ok(0);
    }
    let mut ie = 0;
    for part in token.split(',') {
        ie |= match part {
            "soft" => IP_SOFT,
            "timer" => IP_TIMER,
            "external" => IP_EXTERNAL,
            other => return Err(err(line, format!("unknown interrupt class \"{other}\""))),
        };
    }
    Ok(ie)
}

#[derive(PartialEq)]
enum Section {
    None,
    Machine,
    Memory,
    Image(String),
    Script,
}

/// What the most recent script directive makes available to `expect`.
#[derive(Clone, Copy, PartialEq)]
enum Bindable {
    Nothing,
    Call,
    Other,
}

/// Parse scenario text. Every violation carries the offending line number.
pub fn parse(text: &str) -> Result<Scenario, ParseError> {
    let mut header_seen = false;
    let mut section = Section::None;
    let mut machine: Option<MachineConfig> = None;
    let mut machine_fields: BTreeMap<String, u64> = BTreeMap::new();
    let mut machine_line = 0;
    let mut memory_image = Vec::new();
    let mut images: BTreeMap<String, ImageSpec> = BTreeMap::new();
    let mut script = Vec::new();
    let mut last_bindable = Bindable::Nothing;
    let mut free_reports: Vec<String> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        if !header_seen {
            if content != SCENARIO_HEADER {
                return Err(err(line, format!(
                    "expected header \"{SCENARIO_HEADER}\", found \"{content}\""
                )));
            }
            header_seen = true;
            continue;
        }

        if let Some(name) = content.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(err(line, "unterminated section header"));
            };
            // Close out a finished [machine] section.
            if section == Section::Machine {
                machine = Some(build_machine_config(machine_line, &machine_fields)?);
            }
            section = match name.trim() {
                "machine" => {
                    machine_line = line;
                    Section::Machine
                }
                "memory" => Section::Memory,
                "script" => Section::Script,
                other => {
                    if let Some(image) = other.strip_prefix("image ") {
                        let image = image.trim();
                        if image.is_empty() {
                            return Err(err(line, "image section needs a name"));
                        }
                        if images.contains_key(image) {
                            return Err(err(line, format!("duplicate image \"{image}\"")));
                        }
                        images.insert(image.to_string(), ImageSpec {
                            pages: Vec::new(),
                            boot_pc: 0,
                            boot_ie: IP_SOFT | IP_TIMER | IP_EXTERNAL,
                            fdt_vharts: 1,
                            fdt_extra: Vec::new(),
                            secrets: Vec::new(),
                            tap: TapMode::Auto,
                        });
                        Section::Image(image.to_string())
                    } else {
                        return Err(err(line, format!("unknown section \"[{other}]\"")));
                    }
                }
            };
            continue;
        }

        match &section {
            Section::None => {
                return Err(err(line, format!("directive outside any section: \"{content}\"")));
            }
            Section::Machine => {
                let Some((key, value)) = content.split_once('=') else {
                    return Err(err(line, format!("expected key = value, found \"{content}\"")));
                };
                let key = key.trim();
                let value = parse_int(line, value.trim())?;
                if !matches!(
                    key,
                    "memory_base" | "memory_size" | "confidential_base" | "confidential_size"
                        | "harts"
                ) {
                    return Err(err(line, format!("unknown machine key \"{key}\"")));
                }
                if machine_fields.insert(key.to_string(), value).is_some() {
                    return Err(err(line, format!("duplicate machine key \"{key}\"")));
                }
            }
            Section::Memory => {
                let Some((addr, bytes)) = content.split_once(':') else {
                    return Err(err(line, format!(
                        "expected <addr> : <hex bytes>, found \"{content}\""
                    )));
                };
                let addr = parse_int(line, addr.trim())?;
                let bytes = parse_hex_bytes(line, bytes.trim())?;
                if bytes.is_empty() {
                    return Err(err(line, "memory line stages no bytes"));
                }
                memory_image.push((addr, bytes));
            }
            Section::Image(name) => {
                let image = images.get_mut(name).expect("created with the section");
                parse_image_line(line, content, image)?;
            }
            Section::Script => {
                let directive = parse_directive(line, content, &images, &free_reports, last_bindable)?;
                match &directive {
                    Directive::HypCall { .. } | Directive::Poke { .. } => {
                        last_bindable = Bindable::Call;
                    }
                    Directive::ReportFree { name, .. } => {
                        free_reports.push(name.clone());
                        last_bindable = Bindable::Other;
                    }
                    Directive::GuestQueue { .. } | Directive::AdvanceClock { .. } => {
                        last_bindable = Bindable::Other;
                    }
                    Directive::Expect { .. } => {}
                }
                script.push(directive);
            }
        }
    }

    if !header_seen {
        return Err(err(1, format!("empty input: expected header \"{SCENARIO_HEADER}\"")));
    }
    if section == Section::Machine {
        machine = Some(build_machine_config(machine_line, &machine_fields)?);
    }
    let Some(machine) = machine else {
        return Err(err(1, "scenario has no [machine] section"));
    };
    Ok(Scenario { machine, memory_image, images, script })
}

fn build_machine_config(
    line: usize,
    fields: &BTreeMap<String, u64>,
) -> Result<MachineConfig, ParseError> {
    let get = |key: &str| {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| err(line, format!("machine section is missing \"{key}\"")))
    };
    Ok(MachineConfig {
        memory_base: get("memory_base")?,
        memory_size: get("memory_size")?,
        confidential_base: get("confidential_base")?,
        confidential_size: get("confidential_size")?,
        hart_count: get("harts")? as usize,
    })
}

fn parse_image_line(
    line: usize,
    content: &str,
    image: &mut ImageSpec,
) -> Result<(), ParseError> {
    let tokens: Vec<&str> = content.split_whitespace().collect();
    match tokens[0] {
        "page" => {
            // `lazy` is a bare flag; normalize it for the key=value parser.
            let normalized: Vec<&str> =
                tokens[1..].iter().map(|t| if *t == "lazy" { "lazy=" } else { *t }).collect();
            let mut kv = parse_kv(line, &normalized, "page directive")?;
            let gpa = parse_int(line, kv.remove("gpa").ok_or_else(|| err(line, "page needs gpa="))?)?;
            if gpa % PAGE_BYTES != 0 {
                return Err(err(line, format!("page gpa {gpa:#x} is not 4 KiB aligned")));
            }
            if image.pages.iter().any(|p| p.gpa == gpa) {
                return Err(err(line, format!("duplicate page gpa {gpa:#x}")));
            }
            let perms = parse_perms(
                line,
                kv.remove("perms").ok_or_else(|| err(line, "page needs perms="))?,
            )?;
            let fill = kv.remove("fill");
            let data = kv.remove("data");
            let lazy = kv.remove("lazy");
            let content = match (fill, data, lazy) {
                (Some(byte), None, None) => {
                    let bytes = parse_hex_bytes(line, byte)?;
                    if bytes.len() != 1 {
                        return Err(err(line, "fill= takes exactly one hex byte"));
                    }
                    PageContent::Fill(bytes[0])
                }
                (None, Some(hex), None) => {
                    let bytes = parse_hex_bytes(line, hex)?;
                    if bytes.is_empty() || bytes.len() > PAGE_BYTES as usize {
                        return Err(err(line, "data= must be 1..=4096 bytes"));
                    }
                    PageContent::Data(bytes)
                }
                (None, None, Some("")) => PageContent::Lazy,
                _ => {
                    return Err(err(line, "page needs exactly one of fill=, data=, or lazy="));
                }
            };
            let npa_override = kv.remove("npa").map(|n| parse_int(line, n)).transpose()?;
            if let Some((key, _)) = kv.iter().next() {
                return Err(err(line, format!("unknown page key \"{key}\"")));
            }
            image.pages.push(PageSpec { gpa, content, perms, npa_override });
        }
        "boot" => {
            let mut kv = parse_kv(line, &tokens[1..], "boot directive")?;
            if let Some(pc) = kv.remove("pc") {
                image.boot_pc = parse_int(line, pc)?;
            }
            if let Some(ie) = kv.remove("ie") {
                image.boot_ie = parse_ie(line, ie)?;
            }
            if let Some((key, _)) = kv.iter().next() {
                return Err(err(line, format!("unknown boot key \"{key}\"")));
            }
        }
        "fdt" => {
            let mut kv = parse_kv(line, &tokens[1..], "fdt directive")?;
            if let Some(vharts) = kv.remove("vharts") {
                image.fdt_vharts = parse_int(line, vharts)? as u32;
            }
            if let Some(extra) = kv.remove("extra") {
                image.fdt_extra = parse_hex_bytes(line, extra)?;
            }
            if let Some((key, _)) = kv.iter().next() {
                return Err(err(line, format!("unknown fdt key \"{key}\"")));
            }
        }
        "secret" => {
            let mut kv = parse_kv(line, &tokens[1..], "secret directive")?;
            let index = parse_int(
                line,
                kv.remove("index").ok_or_else(|| err(line, "secret needs index="))?,
            )?;
            let value = parse_hex_bytes(
                line,
                kv.remove("value").ok_or_else(|| err(line, "secret needs value="))?,
            )?;
            if let Some((key, _)) = kv.iter().next() {
                return Err(err(line, format!("unknown secret key \"{key}\"")));
            }
            image.secrets.push(SecretEntry { index, value });
        }
        "tap" => {
            let mut kv = parse_kv(line, &tokens[1..], "tap directive")?;
            let mode = kv.remove("mode").ok_or_else(|| err(line, "tap needs mode="))?;
            image.tap = match mode {
                "auto" => TapMode::Auto,
                "wrong-key" => TapMode::WrongKey,
                "mismatch" => TapMode::Mismatch,
                "flip-bit" => {
                    let byte = parse_int(
                        line,
                        kv.remove("byte").ok_or_else(|| err(line, "flip-bit needs byte="))?,
                    )? as usize;
                    let bit = parse_int(
                        line,
                        kv.remove("bit").ok_or_else(|| err(line, "flip-bit needs bit="))?,
                    )?;
                    if bit > 7 {
                        return Err(err(line, "bit= must be 0..=7"));
                    }
                    TapMode::FlipBit { byte, bit: bit as u8 }
                }
                other => return Err(err(line, format!("unknown tap mode \"{other}\""))),
            };
            if let Some((key, _)) = kv.iter().next() {
                return Err(err(line, format!("unknown tap key \"{key}\"")));
            }
        }
        other => {
            return Err(err(line, format!("unknown image directive keyword \"{other}\"")));
        }
    }
    Ok(())
}

fn parse_directive(
    line: usize,
    content: &str,
    images: &BTreeMap<String, ImageSpec>,
    free_reports: &[String],
    last_bindable: Bindable,
) -> Result<Directive, ParseError> {
    let tokens: Vec<&str> = content.split_whitespace().collect();
    match tokens[0] {
        "hart" => {
            if tokens.len() < 3 {
                return Err(err(line, "hart directive needs: hart <n> <verb> ..."));
            }
            let hart = parse_int(line, tokens[1])? as usize;
            let call = parse_hart_call(line, &tokens[2..], images)?;
            Ok(Directive::HypCall { line, hart, call })
        }
        "guest" => {
            if tokens.len() < 3 {
                return Err(err(line, "guest directive needs: guest <tvm>.<vhart> <verb> ..."));
            }
            let Some((tvm, vhart)) = tokens[1].split_once('.') else {
                return Err(err(line, format!(
                    "expected <tvm>.<vhart> target, found \"{}\"",
                    tokens[1]
                )));
            };
            let tvm = parse_int(line, tvm)?;
            let vhart = parse_int(line, vhart)?;
            let action = parse_guest_action(line, &tokens[2..])?;
            Ok(Directive::GuestQueue { line, tvm, vhart, action })
        }
        "advance_clock" => {
            if tokens.len() != 2 {
                return Err(err(line, "advance_clock takes exactly one tick count"));
            }
            Ok(Directive::AdvanceClock { line, ticks: parse_int(line, tokens[1])? })
        }
        "poke" => {
            if tokens.len() != 3 {
                return Err(err(line, "poke takes: poke <addr> <hex bytes>"));
            }
            let addr = parse_int(line, tokens[1])?;
            let bytes = parse_hex_bytes(line, tokens[2])?;
            if bytes.is_empty() {
                return Err(err(line, "poke writes no bytes"));
            }
            Ok(Directive::Poke { line, addr, bytes })
        }
        "report" => {
            // report free as <name>
            if tokens.len() != 4 || tokens[1] != "free" || tokens[2] != "as" {
                return Err(err(line, "report takes: report free as <name>"));
            }
            Ok(Directive::ReportFree { line, name: tokens[3].to_string() })
        }
        "expect" => {
            let check = parse_expect(line, content, &tokens[1..], free_reports)?;
            match &check {
                Check::Result { .. } | Check::Error { .. } => {
                    if last_bindable != Bindable::Call {
                        return Err(err(line, "expect result/error must follow a call or poke directive"));
                    }
                }
                Check::TraceHas { .. } | Check::TraceLacks { .. } => {
                    if last_bindable == Bindable::Nothing {
                        return Err(err(line, "expect must follow the directive it checks"));
                    }
                }
                Check::FreeEquals { .. } => {}
            }
            Ok(Directive::Expect { line, check })
        }
        other => Err(err(line, format!("unknown directive keyword \"{other}\""))),
    }
}

fn parse_hart_call(
    line: usize,
    tokens: &[&str],
    images: &BTreeMap<String, ImageSpec>,
) -> Result<CallSpec, ParseError> {
    match tokens[0] {
        "promote" => {
            if tokens.len() != 2 {
                return Err(err(line, "promote takes one image name"));
            }
            let image = tokens[1];
            if !images.contains_key(image) {
                return Err(err(line, format!("promote references unknown image \"{image}\"")));
            }
            Ok(CallSpec::Promote { image: image.to_string() })
        }
        "run" => {
            if tokens.len() < 3 {
                return Err(err(line, "run takes: run <tvm> <vhart> [inject=<irq>]"));
            }
            let tvm = parse_int(line, tokens[1])?;
            let vhart = parse_int(line, tokens[2])?;
            let mut inject = 0;
            for token in &tokens[3..] {
                let Some(irq) = token.strip_prefix("inject=") else {
                    return Err(err(line, format!("unknown run option \"{token}\"")));
                };
                inject = parse_int(line, irq)? + 1;
            }
            Ok(CallSpec::Raw(SbiCall::new(EXT_TVM, tvm_fid::RUN, &[tvm, vhart, inject])))
        }
        "destroy" => {
            if tokens.len() != 2 {
                return Err(err(line, "destroy takes one TVM id"));
            }
            let tvm = parse_int(line, tokens[1])?;
            Ok(CallSpec::Raw(SbiCall::new(EXT_TVM, tvm_fid::DESTROY, &[tvm])))
        }
        "call" => {
            if tokens.len() < 3 {
                return Err(err(line, "call takes: call <ext> <fid> [args...]"));
            }
            let ext = parse_int(line, tokens[1])?;
            let fid = parse_int(line, tokens[2])?;
            let args = tokens[3..]
                .iter()
                .map(|t| parse_int(line, t))
                .collect::<Result<Vec<u64>, ParseError>>()?;
            if args.len() > 6 {
                return Err(err(line, "call takes at most six arguments"));
            }
            Ok(CallSpec::Raw(SbiCall::new(ext, fid, &args)))
        }
        other => Err(err(line, format!("unknown hart verb \"{other}\""))),
    }
}

fn parse_guest_action(line: usize, tokens: &[&str]) -> Result<GuestAction, ParseError> {
    let int = |i: usize| -> Result<u64, ParseError> {
        tokens
            .get(i)
            .ok_or_else(|| err(line, format!("guest {} is missing an argument", tokens[0])))
            .and_then(|t| parse_int(line, t))
    };
    let arity = |n: usize| -> Result<(), ParseError> {
        if tokens.len() != n + 1 {
            return Err(err(line, format!("guest {} takes {n} argument(s)", tokens[0])));
        }
        Ok(())
    };
    match tokens[0] {
        "read" => {
            arity(1)?;
            Ok(GuestAction::Read { gpa: int(1)? })
        }
        "write" => {
            arity(2)?;
            Ok(GuestAction::Write { gpa: int(1)?, value: int(2)? })
        }
        "irq" => {
            arity(1)?;
            Ok(GuestAction::Irq { irq: int(1)? })
        }
        "park" => {
            arity(0)?;
            Ok(GuestAction::Park)
        }
        "ecall" => {
            if tokens.len() < 3 {
                return Err(err(line, "guest ecall takes: ecall <ext> <fid> [args...]"));
            }
            let ext = int(1)?;
            let fid = int(2)?;
            let args = tokens[3..]
                .iter()
                .map(|t| parse_int(line, t))
                .collect::<Result<Vec<u64>, ParseError>>()?;
            if args.len() > 6 {
                return Err(err(line, "guest ecall takes at most six arguments"));
            }
            Ok(GuestAction::Ecall(SbiCall::new(ext, fid, &args)))
        }
        "share" => {
            arity(2)?;
            Ok(GuestAction::Ecall(SbiCall::new(EXT_TVM, tvm_fid::SHARE_PAGE, &[int(1)?, int(2)?])))
        }
        "retrieve" => {
            arity(3)?;
            Ok(GuestAction::Ecall(SbiCall::new(
                EXT_TVM,
                tvm_fid::RETRIEVE_SECRET,
                &[int(1)?, int(2)?, int(3)?],
            )))
        }
        "allow" => {
            arity(1)?;
            Ok(GuestAction::Ecall(SbiCall::new(EXT_TVM, tvm_fid::ALLOW_INTERRUPT, &[int(1)?])))
        }
        "start" => {
            arity(3)?;
            Ok(GuestAction::Ecall(SbiCall::new(
                EXT_HSM,
                hsm_fid::HART_START,
                &[int(1)?, int(2)?, int(3)?],
            )))
        }
        "stop" => {
            arity(0)?;
            Ok(GuestAction::Ecall(SbiCall::new(EXT_HSM, hsm_fid::HART_STOP, &[])))
        }
        "suspend" => {
            arity(0)?;
            Ok(GuestAction::Ecall(SbiCall::new(EXT_HSM, hsm_fid::HART_SUSPEND, &[])))
        }
        "ipi" => {
            arity(1)?;
            Ok(GuestAction::Ecall(SbiCall::new(EXT_IPI, ipi_fid::SEND_IPI, &[int(1)?])))
        }
        "fence" => {
            arity(2)?;
            let fid = match tokens[1] {
                "fence.i" => rfence_fid::FENCE_I,
                "sfence.vma" => rfence_fid::SFENCE_VMA,
                other => return Err(err(line, format!("unknown fence kind \"{other}\""))),
            };
            Ok(GuestAction::Ecall(SbiCall::new(EXT_RFENCE, fid, &[int(2)?])))
        }
        "timer" => {
            arity(1)?;
            Ok(GuestAction::Ecall(SbiCall::new(EXT_TIME, time_fid::SET_TIMER, &[int(1)?])))
        }
        other => Err(err(line, format!("unknown guest verb \"{other}\""))),
    }
}

fn parse_expect(
    line: usize,
    content: &str,
    tokens: &[&str],
    free_reports: &[String],
) -> Result<Check, ParseError> {
    if tokens.len() < 3 {
        return Err(err(line, "expect takes: expect <subject> <op> <value>"));
    }
    match (tokens[0], tokens[1]) {
        ("result", "==") => {
            if tokens.len() != 3 {
                return Err(err(line, "expect result takes one value"));
            }
            Ok(Check::Result { value: parse_int(line, tokens[2])? })
        }
        ("error", "==") => {
            if tokens.len() != 3 {
                return Err(err(line, "expect error takes one error name"));
            }
            let error = SbiError::from_name(tokens[2])
                .ok_or_else(|| err(line, format!("unknown error name \"{}\"", tokens[2])))?;
            Ok(Check::Error { error })
        }
        ("free", "==") => {
            if tokens.len() != 3 {
                return Err(err(line, "expect free takes one report name"));
            }
            let name = tokens[2];
            if !free_reports.iter().any(|r| r == name) {
                return Err(err(line, format!(
                    "expect free references \"{name}\" before any \"report free as {name}\""
                )));
            }
            Ok(Check::FreeEquals { name: name.to_string() })
        }
        ("trace", op @ ("has" | "lacks")) => {
            // The pattern is everything between the double quotes, so it
            // may contain spaces.
            let Some(open) = content.find('"') else {
                return Err(err(line, "expect trace takes a double-quoted pattern"));
            };
            let rest = &content[open + 1..];
            let Some(close) = rest.find('"') else {
                return Err(err(line, "unterminated trace pattern"));
            };
            let pattern = rest[..close].to_string();
            if pattern.is_empty() {
                return Err(err(line, "empty trace pattern"));
            }
            if op == "has" {
                Ok(Check::TraceHas { pattern })
            } else {
                Ok(Check::TraceLacks { pattern })
            }
        }
        (subject, _) => Err(err(line, format!("unknown expect subject \"{subject}\""))),
    }
}

// ---------------------------------------------------------------------
// Loading: stage a parsed scenario into a live security manager
// ---------------------------------------------------------------------

#[derive(Debug)]
pub enum LoadError {
    Machine(crate::machine::Error),
    Staging(String),
}

impl std::fmt::Display for LoadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoadError::Machine(e) => write!(f, "machine: {e:?}"),
            LoadError::Staging(msg) => write!(f, "staging: {msg}"),
        }
    }
}

impl std::error::Error for LoadError {}

pub struct LoadedScenario {
    pub tsm: Tsm,
    /// Promote-call arguments per staged image name.
    pub images: BTreeMap<String, PromoteArgs>,
    pub script: Vec<Directive>,
}

/// Construct the machine and stage every image: source page tables and
/// frames in non-confidential memory, boot state, framed FDT blob, and
/// the sealed attestation payload. The expected measurements are computed
/// here, from the declarative image description — independently of the
/// promotion path that later re-derives them.
pub fn load(scenario: &Scenario) -> Result<LoadedScenario, LoadError> {
    let tsm = Tsm::new(scenario.machine.clone()).map_err(LoadError::Machine)?;
    let non_confidential = tsm.with_machine(|m| m.layout().non_confidential);

    tsm.with_machine(|m| {
        for (addr, bytes) in &scenario.memory_image {
            m.poke(*addr, bytes);
        }
    });

    let mut staged = BTreeMap::new();
    for (index, (name, image)) in scenario.images.iter().enumerate() {
        let base = scenario.machine.memory_base + STAGING_OFFSET + index as u64 * IMAGE_STRIDE;
        let block_end = base + IMAGE_STRIDE;
        if !non_confidential.contains_range(base, IMAGE_STRIDE) {
            return Err(LoadError::Staging(format!(
                "image \"{name}\" staging block {base:#x}..{block_end:#x} leaves non-confidential memory"
            )));
        }
        let args = tsm.with_machine(|m| stage_image(m, base, index as u64, image));
        staged.insert(name.clone(), args);
    }

    Ok(LoadedScenario { tsm, images: staged, script: scenario.script.clone() })
}

fn stage_image(
    m: &mut crate::machine::Machine,
    base: u64,
    index: u64,
    image: &ImageSpec,
) -> PromoteArgs {
    // Page frames, sorted by guest address so measurement order is
    // well defined.
    let mut pages: Vec<&PageSpec> = image.pages.iter().collect();
    pages.sort_by_key(|p| p.gpa);

    let mut builder = GuestTableBuilder::new();
    let mut measured = Vec::new();
    for (j, page) in pages.iter().enumerate() {
        let frame = base + FRAMES_OFFSET + j as u64 * PAGE_BYTES;
        let bytes = match &page.content {
            PageContent::Fill(byte) => vec![*byte; PAGE_BYTES as usize],
            PageContent::Data(data) => {
                let mut full = data.clone();
                full.resize(PAGE_BYTES as usize, 0);
                full
            }
            PageContent::Lazy => vec![0; PAGE_BYTES as usize],
        };
        m.poke(frame, &bytes);
        let target = page.npa_override.unwrap_or(frame);
        builder.map(page.gpa, target, PageSize::Size4KiB, page.perms);
        // The walker measures only pages with content; all-zero pages
        // become lazily mapped and are not part of the identity.
        if page.npa_override.is_none() && bytes.iter().any(|b| *b != 0) {
            measured.push(MeasuredPage { gpn: page.gpa / PAGE_BYTES, bytes });
        }
    }
    let root = base;
    debug_assert!(ROOT_TABLE_BYTES <= BOOT_STATE_OFFSET);
    builder.write(m, root);

    // Boot hart register state.
    let mut boot = HartArchState::new();
    boot.set_csr(Csr::Pc, image.boot_pc);
    boot.set_csr(Csr::Ie, image.boot_ie);
    let boot_bytes = boot.encode_canonical();
    m.poke(base + BOOT_STATE_OFFSET, &boot_bytes);

    // Framed FDT blob.
    let mut fdt = Vec::new();
    fdt.extend_from_slice(FDT_MAGIC);
    fdt.extend_from_slice(&image.fdt_vharts.to_be_bytes());
    fdt.extend_from_slice(&image.fdt_extra);
    stage_blob(m, base + FDT_OFFSET, &fdt);

    // Sealed attestation payload. `Auto` uses the loader's own
    // measurement arithmetic; the adversarial modes deviate from it in
    // one controlled way each.
    let mut expected = Measurements::compute(&measured, &fdt, &boot_bytes);
    if image.tap == TapMode::Mismatch {
        expected.code_data[0] ^= 0x01;
    }
    let recipients = fixtures::fixture_recipients(&[KemAlgorithm::TestKem]);
    let payload = TapPayload { measurements: expected, secrets: image.secrets.clone() };
    let mut sealed = seal(&payload, &recipients, &mut ChaCha20Rng::seed_from_u64(0x7461_7073 + index));
    match image.tap {
        TapMode::FlipBit { byte, bit } => {
            let pos = byte % sealed.len();
            sealed[pos] ^= 1 << bit;
        }
        TapMode::WrongKey => {
            // The first lockbox's algorithm id sits right after the
            // 4-byte magic, 2-byte version, and 2-byte recipient count.
            // An unassigned id leaves no lockbox this keystore can open.
            sealed[8] = 0x7f;
            sealed[9] = 0x7f;
        }
        TapMode::Auto | TapMode::Mismatch => {}
    }
    stage_blob(m, base + TAP_OFFSET, &sealed);

    PromoteArgs {
        boot_state_addr: base + BOOT_STATE_OFFSET,
        root_addr: root,
        fdt_addr: base + FDT_OFFSET,
        tap_addr: base + TAP_OFFSET,
    }
}

fn stage_blob(m: &mut crate::machine::Machine, addr: u64, blob: &[u8]) {
    let mut framed = (blob.len() as u32).to_be_bytes().to_vec();
    framed.extend_from_slice(blob);
    m.poke(addr, &framed);
}

#[cfg(test)]
mod tests {
    use super::*;

    const MACHINE: &str = "\
tsm-scenario v1

[machine]
memory_base = 0x80000000
memory_size = 0x80000000
confidential_base = 0xc0000000
confidential_size = 0x40000000
harts = 1
";

    fn parse_ok(text: &str) -> Scenario {
        parse(text).expect("scenario should parse")
    }

    fn parse_err(text: &str) -> ParseError {
        parse(text).expect_err("scenario should not parse")
    }

    #[test]
    fn minimal_scenario_is_machine_only() {
        let s = parse_ok(MACHINE);
        assert_eq!(s.machine.memory_base, 0x8000_0000);
        assert_eq!(s.machine.hart_count, 1);
        assert!(s.script.is_empty());
        assert!(s.images.is_empty());
        assert!(s.memory_image.is_empty());
    }

    #[test]
    fn full_scenario_round_trips_every_directive_form() {
        let text = format!(
            "{MACHINE}
[memory]
0xa1000000 : c0ffee00   # staged before the run

[image boot]
page gpa=0x0 fill=5a perms=rwx
page gpa=0x1000 lazy= perms=rw
page gpa=0x2000 data=deadbeef perms=r npa=0xc0000000
boot pc=0x0 ie=soft,timer
fdt vharts=2 extra=6d6f64656c
secret index=7 value=726f74617465
tap mode=flip-bit byte=40 bit=3

[script]
report free as baseline
hart 0 promote boot
expect result == 1
guest 1.0 read 0x10
guest 1.0 write 0x20 0xfeed
guest 1.0 share 0x4000 0xa1000000
guest 1.0 retrieve 7 0x1000 64
guest 1.0 allow 9
guest 1.0 start 1 0x0 0x77
guest 1.0 stop
guest 1.0 suspend
guest 1.0 ipi 0b11
guest 1.0 fence sfence.vma 2
guest 1.0 timer 5000
guest 1.0 irq 33
guest 1.0 park
guest 1.0 ecall 0xdead0000 3 0x11 0x22
hart 0 run 1 0 inject=9
expect result == 8
expect trace has \"ev=enter tvm=1 vhart=0\"
expect trace lacks \"stray=1\"
advance_clock 6000
poke 0xa1000000 00000000deadbeef
expect error == AccessFault
hart 0 destroy 1
expect free == baseline
"
        );
        // \"0b11\" is not a number format we accept; fix the ipi line.
        let text = text.replace("ipi 0b11", "ipi 3");
        // AccessFault is not an error name; the parser must say so.
        let e = parse_err(&text);
        assert!(e.message.contains("unknown error name"), "{e}");

        let text = text.replace("expect error == AccessFault", "expect error == Denied");
        let s = parse_ok(&text);
        assert_eq!(s.script.len(), 26);
        assert_eq!(s.images["boot"].pages.len(), 3);
        assert_eq!(s.images["boot"].pages[1].content, PageContent::Lazy);
        assert_eq!(s.images["boot"].pages[2].npa_override, Some(0xc000_0000));
        assert_eq!(s.images["boot"].tap, TapMode::FlipBit { byte: 40, bit: 3 });
        assert_eq!(s.images["boot"].secrets[0].index, 7);
        assert_eq!(s.memory_image, vec![(0xa100_0000, vec![0xc0, 0xff, 0xee, 0x00])]);

        let Directive::HypCall { hart: 0, call: CallSpec::Promote { image }, .. } = &s.script[1]
        else {
            panic!("expected promote, got {:?}", s.script[1]);
        };
        assert_eq!(image, "boot");
        let Directive::GuestQueue { action: GuestAction::Ecall(call), .. } = &s.script[5] else {
            panic!("expected share ecall, got {:?}", s.script[5]);
        };
        assert_eq!((call.ext, call.fid), (EXT_TVM, tvm_fid::SHARE_PAGE));
        assert_eq!(&call.args[..2], &[0x4000, 0xa100_0000]);
        let Directive::Expect { check: Check::TraceHas { pattern }, .. } = &s.script[19] else {
            panic!("expected trace check, got {:?}", s.script[19]);
        };
        assert_eq!(pattern, "ev=enter tvm=1 vhart=0");
    }

    #[test]
    fn header_and_section_errors_carry_line_numbers() {
        let e = parse_err("tsm-scenario v2\n");
        assert_eq!(e.line, 1);
        assert!(e.message.contains("expected header"), "{e}");

        let e = parse_err("tsm-scenario v1\nmemory_base = 1\n");
        assert_eq!(e.line, 2);
        assert!(e.message.contains("outside any section"), "{e}");

        let e = parse_err("tsm-scenario v1\n[warp-drive]\n");
        assert!(e.message.contains("unknown section \"[warp-drive]\""), "{e}");

        let e = parse_err("tsm-scenario v1\n[machine]\nharts = 1\n");
        assert!(e.message.contains("missing \"memory_base\""), "{e}");

        let e = parse_err(&format!("{MACHINE}[script]\nfrobnicate 7\n"));
        assert_eq!(e.line, 10);
        assert!(e.message.contains("unknown directive keyword \"frobnicate\""), "{e}");
    }

    #[test]
    fn expect_must_follow_what_it_checks() {
        // Expect with no preceding directive at all.
        let e = parse_err(&format!("{MACHINE}[script]\nexpect result == 1\n"));
        assert!(e.message.contains("must follow a call"), "{e}");

        // Result expects do not bind to queue directives.
        let e = parse_err(&format!(
            "{MACHINE}[image i]\npage gpa=0x0 fill=5a perms=rwx\n[script]\nhart 0 promote i\nguest 1.0 read 0x0\nexpect result == 8\n"
        ));
        assert!(e.message.contains("must follow a call or poke"), "{e}");

        // Trace expects bind to anything, but not to nothing.
        let e = parse_err(&format!("{MACHINE}[script]\nexpect trace has \"x\"\n"));
        assert!(e.message.contains("must follow the directive"), "{e}");

        // Free expects need the report they reference.
        let e = parse_err(&format!(
            "{MACHINE}[script]\nhart 0 destroy 1\nexpect free == baseline\n"
        ));
        assert!(e.message.contains("before any \"report free as baseline\""), "{e}");
    }

    #[test]
    fn image_validation_rejects_bad_pages() {
        let e = parse_err(&format!(
            "{MACHINE}[image i]\npage gpa=0x10 fill=5a perms=rwx\n"
        ));
        assert!(e.message.contains("not 4 KiB aligned"), "{e}");

        let e = parse_err(&format!(
            "{MACHINE}[image i]\npage gpa=0x0 fill=5a perms=rwx\npage gpa=0x0 fill=11 perms=r\n"
        ));
        assert!(e.message.contains("duplicate page gpa"), "{e}");

        let e = parse_err(&format!("{MACHINE}[image i]\npage gpa=0x0 perms=rwx\n"));
        assert!(e.message.contains("exactly one of fill=, data=, or lazy="), "{e}");

        let e = parse_err(&format!(
            "{MACHINE}[image i]\npage gpa=0x0 fill=5a perms=rwz\n"
        ));
        assert!(e.message.contains("unknown permission flag 'z'"), "{e}");

        let e = parse_err(&format!("{MACHINE}[image i]\ntap mode=yolo\n"));
        assert!(e.message.contains("unknown tap mode \"yolo\""), "{e}");

        let e = parse_err(&format!(
            "{MACHINE}[script]\nhart 0 promote ghost\n"
        ));
        assert!(e.message.contains("unknown image \"ghost\""), "{e}");
    }

    #[test]
    fn loader_stages_a_promotable_image() {
        let text = format!(
            "{MACHINE}
[image boot]
page gpa=0x0 fill=5a perms=rwx
page gpa=0x1000 lazy= perms=rw
fdt vharts=1
tap mode=auto
"
        );
        let scenario = parse_ok(&text);
        let loaded = load(&scenario).unwrap();
        let args = &loaded.images["boot"];
        let ret = loaded.tsm.hyp_call(
            0,
            SbiCall::new(
                EXT_TVM,
                tvm_fid::PROMOTE,
                &[args.boot_state_addr, args.root_addr, args.fdt_addr, args.tap_addr],
            ),
        );
        assert_eq!(ret.error, 0, "staged image should promote: {ret:?}");
        assert!(loaded.tsm.trace_contains("ev=promote step=attest verdict=match"));
    }

    #[test]
    fn loader_tap_modes_produce_their_specific_failures() {
        for (mode, expected) in [
            ("tap mode=flip-bit byte=60 bit=2", SbiError::AuthFailure),
            ("tap mode=wrong-key", SbiError::NoMatchingLockbox),
            ("tap mode=mismatch", SbiError::AttestationFailed),
        ] {
            let text = format!(
                "{MACHINE}
[image boot]
page gpa=0x0 fill=5a perms=rwx
{mode}
"
            );
            let loaded = load(&parse_ok(&text)).unwrap();
            let free = loaded.tsm.allocator().free_bytes();
            let args = &loaded.images["boot"];
            let ret = loaded.tsm.hyp_call(
                0,
                SbiCall::new(
                    EXT_TVM,
                    tvm_fid::PROMOTE,
                    &[args.boot_state_addr, args.root_addr, args.fdt_addr, args.tap_addr],
                ),
            );
            assert_eq!(ret, crate::abi::SbiRet::err(expected), "mode {mode}");
            // Failed promotion conserves confidential memory.
            assert_eq!(loaded.tsm.allocator().free_bytes(), free, "mode {mode}");
        }
    }

    #[test]
    fn loader_npa_override_targets_the_given_frame() {
        let text = format!(
            "{MACHINE}
[image evil]
page gpa=0x0 fill=5a perms=rwx npa=0xc0000000
"
        );
        let loaded = load(&parse_ok(&text)).unwrap();
        let args = &loaded.images["evil"];
        let ret = loaded.tsm.hyp_call(
            0,
            SbiCall::new(
                EXT_TVM,
                tvm_fid::PROMOTE,
                &[args.boot_state_addr, args.root_addr, args.fdt_addr, args.tap_addr],
            ),
        );
        // A table entry aimed at confidential memory must be refused.
        assert_eq!(ret, crate::abi::SbiRet::err(SbiError::InvalidAddress));
    }
}
