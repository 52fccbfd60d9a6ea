// SPDX-License-Identifier: Apache-2.0

//! `tsm` — drive the security-manager model from the command line: replay
//! scenario scripts, run the adversarial suite, print allocator reports,
//! and work with sealed attestation payload files.
//!
//! The model is deterministic: the same scenario and seeds produce
//! byte-identical traces and payloads. All keys are the model's
//! well-known fixture keys; nothing here handles real secrets.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tsm_core::allocator::PageAllocator;
use tsm_core::attestation::{self, Measurements, SecretEntry, TapPayload, PCR_BYTES};
use tsm_core::fixtures;
use tsm_core::kem::KemAlgorithm;
use tsm_core::machine::{AddrInterval, PageSize};
use tsm_core::runner::{self, RunOutcome};
use tsm_core::scenario;
use tsm_core::{corpus, suite};

#[derive(Parser)]
#[command(name = "tsm", version, about = "Deterministic TEE security-manager model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and judge every expectation in it.
    Run {
        /// Path to a scenario file (see `tsm corpus` for examples).
        scenario: Option<PathBuf>,
        /// Run a bundled scenario by name instead of a file.
        #[arg(long, conflicts_with = "scenario")]
        bundled: Option<String>,
        /// Write the rendered trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Drive each hardware hart from its own thread.
        #[arg(long)]
        threads: bool,
        /// Print only the verdict line.
        #[arg(long)]
        quiet: bool,
    },
    /// List the bundled scenarios, or print one by name.
    Corpus {
        /// Scenario name to print (omit to list).
        name: Option<String>,
    },
    /// Run the adversarial suite and the malformed-table fuzzer.
    Suite {
        /// Number of random malformed page tables to throw at promotion.
        #[arg(long, default_value_t = 1000)]
        fuzz_cases: usize,
        /// Fuzzer seed.
        #[arg(long, default_value_t = 0xF0CACC1A)]
        seed: u64,
    },
    /// Print model reports.
    Report {
        /// Page-token overhead arithmetic for a 1 GiB confidential region.
        #[arg(long)]
        allocator: bool,
    },
    /// Create, inspect, or unseal attestation payload files.
    Tap {
        #[command(subcommand)]
        action: TapAction,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Recipient {
    /// Deterministic test KEM (no security).
    TestKem,
    /// ML-KEM-768.
    MlKem768,
}

impl From<Recipient> for KemAlgorithm {
    fn from(r: Recipient) -> KemAlgorithm {
        match r {
            Recipient::TestKem => KemAlgorithm::TestKem,
            Recipient::MlKem768 => KemAlgorithm::MlKem768,
        }
    }
}

#[derive(Subcommand)]
enum TapAction {
    /// Seal measurements and secrets into a payload file.
    Create {
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// Secret entry as INDEX:HEX; repeatable.
        #[arg(long = "secret", value_name = "INDEX:HEX")]
        secrets: Vec<String>,
        /// Code+data measurement, 96 hex chars (default: zeros).
        #[arg(long, value_name = "HEX48")]
        code: Option<String>,
        /// Device-tree measurement, 96 hex chars (default: zeros).
        #[arg(long, value_name = "HEX48")]
        fdt: Option<String>,
        /// Boot-state measurement, 96 hex chars (default: zeros).
        #[arg(long, value_name = "HEX48")]
        boot: Option<String>,
        /// Fixture recipients to seal to; repeatable (default: both).
        #[arg(long = "recipient", value_enum)]
        recipients: Vec<Recipient>,
        /// Deterministic seed for key wrap and nonce.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print header facts without opening the payload. Never decrypts.
    Inspect {
        /// Payload file.
        file: PathBuf,
    },
    /// Open a payload with the model's fixture keys.
    Unseal {
        /// Payload file.
        file: PathBuf,
        /// Print secret bytes as hex (default: lengths only).
        #[arg(long)]
        show_secrets: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Run { scenario, bundled, trace, threads, quiet } => {
            cmd_run(scenario, bundled, trace, threads, quiet)
        }
        Command::Corpus { name } => cmd_corpus(name),
        Command::Suite { fuzz_cases, seed } => Ok(cmd_suite(fuzz_cases, seed)),
        Command::Report { allocator } => {
            if !allocator {
                return Err("nothing to report; pass --allocator".into());
            }
            cmd_report_allocator();
            Ok(ExitCode::SUCCESS)
        }
        Command::Tap { action } => cmd_tap(action).map(|()| ExitCode::SUCCESS),
    }
}

fn cmd_run(
    path: Option<PathBuf>,
    bundled: Option<String>,
    trace: Option<PathBuf>,
    threads: bool,
    quiet: bool,
) -> Result<ExitCode, String> {
    let (label, text) = match (&path, &bundled) {
        (Some(p), None) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            (p.display().to_string(), text)
        }
        (None, Some(name)) => {
            let text = corpus::all()
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.to_string())
                .ok_or_else(|| format!("no bundled scenario named \"{name}\""))?;
            (name.clone(), text)
        }
        _ => return Err("pass a scenario path or --bundled <name>".into()),
    };

    let parsed = scenario::parse(&text).map_err(|e| format!("{label}: {e}"))?;
    let loaded = scenario::load(&parsed).map_err(|e| format!("{label}: {e}"))?;
    let outcome: RunOutcome =
        if threads { runner::run_threaded(&loaded) } else { runner::run(&loaded) };

    if !quiet {
        for check in &outcome.checks {
            let status = if check.passed { "pass" } else { "FAIL" };
            print!("{status}  line {:<4} {}", check.line, check.description);
            if !check.passed {
                print!("  ({})", check.detail);
            }
            println!();
        }
    }
    println!(
        "verdict: {} ({} checks, {} calls, {} trace events)",
        if outcome.verdict { "pass" } else { "fail" },
        outcome.checks.len(),
        outcome.calls,
        outcome.events.len()
    );

    if let Some(trace_path) = trace {
        std::fs::write(&trace_path, &outcome.trace)
            .map_err(|e| format!("{}: {e}", trace_path.display()))?;
        if !quiet {
            println!("trace written to {}", trace_path.display());
        }
    }
    Ok(if outcome.verdict { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_corpus(name: Option<String>) -> Result<ExitCode, String> {
    match name {
        None => {
            for (name, text) in corpus::all() {
                let purpose = text
                    .lines()
                    .next()
                    .unwrap_or_default()
                    .trim_start_matches('#')
                    .trim();
                println!("{name:<18} {purpose}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Some(name) => {
            let text = corpus::all()
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| *t)
                .ok_or_else(|| format!("no bundled scenario named \"{name}\""))?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_suite(fuzz_cases: usize, seed: u64) -> ExitCode {
    let rows = suite::run_attack_suite();
    let name_width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut all_good = true;
    for row in &rows {
        let verdict = if row.passed() {
            "defended"
        } else if !row.defended {
            "BREACHED"
        } else {
            "LEAKED"
        };
        all_good &= row.passed();
        println!("{:<name_width$}  {:<8}  {}", row.name, verdict, row.technique);
        if !row.passed() {
            println!("{:<name_width$}            observed: {}", "", row.observed);
        }
    }

    let fuzz = suite::fuzz_malformed_tables(seed, fuzz_cases);
    println!(
        "fuzz: {} malformed tables — {} rejected, {} survived, {} leaked",
        fuzz.cases, fuzz.rejected, fuzz.survived, fuzz.leaked
    );
    all_good &= fuzz.leaked == 0;

    println!("verdict: {}", if all_good { "defended" } else { "fail" });
    if all_good {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn cmd_report_allocator() {
    const GIB: u64 = 1 << 30;
    let alloc = PageAllocator::init(AddrInterval::new(0xC000_0000, GIB), PageSize::Size1GiB);

    let fresh = alloc.report();
    println!("page-token overhead, 1 GiB confidential region");
    println!(
        "  fresh:        {} token(s), {} token bytes, {} tree node(s), {} modeled bytes total",
        fresh.free_tokens + fresh.allocated_tokens,
        (fresh.free_tokens + fresh.allocated_tokens) * tsm_core::allocator::TOKEN_COST_BYTES,
        fresh.nonempty_nodes,
        fresh.modeled_bytes,
    );

    let mut carved = Vec::new();
    while let Ok(token) = alloc.allocate(PageSize::Size4KiB) {
        carved.push(token);
    }
    let full = alloc.report();
    let tokens = full.free_tokens + full.allocated_tokens;
    println!(
        "  fully carved: {} tokens, {} token bytes ({:.2} MiB), {} tree node(s), {} modeled bytes total",
        tokens,
        tokens * tsm_core::allocator::TOKEN_COST_BYTES,
        (tokens * tsm_core::allocator::TOKEN_COST_BYTES) as f64 / (1024.0 * 1024.0),
        full.nonempty_nodes,
        full.modeled_bytes,
    );
    println!("  carve count:  {} 4 KiB allocations until exhaustion", carved.len());
}

fn cmd_tap(action: TapAction) -> Result<(), String> {
    match action {
        TapAction::Create { out, secrets, code, fdt, boot, recipients, seed } => {
            let measurements = Measurements {
                code_data: parse_digest(code.as_deref())?,
                fdt: parse_digest(fdt.as_deref())?,
                boot_state: parse_digest(boot.as_deref())?,
            };
            let secrets = secrets
                .iter()
                .map(|s| parse_secret(s))
                .collect::<Result<Vec<SecretEntry>, String>>()?;
            let algs: Vec<KemAlgorithm> = if recipients.is_empty() {
                vec![KemAlgorithm::TestKem, KemAlgorithm::MlKem768]
            } else {
                recipients.into_iter().map(KemAlgorithm::from).collect()
            };
            let recipients = fixtures::fixture_recipients(&algs);
            let payload = TapPayload { measurements, secrets };
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let sealed = attestation::seal(&payload, &recipients, &mut rng);
            std::fs::write(&out, &sealed).map_err(|e| format!("{}: {e}", out.display()))?;
            println!(
                "sealed {} byte payload to {} recipient(s): {}",
                sealed.len(),
                algs.len(),
                out.display()
            );
            Ok(())
        }
        TapAction::Inspect { file } => {
            let bytes = std::fs::read(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            let summary = attestation::inspect(&bytes).map_err(|e| e.to_string())?;
            println!("version:    {}", summary.version);
            println!("lockboxes:  {}", summary.lockboxes.len());
            for (id, len) in &summary.lockboxes {
                let alg = KemAlgorithm::from_id(*id)
                    .map(|a| a.to_string())
                    .unwrap_or_else(|| format!("unknown (id {id})"));
                println!("  - {alg}, {len} byte field");
            }
            println!("ciphertext: {} bytes (authenticated; not opened)", summary.ciphertext_len);
            Ok(())
        }
        TapAction::Unseal { file, show_secrets } => {
            let bytes = std::fs::read(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            let payload =
                attestation::unseal(&bytes, &fixtures::fixture_keystore()).map_err(|e| e.to_string())?;
            println!("code_data:  {}", hex::encode(payload.measurements.code_data));
            println!("fdt:        {}", hex::encode(payload.measurements.fdt));
            println!("boot_state: {}", hex::encode(payload.measurements.boot_state));
            println!("secrets:    {}", payload.secrets.len());
            for secret in &payload.secrets {
                if show_secrets {
                    println!("  - index {}: {}", secret.index, hex::encode(&secret.value));
                } else {
                    println!("  - index {}: {} bytes (pass --show-secrets to print)", secret.index, secret.value.len());
                }
            }
            Ok(())
        }
    }
}

fn parse_digest(hex_str: Option<&str>) -> Result<[u8; PCR_BYTES], String> {
    let Some(hex_str) = hex_str else {
        return Ok([0u8; PCR_BYTES]);
    };
    let bytes = hex::decode(hex_str).map_err(|e| format!("bad digest hex: {e}"))?;
    let arr: [u8; PCR_BYTES] =
        bytes.try_into().map_err(|_| format!("digest must be {PCR_BYTES} bytes"))?;
    Ok(arr)
}

fn parse_secret(spec: &str) -> Result<SecretEntry, String> {
    let (index, value) = spec
        .split_once(':')
        .ok_or_else(|| format!("secret \"{spec}\" is not INDEX:HEX"))?;
    let index: u64 = index.parse().map_err(|e| format!("secret index: {e}"))?;
    let value = hex::decode(value).map_err(|e| format!("secret hex: {e}"))?;
    Ok(SecretEntry { index, value })
}
