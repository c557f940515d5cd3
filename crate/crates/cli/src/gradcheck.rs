use std::process::ExitCode;

use anyhow::Result;
use dccs_core::suites::{run_scope, Scope};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// One of ops, dse, lasea, model, or all.
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn run(a: Args) -> Result<ExitCode> {
    let scopes = if a.scope == "all" { Scope::ALL.to_vec() } else { vec![a.scope.parse::<Scope>()?] };
    println!("# gradcheck scope={} seed={}", a.scope, a.seed);
    println!("{:<8} {:<36} {:>8} {:>12} {:>9}  result", "scope", "target", "probes", "max_rel_err", "tol");
    let mut failures = 0;
    for scope in scopes {
        for r in run_scope(scope, a.seed)? {
            let ok = r.passed();
            failures += usize::from(!ok);
            println!(
                "{:<8} {:<36} {:>8} {:>12.3e} {:>9.0e}  {}",
                scope.name(),
                r.name,
                r.report.checked,
                r.report.max_rel_error,
                r.tolerance,
                if ok { "PASS" } else { "FAIL" }
            );
        }
    }
    if failures > 0 {
        eprintln!("{failures} gradient check(s) failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
