//! Runs every acceptance criterion and prints one PASS/FAIL line each, with
//! its runtime and budget. Configurations, seeds and tolerances are pinned
//! in `harness::suites`. Positional arguments filter suites by substring.

use std::process::ExitCode;

use sco_adversary::harness::{run_suite, SUITES};

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for suite in SUITES.iter().filter(|&&s| s != "all") {
        if !filters.is_empty() && !filters.iter().any(|f| suite.contains(f.as_str())) {
            continue;
        }
        match run_suite(suite) {
            Ok(results) => {
                for r in &results {
                    println!("{}", r.line());
                    if !r.pass {
                        failed += 1;
                        println!("{:#}", r.details);
                    }
                }
            }
            Err(e) => {
                failed += 1;
                println!("{suite}: FAIL ({e})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
