//! Run the full gradient-check suite, the same one behind `cflux gradcheck`.
//!
//! cargo run --release --example gradcheck_suite

use contextual_flux::verify::{run_suite, SuiteOptions};
use contextual_flux::Result;

fn main() -> Result<()> {
    let report = run_suite(SuiteOptions::default())?;
    print!("{}", report.render());
    println!("{} checks, all passed: {}", report.checks.len(), report.passed());
    Ok(())
}
