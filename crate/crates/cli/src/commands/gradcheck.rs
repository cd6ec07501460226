use gridmend_core::tensor::run_standard_suite;
use gridmend_core::{Error, Result};

pub fn run() -> Result<()> {
    let reports = run_standard_suite();
    let mut failures = 0usize;
    for r in &reports {
        println!(
            "{:-24} {:>5} coords  max rel err {:.3e}  {}",
            r.name,
            r.checked,
            r.max_rel_err,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failures += 1;
            for (input, coord, err) in r.offenders.iter().take(5) {
                println!("    input {input} coord {coord}: rel err {err:.3e}");
            }
        }
    }
    if failures > 0 {
        return Err(Error::Numeric(format!("{failures} gradient checks failed")));
    }
    Ok(())
}
