//! Runs the finite-difference gradient suite in f64 and prints the table.

use fabr::gradcheck::{run_standard_suite, table};

fn main() -> fabr::Result<()> {
    let results = run_standard_suite()?;
    print!("{}", table(&results));
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} of {} cases passed", results.len() - failed, results.len());
    Ok(())
}
