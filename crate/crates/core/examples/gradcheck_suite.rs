//! Run the finite-difference suite and print the worst relative error per
//! operation.

use vamoe::harness::config::GradcheckConfig;
use vamoe::harness::gradsuite::run_suite;

fn main() -> vamoe::Result<()> {
    let report = run_suite(&GradcheckConfig::default(), 0)?;
    print!("{}", report.to_table());
    report.ensure_passed()
}
