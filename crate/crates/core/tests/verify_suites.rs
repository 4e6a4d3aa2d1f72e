use bevkit::verify::{format_table, run, Suite};

#[test]
fn every_suite_passes() {
    let checks = run(Suite::All);
    let table = format_table(&checks);
    println!("{table}");
    assert!(checks.iter().all(|c| c.passed), "\n{table}");
}
