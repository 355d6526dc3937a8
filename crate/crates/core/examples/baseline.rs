//! Runs the baseline preset and prints what happened to each map object.

use semistatic_vem::runner::run_scenario;
use semistatic_vem::sim::preset;
use semistatic_vem::vem::VemConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = preset("baseline_6m4s")?;
    let out = run_scenario(&cfg, &VemConfig::default())?;
    for (id, obj) in &out.state.library {
        println!(
            "object {id:>2}  {:<16} E[v] = {:.3}",
            obj.status.as_str(),
            obj.consistency.expectation()
        );
    }
    let m = &out.metrics;
    println!(
        "ate {:.4} m, precision {:.2}, recall {:.2}",
        m.ate, m.change_precision, m.change_recall
    );
    Ok(())
}
