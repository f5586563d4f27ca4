//! A configured run: strict JSON config in, report and CSV sections out.

use rwspace::runner::{run, ExperimentConfig};

fn main() -> rwspace::Result<()> {
    let text = r#"{
        "version": 1,
        "seed": 7,
        "workers": 4,
        "env": {"kind": "finite", "d": 3, "c": 0.05, "atoms": [
            {"p": 0.5, "weights": [0.2166666666666667, 0.1166666666666667, 0.1666666666666667, 0.1666666666666667, 0.1666666666666667, 0.1666666666666666]},
            {"p": 0.5, "weights": [0.1166666666666667, 0.2166666666666667, 0.1666666666666667, 0.1666666666666667, 0.1666666666666667, 0.1666666666666666]}
        ]},
        "command": {"name": "intersection", "theta_grid": "0:0.1:0.025", "k_max": 32}
    }"#;
    let config = ExperimentConfig::from_json(text)?;
    let out = run(&config)?;
    println!("ran {} in {:.2}s on {} workers", config.command.name(), out.timing.wall_seconds, out.timing.workers);
    for c in &out.report.checks {
        println!("check {}: {} ({})", c.name, c.passed, c.value);
    }
    out.report.emit_plot_data("criterion", std::io::stdout().lock())?;

    let typo = text.replace("\"k_max\"", "\"kmax\"");
    match ExperimentConfig::from_json(&typo) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => println!("unexpectedly accepted"),
    }
    Ok(())
}
