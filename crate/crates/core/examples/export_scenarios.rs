//! Writes the built-in simulation scenarios as `simulate` run configs.
//!
//! Usage: `cargo run -p curvequiv --example export_scenarios -- [DIR]`

use curvequiv::{Scenario, SimOptions, TestKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::path::PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "scenarios".to_string()),
    );
    std::fs::create_dir_all(&dir)?;
    for name in ["A", "B", "C"] {
        for fixed in [false, true] {
            if fixed && name != "A" {
                continue;
            }
            for test in [TestKind::One, TestKind::Many] {
                let scenario = Scenario::builtin(name)?
                    .with_fixed_hill(fixed)
                    .with_test(test);
                let config = serde_json::json!({
                    "schema_version": 1,
                    "simulate": {
                        "scenario": scenario,
                        "options": SimOptions::default(),
                    }
                });
                let file = format!(
                    "{name}{}{}.json",
                    if fixed { "_fixed_hill" } else { "" },
                    if test == TestKind::Many { "_many" } else { "" }
                );
                std::fs::write(
                    dir.join(&file),
                    serde_json::to_string_pretty(&config)? + "\n",
                )?;
            }
        }
    }
    Ok(())
}
