//! Resolves a preset, a TOML overlay and flag overrides the way the CLI does,
//! and lists the runs an ablation would launch.
//!
//! cargo run --release --example config_layering

use rob::cli::{AblationAxis, Overrides, RunConfig, PRESETS};

fn main() -> rob::Result<()> {
    println!("presets: {}", PRESETS.join(", "));
    let dir = tempfile::tempdir().expect("temp dir");
    let overlay = dir.path().join("overlay.toml");
    std::fs::write(
        &overlay,
        "[objective]\nteacher_temp = 0.04\n\n[augmentation]\nn_small = 4\n",
    )
    .expect("write overlay");

    let cfg = RunConfig::resolve(&Overrides {
        preset: Some("desk-ibot".into()),
        config: Some(overlay),
        seed: Some(7),
        output: Some(dir.path().join("run")),
    })?;
    println!(
        "seed {} method {} τt {} n_small {} output {}",
        cfg.seed,
        cfg.objective.method.name(),
        cfg.objective.teacher_temp,
        cfg.augmentation.n_small,
        cfg.output_dir.display()
    );

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[objective]\nteacher_tmp = 0.04\n").expect("write overlay");
    let err = RunConfig::resolve(&Overrides {
        config: Some(bad),
        ..Default::default()
    })
    .unwrap_err();
    println!("misspelled key -> exit code {}: {err}", err.exit_code());

    for axis in AblationAxis::ALL {
        let labels: Vec<String> = axis.variants(&cfg).into_iter().map(|(l, _)| l).collect();
        println!("ablate {}: {}", axis.name(), labels.join(", "));
    }
    Ok(())
}
