// Runs the pipeline into a fresh run directory, re-runs it under another run
// id to show the manifests match, then verifies the artifact invariants.

use latent_match::commands::{cmd_check, cmd_pipeline};
use latent_match::pipeline::RunConfig;

fn main() -> latent_match::Result<()> {
    let root = std::env::temp_dir().join(format!("latent-match-artifacts-{}", std::process::id()));
    let mut cfg = RunConfig { outdir: root.clone(), ..RunConfig::default() };
    cfg.dgp.n_units = 300;
    cfg.train.epochs = 5;
    let mut manifests = Vec::new();
    for id in ["first", "second"] {
        cfg.run_id = Some(id.into());
        let (dir, manifest) = cmd_pipeline(&cfg)?;
        println!("{}: {} files", dir.display(), manifest.files.len());
        manifests.push(manifest);
    }
    println!("manifests identical: {}", manifests[0] == manifests[1]);
    for c in cmd_check(&cfg.run_dir())? {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    std::fs::remove_dir_all(root)?;
    Ok(())
}
