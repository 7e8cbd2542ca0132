#![allow(dead_code)]

use std::path::{Path, PathBuf};

use prospectr_cli::{run_args, CliResult};

/// A world and models small enough for every subcommand to run in well under
/// a second.
pub const SMALL: &str = r#"{
  "synth": {"rows": 40, "cols": 40, "n_layers": 6, "n_deposits": 15, "rule": {"layers": [0, 1, 2, 3]}},
  "mae": {"encoder": {"window": 8, "patch": 4, "dim": 32, "depth": 1, "heads": 2},
          "decoder": {"dim": 16, "depth": 1, "heads": 2},
          "epochs": 2, "samples_per_epoch": 128, "heldout": 32, "recon_every": 1},
  "clf": {"hidden": [16], "epochs": 5, "mc_passes": 8},
  "xai": {"steps": 16, "stride": 8},
  "eval": {"map_stride": 4},
  "seeds": [0, 1]
}"#;

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

/// Runs `prospectr <args>` in-process with `--quiet` and `--out <out>`.
pub fn cli(out: &Path, config: &Path, args: &[&str]) -> CliResult<PathBuf> {
    let mut all = vec!["prospectr".to_string(), "-q".into(), "--out".into(), out.display().to_string()];
    all.extend(["--config".to_string(), config.display().to_string()]);
    all.extend(args.iter().map(|s| s.to_string()));
    run_args(all)
}

pub fn p(path: &Path) -> String {
    path.display().to_string()
}

/// Synthetic world, preprocessed features and a pretrained encoder.
pub struct Staged {
    pub world: PathBuf,
    pub features: PathBuf,
    pub deposits: PathBuf,
    pub encoder: PathBuf,
}

pub fn stage(out: &Path, config: &Path) -> Staged {
    let s = cli(out, config, &["synth"]).unwrap();
    let pre = cli(out, config, &["preprocess", "--raster", &p(&s.join("world.mbr"))]).unwrap();
    let features = pre.join("features.mbr");
    let t = cli(out, config, &["pretrain", "--raster", &p(&features)]).unwrap();
    Staged {
        world: s.join("world.mbr"),
        features,
        deposits: s.join("deposits.csv"),
        encoder: t.join("encoder.json"),
    }
}
