//! Golden-file cases for the `kasa` binary. `KASA_BLESS=1` rewrites the
//! pinned outputs instead of comparing against them.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

pub struct Case {
    pub name: &'static str,
    /// `@G/` expands to the golden directory, `@O/` to the case's output directory.
    pub args: &'static [&'static str],
    /// Files the command writes under `@O/`, pinned as `<name>.<file>`.
    pub files: &'static [&'static str],
}

pub const TINY: &str = "@G/tiny.toml";

pub const CASES: &[Case] = &[
    Case { name: "svd_diag3", args: &["svd", "@G/diag3.mat"], files: &[] },
    Case {
        name: "svd_small",
        args: &["svd", "@G/small.mat", "--out-dir", "@O/"],
        files: &["u.mat", "sigma.mat", "v.mat"],
    },
    Case {
        name: "truncate_k0",
        args: &["truncate", "@G/diag3.mat", "--k", "0", "--out", "@O/w.mat"],
        files: &["w.mat"],
    },
    Case {
        name: "truncate_small",
        args: &["truncate", "@G/small.mat", "--k", "1", "--out", "@O/w.mat"],
        files: &["w.mat"],
    },
    Case { name: "gradcheck", args: &["gradcheck", "--r", "4", "--dims", "32x24", "--seed", "7"], files: &[] },
    Case {
        name: "train_kasa",
        args: &["train", "--method", "kasa", "--config", TINY, "--out-dir", "@O/"],
        files: &["trace.jsonl", "adapter.ckpt"],
    },
    Case {
        name: "train_kasa_seed1",
        args: &["train", "--method", "kasa", "--config", TINY, "--set", "train.seed=1", "--out-dir", "@O/"],
        files: &["trace.jsonl", "adapter.ckpt"],
    },
    Case {
        name: "train_lora",
        args: &["train", "--method", "lora", "--config", TINY, "--out-dir", "@O/"],
        files: &["trace.jsonl", "adapter.ckpt"],
    },
    Case {
        name: "train_pissa",
        args: &["train", "--method", "pissa", "--config", TINY, "--out-dir", "@O/"],
        files: &["trace.jsonl", "adapter.ckpt"],
    },
    Case {
        name: "train_milora",
        args: &["train", "--method", "milora", "--config", TINY, "--out-dir", "@O/"],
        files: &["trace.jsonl", "adapter.ckpt"],
    },
    Case {
        name: "compare",
        args: &["compare", "--config", TINY, "--out-dir", "@O/"],
        files: &["compare.csv"],
    },
    Case {
        name: "sweep_k",
        args: &["sweep-k", "--config", TINY, "--out-dir", "@O/"],
        files: &["sweep_k.csv"],
    },
    Case {
        name: "sweep_r",
        args: &["sweep-r", "--config", TINY, "--out-dir", "@O/"],
        files: &["sweep_r.csv"],
    },
    Case {
        name: "ablation",
        args: &["ablation", "--config", TINY, "--out-dir", "@O/"],
        files: &["ablation.csv"],
    },
    Case {
        name: "heatmap",
        args: &[
            "heatmap",
            "@G/train_kasa.trace.jsonl",
            "@G/train_kasa_seed1.trace.jsonl",
            "--out",
            "@O/heatmap.csv",
        ],
        files: &["heatmap.csv"],
    },
];

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub fn blessing() -> bool {
    std::env::var_os("KASA_BLESS").is_some_and(|v| !v.is_empty() && v != "0")
}

fn expand(arg: &str, golden: &Path, out: &Path) -> String {
    if let Some(rest) = arg.strip_prefix("@G/") {
        golden.join(rest).display().to_string()
    } else if let Some(rest) = arg.strip_prefix("@O/") {
        out.join(rest).display().to_string()
    } else {
        arg.to_string()
    }
}

fn compare_or_bless(golden: &Path, name: &str, actual: &[u8]) -> Result<(), String> {
    let path = golden.join(name);
    if blessing() {
        fs::write(&path, actual).map_err(|e| format!("{}: {e}", path.display()))?;
        return Ok(());
    }
    let expected = fs::read(&path).map_err(|e| format!("{}: {e} (run with KASA_BLESS=1)", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("{name} differs from the pinned golden file"))
    }
}

/// Runs one case in a fresh directory under `scratch` and checks every output.
pub fn run_case(case: &Case, scratch: &Path) -> Result<(), String> {
    let golden = golden_dir();
    let out = scratch.join(case.name);
    fs::create_dir_all(&out).map_err(|e| e.to_string())?;
    let args: Vec<String> = case.args.iter().map(|a| expand(a, &golden, &out)).collect();
    let result = Command::new(env!("CARGO_BIN_EXE_kasa"))
        .args(&args)
        .current_dir(&out)
        .output()
        .map_err(|e| e.to_string())?;
    if !result.status.success() {
        return Err(format!(
            "{} exited with {:?}: {}",
            case.name,
            result.status.code(),
            String::from_utf8_lossy(&result.stderr)
        ));
    }
    compare_or_bless(&golden, &format!("{}.stdout", case.name), &result.stdout)?;
    for file in case.files {
        let bytes = fs::read(out.join(file)).map_err(|e| format!("{}: missing {file}: {e}", case.name))?;
        compare_or_bless(&golden, &format!("{}.{file}", case.name), &bytes)?;
    }
    Ok(())
}

/// Runs `kasa` with `args` in `dir` and returns (exit code, stdout, stderr).
pub fn kasa(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_kasa"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn kasa");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}
