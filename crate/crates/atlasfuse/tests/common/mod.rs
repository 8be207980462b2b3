#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

pub const BIN: &str = env!("CARGO_BIN_EXE_atlasfuse");

/// Short registration and fitting schedule for small grids.
pub const QUICK_TOML: &str = r#"
[registration]
pyramid_levels = [2, 1]
rigid_iters = 60
affine_iters = 60
deform_levels = [2]
deform_iters = 80

[fusion.fit]
iters = 20
n_pseudo_queries = 1

[metrics]
cl_dice = false
"#;

/// Runs the CLI and returns stdout, panicking with stderr on failure.
pub fn atlasfuse<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> String {
    let out = Command::new(BIN).args(args).env("ATLASFUSE_THREADS", "1").output().expect("spawn atlasfuse");
    let shown: Vec<_> = args.iter().map(|a| a.as_ref().to_string_lossy().into_owned()).collect();
    assert!(out.status.success(), "atlasfuse {shown:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Writes a case TOML next to a phantom pair made by `atlasfuse phantom`.
/// `top` holds bare keys, `tables` whole tables.
pub fn case_toml(pair: &Path, top: &str, tables: &str) -> PathBuf {
    let text = format!(
        r#"seed = 5
{top}
[atlas]
image = "atlas_image.nii.gz"
mask = "atlas_mask.nii.gz"
[query]
image = "query_image.nii.gz"
gt = "query_mask.nii.gz"
{tables}
{QUICK_TOML}"#
    );
    let path = pair.join("case.toml");
    std::fs::write(&path, text).unwrap();
    path
}
