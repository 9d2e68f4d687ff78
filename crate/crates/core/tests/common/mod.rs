#![allow(dead_code)]

pub mod oracles;

use std::path::PathBuf;

use hiertune::config::{read_ini, RunConfig};
use hiertune::LabelSet;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn demo_hierarchy() -> PathBuf {
    repo_root().join("data/demo_hierarchy.tsv")
}

/// The shipped desk-scale synthetic config.
pub fn desk_config() -> RunConfig {
    let map = read_ini(&repo_root().join("configs/synthetic.ini")).expect("configs/synthetic.ini");
    RunConfig::from_map(&map).expect("valid desk config")
}

/// 3 fine classes, 2 regions, 2 training samples, short prompts.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("synthetic.n_fine", "3"),
        ("synthetic.n_mid", "2"),
        ("synthetic.n_coarse", "1"),
        ("synthetic.dim", "8"),
        ("synthetic.regions", "2"),
        ("synthetic.labels_max", "2"),
        ("synthetic.train", "2"),
        ("synthetic.val", "2"),
        ("synthetic.test", "2"),
        ("prompt.m_pos", "4"),
        ("prompt.m_neg", "4"),
        ("backbone.token_dim", "8"),
        ("backbone.logit_scale", "10"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

pub fn set(items: &[&str]) -> LabelSet {
    items.iter().map(|s| s.to_string()).collect()
}

pub fn to_vecs(sets: &[LabelSet]) -> Vec<Vec<String>> {
    sets.iter().map(|s| s.iter().cloned().collect()).collect()
}
