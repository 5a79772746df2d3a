//! Parameter and MAC accounting by module path, and the ablation sweeps.
//!
//! MACs come from a shape-only walk of the model: every conv, transposed
//! conv and matmul books its exact count under the module path that ran it.

use crate::autodiff::{path_has_prefix, MacCounts, ParamStore};
use crate::error::Result;
use crate::grid::{GridConfig, GridFormer};
use std::collections::BTreeSet;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileEntry {
    pub path: String,
    pub params: usize,
    pub macs: MacCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub config: GridConfig,
    /// `(n, h, w)` of the traced input.
    pub input: (usize, usize, usize),
    pub params: usize,
    pub macs: MacCounts,
    /// Parameters and MACs inside attention scopes (q/k/v projections and
    /// the attention products).
    pub attention_params: usize,
    pub attention_macs: u64,
    /// Every path prefix up to the requested depth, in path order.
    pub entries: Vec<ProfileEntry>,
}

fn is_attention(path: &str) -> bool {
    path.split('.').any(|s| s == "attn")
}

fn prefixes(path: &str, depth: usize) -> impl Iterator<Item = String> + '_ {
    let parts: Vec<&str> = path.split('.').collect();
    (1..=depth.min(parts.len())).map(move |k| parts[..k].join("."))
}

/// Counts for `config` on an `n x 3 x h x w` input; `depth` limits how many
/// path segments the tree shows.
pub fn profile(config: &GridConfig, n: usize, h: usize, w: usize, depth: usize) -> Result<Profile> {
    let mut store = ParamStore::<f32>::new();
    let model = GridFormer::new(config.clone(), &mut store, 0)?;
    let tape = model.trace_meta(n, h, w)?;
    let mut paths = BTreeSet::new();
    for p in store.paths() {
        paths.extend(prefixes(p, depth));
    }
    for scope in tape.costs().keys().filter(|s| !s.is_empty()) {
        paths.extend(prefixes(scope, depth));
    }
    let entries = paths
        .into_iter()
        .map(|path| ProfileEntry {
            params: store.numel_under(&path),
            macs: tape.costs_under(&path),
            path,
        })
        .collect();
    let mut macs = MacCounts::default();
    let mut attention_macs = 0;
    for (scope, c) in tape.costs() {
        macs.merge(c);
        if is_attention(scope) {
            attention_macs += c.total();
        }
    }
    let attention_params = store.iter().filter(|(_, p)| is_attention(p.path())).map(|(_, p)| p.numel()).sum();
    Ok(Profile {
        config: config.clone(),
        input: (n, h, w),
        params: store.numel(),
        macs,
        attention_params,
        attention_macs,
        entries,
    })
}

impl Profile {
    /// Sum over the direct children of `path` (or the roots for `""`).
    pub fn children<'a>(&'a self, path: &'a str) -> impl Iterator<Item = &'a ProfileEntry> + 'a {
        let depth = if path.is_empty() { 1 } else { path.split('.').count() + 1 };
        self.entries
            .iter()
            .filter(move |e| e.path.split('.').count() == depth && (path.is_empty() || path_has_prefix(&e.path, path)))
    }

    pub fn entry(&self, path: &str) -> Option<&ProfileEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    pub fn summary(&self) -> String {
        let widths: Vec<String> = (0..self.config.rows).map(|r| self.config.row_channels(r).to_string()).collect();
        let (n, h, w) = self.input;
        let mut s = String::new();
        let _ = writeln!(s, "input {n}x3x{h}x{w}");
        let _ = writeln!(s, "rows {} widths {}", self.config.rows, widths.join("/"));
        let _ = writeln!(s, "params {} ({:.2}M)", self.params, self.params as f64 / 1e6);
        let _ = writeln!(
            s,
            "macs {} ({:.2}G): conv {} deconv {} matmul {}",
            self.macs.total(),
            self.macs.total() as f64 / 1e9,
            self.macs.conv,
            self.macs.conv_transpose,
            self.macs.matmul
        );
        let _ = writeln!(s, "attention params {} macs {}", self.attention_params, self.attention_macs);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,params,conv_macs,deconv_macs,matmul_macs,total_macs\n");
        for e in &self.entries {
            let m = &e.macs;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.path,
                e.params,
                m.conv,
                m.conv_transpose,
                m.matmul,
                m.total()
            );
        }
        s
    }
}

/// One configuration of an ablation sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub study: &'static str,
    pub variant: String,
    pub config: GridConfig,
    pub params: usize,
    pub macs: u64,
    pub attention_params: usize,
    pub attention_macs: u64,
    /// Published full-scale figures for this row at 256x256, when known:
    /// millions of parameters and billions of MACs.
    pub reference: Option<(f64, f64)>,
}

fn flags(on: [bool; 3], names: [&str; 3]) -> String {
    let parts: Vec<String> = names
        .iter()
        .zip(on)
        .map(|(n, v)| format!("{}{n}", if v { "+" } else { "-" }))
        .collect();
    parts.join(" ")
}

/// The attention sweep (sampling, channel split, local enhancement switched
/// on cumulatively) and the block sweep (dense connections, local fusion,
/// local skip switched on cumulatively) around `base`.
pub fn ablation_configs(base: &GridConfig) -> Vec<(&'static str, String, GridConfig, Option<(f64, f64)>)> {
    let attention = [
        ([false, false, false], (38.08, 322.26)),
        ([true, false, false], (34.91, 237.79)),
        ([true, true, false], (26.88, 227.65)),
        ([true, true, true], (30.12, 251.35)),
    ];
    let block = [
        ([false, false, false], (27.99, 253.57)),
        ([true, false, false], (32.78, 284.87)),
        ([true, true, false], (30.12, 251.35)),
        ([true, true, true], (30.12, 251.35)),
    ];
    let mut out = Vec::new();
    for (on, reference) in attention {
        let cfg = GridConfig {
            use_feature_sampling: on[0],
            use_channel_split: on[1],
            use_local_enhancement: on[2],
            ..base.clone()
        };
        out.push(("attention", flags(on, ["FS", "CS", "LE"]), cfg, Some(reference)));
    }
    for (on, reference) in block {
        let cfg = GridConfig {
            use_dense: on[0],
            use_local_fusion: on[1],
            use_local_skip: on[2],
            ..base.clone()
        };
        out.push(("block", flags(on, ["DC", "LF", "LSC"]), cfg, Some(reference)));
    }
    out
}

/// Profiles every ablation variant of `base` on an `h x w` input. The
/// reference column is only kept when `base` is the full-width preset.
pub fn ablation_table(base: &GridConfig, h: usize, w: usize) -> Result<Vec<AblationRow>> {
    let full = *base == GridConfig::default();
    ablation_configs(base)
        .into_iter()
        .map(|(study, variant, config, reference)| {
            let p = profile(&config, 1, h, w, 0)?;
            Ok(AblationRow {
                study,
                variant,
                params: p.params,
                macs: p.macs.total(),
                attention_params: p.attention_params,
                attention_macs: p.attention_macs,
                reference: reference.filter(|_| full),
                config,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("study,variant,params,macs,attention_params,attention_macs,reference_params_m,reference_macs_g\n");
    for r in rows {
        let (rp, rm) = r.reference.map_or((String::new(), String::new()), |(p, m)| (p.to_string(), m.to_string()));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{rp},{rm}",
            r.study, r.variant, r.params, r.macs, r.attention_params, r.attention_macs
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_are_additive_over_children() {
        let cfg = GridConfig::preset("micro").unwrap();
        let p = profile(&cfg, 1, 32, 32, 3).unwrap();
        let kids: Vec<_> = p.children("").collect();
        assert!(!kids.is_empty());
        assert_eq!(kids.iter().map(|e| e.params).sum::<usize>(), p.params);
        assert_eq!(kids.iter().map(|e| e.macs.total()).sum::<u64>(), p.macs.total());
        for e in kids {
            let grand: Vec<_> = p.children(&e.path).collect();
            if !grand.is_empty() {
                assert_eq!(grand.iter().map(|g| g.macs.total()).sum::<u64>(), e.macs.total(), "{}", e.path);
            }
        }
        assert!(p.to_csv().lines().count() == p.entries.len() + 1);
    }

    #[test]
    fn batch_scales_macs_and_not_params() {
        let cfg = GridConfig::preset("micro").unwrap();
        let one = profile(&cfg, 1, 32, 32, 1).unwrap();
        let three = profile(&cfg, 3, 32, 32, 1).unwrap();
        assert_eq!(one.params, three.params);
        assert_eq!(3 * one.macs.total(), three.macs.total());
        assert_eq!(3 * one.attention_macs, three.attention_macs);
    }

    #[test]
    fn small_preset_widths() {
        let p = profile(&GridConfig::preset("gridformer-s").unwrap(), 1, 64, 64, 1).unwrap();
        assert!(p.summary().contains("widths 32/64/128"), "{}", p.summary());
    }

    #[test]
    fn ablation_directions_on_the_tiny_grid() {
        let rows = ablation_table(&GridConfig::preset("tiny").unwrap(), 64, 64).unwrap();
        let get = |study: &str, v: &str| rows.iter().find(|r| r.study == study && r.variant == v).unwrap();
        let (no_fs, fs) = (get("attention", "-FS -CS -LE"), get("attention", "+FS -CS -LE"));
        assert!(fs.attention_macs < no_fs.attention_macs);
        assert_eq!(fs.attention_params, no_fs.attention_params);
        let cs = get("attention", "+FS +CS -LE");
        assert!(fs.params > cs.params);
        assert!(get("attention", "+FS +CS +LE").params > cs.params);
        assert!(get("block", "+DC -LF -LSC").params > get("block", "-DC -LF -LSC").params);
        assert!(rows.iter().all(|r| r.reference.is_none()));
        assert_eq!(ablation_csv(&rows).lines().count(), rows.len() + 1);
    }
}
