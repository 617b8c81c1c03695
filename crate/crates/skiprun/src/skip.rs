//! Skip planning: turning a user-level request (mode, amount, keep-last flag)
//! into the exact set of (layer, sublayer) pairs the forward pass omits.
//!
//! Layer indices are 1-based everywhere in this module and in all reports;
//! only the forward pass translates to array offsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which sublayers a skip request removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    /// Remove whole transformer blocks (attention and MLP).
    Block,
    /// Remove only the attention sublayer.
    Attention,
    /// Remove only the MLP sublayer.
    Mlp,
}

impl SkipMode {
    /// Short name used in spec strings and report columns.
    pub fn short(&self) -> &'static str {
        match self {
            SkipMode::Block => "block",
            SkipMode::Attention => "attn",
            SkipMode::Mlp => "mlp",
        }
    }
}

impl std::fmt::Display for SkipMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

/// How many of the deepest layers are affected: an explicit count or a
/// fraction of the network to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SkipAmount {
    Count(usize),
    KeepFraction(f64),
}

/// A user-level skip request, prior to resolution against a layer count.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipSpec {
    pub mode: SkipMode,
    pub amount: SkipAmount,
    /// Shift the skip window up by one so the final block stays intact,
    /// with the same number of layers skipped.
    pub keep_last: bool,
}

impl SkipSpec {
    pub fn new(mode: SkipMode, amount: SkipAmount, keep_last: bool) -> Self {
        SkipSpec {
            mode,
            amount,
            keep_last,
        }
    }

    /// Convenience constructor for an explicit layer count.
    pub fn count(mode: SkipMode, k: usize) -> Self {
        SkipSpec::new(mode, SkipAmount::Count(k), false)
    }

    /// Parses the textual syntax `mode,k=<int>|keep=<fraction>[,keep_last=<bool>]`,
    /// e.g. `attn,keep=0.66,keep_last=false` or `block,k=3`.
    pub fn parse(s: &str) -> Result<Self> {
        let err = |token: &str, reason: &str| Error::SpecParse {
            token: token.to_string(),
            reason: reason.to_string(),
        };
        let mut parts = s.split(',').map(str::trim);
        let mode = match parts.next() {
            Some("attn") => SkipMode::Attention,
            Some("mlp") => SkipMode::Mlp,
            Some("block") => SkipMode::Block,
            Some(other) => return Err(err(other, "expected mode attn|mlp|block")),
            None => return Err(err(s, "empty spec")),
        };
        let mut amount = None;
        let mut keep_last = false;
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| err(part, "expected key=value"))?;
            match key {
                "k" => {
                    let k: usize = value
                        .parse()
                        .map_err(|_| err(part, "k must be a non-negative integer"))?;
                    if amount.replace(SkipAmount::Count(k)).is_some() {
                        return Err(err(part, "amount given more than once"));
                    }
                }
                "keep" => {
                    let f: f64 = value
                        .parse()
                        .map_err(|_| err(part, "keep must be a number"))?;
                    if !(f > 0.0 && f <= 1.0) {
                        return Err(err(part, "keep fraction must be in (0, 1]"));
                    }
                    if amount.replace(SkipAmount::KeepFraction(f)).is_some() {
                        return Err(err(part, "amount given more than once"));
                    }
                }
                "keep_last" => {
                    keep_last = value
                        .parse()
                        .map_err(|_| err(part, "keep_last must be true or false"))?;
                }
                _ => return Err(err(part, "unknown key")),
            }
        }
        let amount =
            amount.ok_or_else(|| err(s, "missing amount: give k=<int> or keep=<fraction>"))?;
        Ok(SkipSpec::new(mode, amount, keep_last))
    }

    /// Number of layers skipped once resolved against `n_layers`. A keep
    /// fraction f maps to `round(L·(1−f))`, half away from zero.
    pub fn resolved_k(&self, n_layers: usize) -> Result<usize> {
        if n_layers == 0 {
            return Err(Error::Config("model must have at least one layer".into()));
        }
        let k = match self.amount {
            SkipAmount::Count(k) => k,
            SkipAmount::KeepFraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!(
                        "keep fraction must be in (0, 1], got {f}"
                    )));
                }
                (n_layers as f64 * (1.0 - f)).round() as usize
            }
        };
        let limit = if self.keep_last {
            n_layers - 1
        } else {
            n_layers
        };
        if k > limit {
            return Err(Error::Config(format!(
                "k = {k} out of range for L = {n_layers} (keep_last = {})",
                self.keep_last
            )));
        }
        Ok(k)
    }

    /// Resolves the request into concrete (layer, sublayer) pairs. Skipped
    /// indices are the deepest k layers `{L−k+1, …, L}`, shifted down by one
    /// when `keep_last` so layer L stays full.
    pub fn resolve(&self, n_layers: usize) -> Result<SkipSet> {
        let k = self.resolved_k(n_layers)?;
        let sublayer = match self.mode {
            SkipMode::Block => Sublayer::Both,
            SkipMode::Attention => Sublayer::Attention,
            SkipMode::Mlp => Sublayer::Mlp,
        };
        let first = if self.keep_last {
            n_layers - k
        } else {
            n_layers - k + 1
        };
        let entries = (first..first + k)
            .map(|layer| SkipEntry { layer, sublayer })
            .collect();
        Ok(SkipSet { entries })
    }
}

/// Which sublayer(s) of one layer are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sublayer {
    Attention,
    Mlp,
    Both,
}

/// One skipped layer. `layer` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipEntry {
    pub layer: usize,
    pub sublayer: Sublayer,
}

/// Resolved set of skipped (layer, sublayer) pairs: layer indices are unique,
/// sorted, and 1-based.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SkipSet {
    entries: Vec<SkipEntry>,
}

/// Per-layer skip flags in forward-pass order (index 0 = first layer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerFlags {
    pub skip_attention: bool,
    pub skip_mlp: bool,
}

impl SkipSet {
    /// The empty set: nothing skipped, i.e. the full model.
    pub fn empty() -> Self {
        SkipSet::default()
    }

    /// Builds a set from arbitrary entries. Entries for the same layer are
    /// merged (attention + mlp become both); indices must be ≥ 1.
    pub fn from_entries(entries: impl IntoIterator<Item = SkipEntry>) -> Result<Self> {
        let mut merged: Vec<SkipEntry> = Vec::new();
        for e in entries {
            if e.layer == 0 {
                return Err(Error::Config("layer indices are 1-based".into()));
            }
            match merged.iter_mut().find(|m| m.layer == e.layer) {
                Some(m) => {
                    if m.sublayer != e.sublayer {
                        m.sublayer = Sublayer::Both;
                    }
                }
                None => merged.push(e),
            }
        }
        merged.sort_by_key(|e| e.layer);
        Ok(SkipSet { entries: merged })
    }

    pub fn entries(&self) -> &[SkipEntry] {
        &self.entries
    }

    /// Number of affected layers (the k every report states).
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Expands to per-layer flags for a model with `n_layers` layers.
    pub fn layer_flags(&self, n_layers: usize) -> Result<Vec<LayerFlags>> {
        let mut flags = vec![LayerFlags::default(); n_layers];
        for e in &self.entries {
            if e.layer > n_layers {
                return Err(Error::Config(format!(
                    "skip set names layer {} but the model has only {n_layers} layers",
                    e.layer
                )));
            }
            let f = &mut flags[e.layer - 1];
            match e.sublayer {
                Sublayer::Attention => f.skip_attention = true,
                Sublayer::Mlp => f.skip_mlp = true,
                Sublayer::Both => {
                    f.skip_attention = true;
                    f.skip_mlp = true;
                }
            }
        }
        Ok(flags)
    }

    /// 1-based indices whose attention sublayer is skipped.
    pub fn attention_layers(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| matches!(e.sublayer, Sublayer::Attention | Sublayer::Both))
            .map(|e| e.layer)
            .collect()
    }

    /// 1-based indices whose MLP sublayer is skipped.
    pub fn mlp_layers(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| matches!(e.sublayer, Sublayer::Mlp | Sublayer::Both))
            .map(|e| e.layer)
            .collect()
    }
}

/// Summary counts for reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipSummary {
    pub skipped_attention: usize,
    pub skipped_mlp: usize,
    pub k: usize,
    /// Retained-layer percentage, rounded to the nearest integer.
    pub retained_pct: u32,
}

impl SkipSummary {
    /// Label like "75%".
    pub fn label(&self) -> String {
        format!("{}%", self.retained_pct)
    }
}

/// Describes a resolved set against a layer count: sublayer counts and the
/// retained-percentage label `round(100·(1−k/L))`.
pub fn describe(set: &SkipSet, n_layers: usize) -> SkipSummary {
    let k = set.k();
    let retained_pct =
        (100.0 * (n_layers.saturating_sub(k)) as f64 / n_layers as f64).round() as u32;
    SkipSummary {
        skipped_attention: set.attention_layers().len(),
        skipped_mlp: set.mlp_layers().len(),
        k,
        retained_pct,
    }
}

/// Report label for a configuration, e.g. `100% full`, `75% attn`,
/// `66% block +last`.
pub fn config_label(
    mode: Option<SkipMode>,
    set: &SkipSet,
    keep_last: bool,
    n_layers: usize,
) -> String {
    let pct = describe(set, n_layers).retained_pct;
    let mode_word = match mode {
        None => "full",
        Some(m) if set.is_empty() => {
            let _ = m;
            "full"
        }
        Some(m) => m.short(),
    };
    let mut label = format!("{pct}% {mode_word}");
    if keep_last && !set.is_empty() {
        label.push_str(" +last");
    }
    label
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layers(set: &SkipSet) -> Vec<usize> {
        set.entries().iter().map(|e| e.layer).collect()
    }

    #[test]
    fn resolve_attention_last_three() {
        let set = SkipSpec::count(SkipMode::Attention, 3).resolve(10).unwrap();
        assert_eq!(set.attention_layers(), vec![8, 9, 10]);
        assert!(set.mlp_layers().is_empty());
    }

    #[test]
    fn resolve_block_keep_last_shifts_window() {
        let spec = SkipSpec::new(SkipMode::Block, SkipAmount::Count(3), true);
        let set = spec.resolve(10).unwrap();
        assert_eq!(layers(&set), vec![7, 8, 9]);
        assert_eq!(set.attention_layers(), vec![7, 8, 9]);
        assert_eq!(set.mlp_layers(), vec![7, 8, 9]);
    }

    #[test]
    fn resolve_keep_fraction_rounds() {
        let spec = SkipSpec::new(SkipMode::Block, SkipAmount::KeepFraction(0.75), false);
        let set = spec.resolve(32).unwrap();
        assert_eq!(set.k(), 8);
        assert_eq!(layers(&set), (25..=32).collect::<Vec<_>>());
        // keep = 0.66 on L = 32: round(32·0.34) = 11 layers skipped.
        let spec = SkipSpec::new(SkipMode::Attention, SkipAmount::KeepFraction(0.66), false);
        assert_eq!(spec.resolve(32).unwrap().k(), 11);
    }

    #[test]
    fn resolve_k_zero_is_empty_for_all_modes() {
        for mode in [SkipMode::Block, SkipMode::Attention, SkipMode::Mlp] {
            for keep_last in [false, true] {
                let spec = SkipSpec::new(mode, SkipAmount::Count(0), keep_last);
                assert!(spec.resolve(6).unwrap().is_empty());
            }
        }
    }

    #[test]
    fn resolve_out_of_range() {
        assert!(matches!(
            SkipSpec::count(SkipMode::Block, 11).resolve(10),
            Err(Error::Config(_))
        ));
        // keep_last caps k at L−1.
        let spec = SkipSpec::new(SkipMode::Block, SkipAmount::Count(10), true);
        assert!(matches!(spec.resolve(10), Err(Error::Config(_))));
        let spec = SkipSpec::new(SkipMode::Block, SkipAmount::Count(9), true);
        assert_eq!(spec.resolve(10).unwrap().k(), 9);
    }

    #[test]
    fn describe_labels() {
        let l = 32;
        assert_eq!(describe(&SkipSet::empty(), l).label(), "100%");
        let set = SkipSpec::count(SkipMode::Block, 8).resolve(l).unwrap();
        assert_eq!(describe(&set, l).label(), "75%");
        let set = SkipSpec::count(SkipMode::Attention, 11).resolve(l).unwrap();
        let summary = describe(&set, l);
        assert_eq!(summary.label(), "66%");
        assert_eq!(summary.skipped_attention, 11);
        assert_eq!(summary.skipped_mlp, 0);
    }

    #[test]
    fn parse_full_syntax() {
        let spec = SkipSpec::parse("attn,k=3,keep_last=false").unwrap();
        assert_eq!(spec, SkipSpec::count(SkipMode::Attention, 3));
        let spec = SkipSpec::parse("block,keep=0.75").unwrap();
        assert_eq!(
            spec,
            SkipSpec::new(SkipMode::Block, SkipAmount::KeepFraction(0.75), false)
        );
        let spec = SkipSpec::parse("mlp,k=2,keep_last=true").unwrap();
        assert!(spec.keep_last);
    }

    #[test]
    fn parse_errors_name_the_token() {
        let err = SkipSpec::parse("attn,keep=1.5").unwrap_err();
        match err {
            Error::SpecParse { token, .. } => assert_eq!(token, "keep=1.5"),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(SkipSpec::parse("conv,k=3").is_err());
        assert!(SkipSpec::parse("attn").is_err());
        assert!(SkipSpec::parse("attn,k=1,keep=0.5").is_err());
        assert!(SkipSpec::parse("attn,k=-1").is_err());
    }

    #[test]
    fn from_entries_merges_sublayers() {
        let set = SkipSet::from_entries([
            SkipEntry {
                layer: 4,
                sublayer: Sublayer::Attention,
            },
            SkipEntry {
                layer: 4,
                sublayer: Sublayer::Mlp,
            },
            SkipEntry {
                layer: 2,
                sublayer: Sublayer::Attention,
            },
        ])
        .unwrap();
        assert_eq!(layers(&set), vec![2, 4]);
        assert_eq!(set.entries()[1].sublayer, Sublayer::Both);
        assert!(SkipSet::from_entries([SkipEntry {
            layer: 0,
            sublayer: Sublayer::Mlp
        }])
        .is_err());
    }

    #[test]
    fn layer_flags_rejects_out_of_range() {
        let set = SkipSpec::count(SkipMode::Mlp, 2).resolve(8).unwrap();
        assert!(set.layer_flags(8).is_ok());
        assert!(set.layer_flags(4).is_err());
    }

    proptest! {
        #[test]
        fn prop_keep_last_excludes_final_layer(
            l in 1usize..64,
            k_frac in 0.0f64..1.0,
            mode_ix in 0usize..3
        ) {
            let mode = [SkipMode::Block, SkipMode::Attention, SkipMode::Mlp][mode_ix];
            let k = ((l - 1) as f64 * k_frac).floor() as usize;
            let spec = SkipSpec::new(mode, SkipAmount::Count(k), true);
            let set = spec.resolve(l).unwrap();
            prop_assert_eq!(set.k(), k);
            prop_assert!(set.entries().iter().all(|e| e.layer < l || l == 0));
            prop_assert!(!layers(&set).contains(&l));
        }

        #[test]
        fn prop_resolve_window_is_contiguous_suffix(
            l in 1usize..64,
            k_frac in 0.0f64..=1.0
        ) {
            let k = (l as f64 * k_frac).floor() as usize;
            let set = SkipSpec::count(SkipMode::Block, k).resolve(l).unwrap();
            let ls = layers(&set);
            prop_assert_eq!(ls.len(), k);
            if k > 0 {
                prop_assert_eq!(ls[0], l - k + 1);
                prop_assert_eq!(*ls.last().unwrap(), l);
            }
        }

        #[test]
        fn prop_fraction_resolution_matches_round(l in 1usize..80, f in 0.01f64..=1.0) {
            let spec = SkipSpec::new(SkipMode::Attention, SkipAmount::KeepFraction(f), false);
            let expect = (l as f64 * (1.0 - f)).round() as usize;
            prop_assert_eq!(spec.resolved_k(l).unwrap(), expect);
        }
    }
}
