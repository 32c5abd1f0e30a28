//! Hyperparameters shared by flags and the TOML config file.
//!
//! Every option is optional at both layers; `overlay` gives flags precedence
//! over the file, and each command fills what is still missing from the
//! library defaults.

use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use serde::Deserialize;

/// Config file layout: one table per command.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub train_bpe: BpeOpts,
    pub learn_table: TableOpts,
    pub rank: RankOpts,
    pub bench: BenchOpts,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

macro_rules! overlay {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            /// Fields set in `self` win over those in `file`.
            pub fn overlay(self, file: $ty) -> $ty {
                $ty { $($field: self.$field.or(file.$field)),* }
            }
        }
    };
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct BpeOpts {
    /// Target dictionary size: characters + end-of-word + merges.
    #[arg(long)]
    pub merges: Option<usize>,
    /// Keep only the most frequent words.
    #[arg(long)]
    pub max_vocab: Option<usize>,
}
overlay!(BpeOpts { merges, max_vocab });

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TableOpts {
    /// Words with exclusive single codes.
    #[arg(long)]
    pub k_freq: Option<usize>,
    /// Row codes (d1). Defaults to the smallest square table that fits.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Column codes (d2).
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model training epochs per round.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub d_emb: Option<usize>,
    #[arg(long)]
    pub d_hid: Option<usize>,
    /// Largest problem solved exactly; larger ones use the greedy solver.
    #[arg(long)]
    pub exact_cap: Option<usize>,
    #[arg(long)]
    pub max_vocab: Option<usize>,
}
overlay!(TableOpts {
    k_freq,
    rows,
    cols,
    rounds,
    seed,
    epochs,
    lr,
    batch_size,
    clip_norm,
    d_emb,
    d_hid,
    exact_cap,
    max_vocab,
});

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RankOpts {
    /// Number of contexts.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub v_out: Option<usize>,
    /// Embedding dimension.
    #[arg(long)]
    pub d: Option<usize>,
    /// Mixture context dimension.
    #[arg(long)]
    pub d_context: Option<usize>,
    #[arg(long)]
    pub truth_rank: Option<usize>,
    /// Mixture counts to fit; 1 is the single softmax.
    #[arg(long, value_delimiter = ',')]
    pub mixtures: Option<Vec<usize>>,
    /// Number of seeds, starting at `--seed`.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub rank_tol: Option<f64>,
}
overlay!(RankOpts {
    n,
    v_out,
    d,
    d_context,
    truth_rank,
    mixtures,
    seeds,
    seed,
    iters,
    lr,
    restarts,
    rank_tol,
});

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct BenchOpts {
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Output sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub mixtures: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also compare a coded layer against a flat one, as `VOCAB:CODES`.
    #[arg(long)]
    pub compare: Option<String>,
    /// Fan the batch out over threads.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub parallel: Option<bool>,
}
overlay!(BenchOpts {
    batch,
    d,
    sizes,
    mixtures,
    reps,
    warmup,
    seed,
    compare,
    parallel,
});
