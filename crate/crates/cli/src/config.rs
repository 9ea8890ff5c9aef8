//! Decode settings merged from flags, a config file, and defaults.

use std::path::Path;

use dopra_core::{DecodeConfig, Strategy};

use crate::error::CliError;

/// Decode flags; `None` means "not given on the command line".
#[derive(Debug, Clone, Default, clap::Args)]
pub struct DecodeFlags {
    /// greedy, beam or dopra
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Penalty strength
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Maximum rollbacks per position
    #[arg(long)]
    pub beta: Option<usize>,
    /// Coordinate overlap that triggers a rollback
    #[arg(long)]
    pub r: Option<usize>,
    /// Attention window size
    #[arg(long)]
    pub k: Option<usize>,
    /// Coordinate history length (defaults to k)
    #[arg(long)]
    pub l: Option<usize>,
    /// Window scale factor
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Candidates per beam
    #[arg(long = "ncan")]
    pub n_can: Option<usize>,
    /// Number of beams
    #[arg(long = "nbeam")]
    pub n_beam: Option<usize>,
    /// Zero-based penalized layer
    #[arg(long)]
    pub layer: Option<usize>,
    /// Maximum answer tokens
    #[arg(long = "max-new")]
    pub max_new_tokens: Option<usize>,
    /// End-of-sequence token id
    #[arg(long)]
    pub eos: Option<u32>,
    /// Length normalization exponent for final beam ranking
    #[arg(long = "length-penalty")]
    pub length_penalty: Option<f64>,
    /// Disable rollback
    #[arg(long = "no-rollback")]
    pub no_rollback: bool,
}

/// Applies `file` (TOML, keys named like the config fields) and then `flags`
/// over the defaults. An unset `l` follows `k`.
pub fn merge(flags: &DecodeFlags, file: Option<&Path>) -> Result<DecodeConfig, CliError> {
    let (mut cfg, l_in_file) = match file {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
            parse_file(&text).map_err(|e| CliError::io(path.display(), e))?
        }
        None => (DecodeConfig::default(), false),
    };
    macro_rules! overlay {
        ($($field:ident),*) => {$(
            if let Some(v) = flags.$field {
                cfg.$field = v;
            }
        )*};
    }
    overlay!(
        strategy,
        alpha,
        beta,
        r,
        k,
        l,
        sigma,
        n_can,
        n_beam,
        layer,
        max_new_tokens,
        length_penalty
    );
    if flags.eos.is_some() {
        cfg.eos = flags.eos;
    }
    if flags.no_rollback {
        cfg.rollback = false;
    }
    if flags.l.is_none() && !l_in_file {
        cfg.l = cfg.k;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a config file; also reports whether it sets `l`.
pub fn parse_file(text: &str) -> Result<(DecodeConfig, bool), toml::de::Error> {
    let table: toml::Table = toml::from_str(text)?;
    let has_l = table.contains_key("l");
    let cfg: DecodeConfig = toml::from_str(text)?;
    Ok((cfg, has_l))
}
