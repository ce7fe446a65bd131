use std::path::Path;

use evifed_federation::FedConfig;

use crate::cli::GlobalArgs;
use crate::error::{HarnessError, Result};

/// Parses a TOML configuration. Every field of the run configuration is
/// accepted; only `T` is required.
pub fn parse_config(text: &str) -> Result<FedConfig> {
    toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string().trim_end().to_string()))
}

pub fn read_config(path: &Path) -> Result<FedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

/// Seed flags and `--deterministic` layered over a configuration.
pub fn apply_overrides(cfg: &mut FedConfig, args: &GlobalArgs) {
    if let Some(s) = args.seed_data {
        cfg.seed_data = s;
    }
    if let Some(s) = args.seed_init {
        cfg.seed_init = s;
    }
    if let Some(s) = args.seed_shuffle {
        cfg.seed_shuffle = s;
    }
    cfg.deterministic |= args.deterministic;
}

/// Reads `--config`, applies overrides and validates.
pub fn load(args: &GlobalArgs) -> Result<FedConfig> {
    let path = args
        .config
        .as_deref()
        .ok_or_else(|| HarnessError::Config("--config is required for this command".into()))?;
    let mut cfg = read_config(path)?;
    apply_overrides(&mut cfg, args);
    cfg.validate()?;
    Ok(cfg)
}

/// The configuration as TOML, every field spelled out.
pub fn to_toml(cfg: &FedConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| HarnessError::Runtime(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_t_is_named() {
        let err = parse_config("rounds = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("`T`"), "{err}");
    }

    #[test]
    fn unknown_and_mistyped_fields_are_reported() {
        let err = parse_config("T = 4\nroundz = 3\n").unwrap_err().to_string();
        assert!(err.contains("roundz"), "{err}");
        let err = parse_config("T = 4\n[backbone]\nheads = \"four\"\n").unwrap_err().to_string();
        assert!(err.contains("heads"), "{err}");
    }

    #[test]
    fn toml_round_trip_covers_every_field() {
        let mut cfg = FedConfig::new(5);
        cfg.lambda_ramp = Some(3);
        cfg.mu = 0.35;
        cfg.backbone.blocks = 6;
        let back = parse_config(&to_toml(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(parse_config("T = 5").unwrap(), FedConfig::new(5));
    }
}
