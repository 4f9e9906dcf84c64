//! TOML configuration files for training runs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Parses a training config; missing keys take their defaults, unknown keys
/// are rejected.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    parse_train_config(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// Every field of `cfg`, as a config file.
pub fn render(cfg: &TrainConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Invalid(format!("config serialization: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = render(&TrainConfig::default()).unwrap();
        assert!(text.contains("[model.backbone]"));
        assert!(text.contains("variant = \"c4star\"") || text.contains("variant = \"plain\""));
        assert_eq!(parse_train_config(&text).unwrap(), TrainConfig::default());
    }

    #[test]
    fn partial_file_and_dotted_keys() {
        let cfg = parse_train_config("steps = 50\nmodel.backbone.variant = \"c8star\"\nmodel.backbone.base_width = 16\n").unwrap();
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.model.backbone.variant, crate::backbone::Variant::C8star);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_train_config("stpes = 5\n").is_err());
        assert!(parse_train_config("[optimizer]\nlearning_rate = 1.0\n").is_err());
    }
}
