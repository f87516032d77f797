//! Merging of config files and flag overrides.

use std::fs;
use std::path::Path;

use pchvae::config::KeyValues;
use pchvae::train::TrainConfig;
use pchvae::{Error, Result};

use crate::TrainFlags;

pub const CONFIG_ECHO: &str = "config.txt";

fn read_config(path: &Path) -> Result<KeyValues> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    KeyValues::parse(&text)
}

/// File settings, then flags, then `extra` (highest precedence).
pub fn train_config(flags: &TrainFlags, extra: &[(&str, String)]) -> Result<TrainConfig> {
    let mut kv = match &flags.config {
        Some(p) => read_config(p)?,
        None => KeyValues::new(),
    };
    if let Some(v) = flags.epochs {
        kv.set("epochs", v);
    }
    if let Some(v) = flags.lr {
        kv.set("lr", v);
    }
    if let Some(v) = flags.batch_size {
        kv.set("batch_size", v);
    }
    if let Some(v) = flags.base_channels {
        kv.set("base_channels", v);
    }
    for s in &flags.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    for (k, v) in extra {
        kv.set(k, v);
    }
    let known = TrainConfig::default().to_kv();
    if let Some(k) = kv.keys().find(|k| known.get_str(k).is_none()) {
        return Err(Error::Config(format!("unknown config key {k:?}")));
    }
    let cfg = TrainConfig::from_kv(&kv)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
