//! INI-style run configuration.
//!
//! Sections are `[network]`, `[hyper]`, `[training]` and `[data]`. Parsing
//! starts from a base configuration and overrides only the keys present;
//! unknown sections or keys are rejected. [`RunConfig::to_canonical`]
//! writes every key in a fixed order, and parsing that text back yields an
//! identical value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::layers::TapPoint;
use crate::network::{ConvSpec, Fusion, NetworkConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub data: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            network: NetworkConfig::desk(),
            data: SynthSpec::default(),
        }
    }

    /// Full-size geometry on 100x100 patches.
    pub fn paper_scale() -> Self {
        RunConfig {
            network: NetworkConfig::paper(),
            data: SynthSpec {
                image_size: 100,
                vacuole_radius: (2, 6),
                grain_scale: 8,
                ..SynthSpec::default()
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, RunConfig::desk())
    }

    pub fn parse_with_base(text: &str, base: RunConfig) -> Result<Self> {
        let sections = parse_ini(text)?;
        let mut cfg = base;
        for (section, entries) in &sections {
            if !matches!(section.as_str(), "network" | "hyper" | "training" | "data") {
                return Err(Error::config(format!("unknown section [{section}]")));
            }
            for (key, value) in entries {
                match section.as_str() {
                    "data" => apply_data_key(&mut cfg.data, key, value)?,
                    _ => apply_network_key(&mut cfg.network, section, key, value)?,
                }
            }
        }
        cfg.network.validate()?;
        cfg.data.validate()?;
        Ok(cfg)
    }

    pub fn to_canonical(&self) -> String {
        let mut s = network_sections(&self.network);
        let d = &self.data;
        s.push_str("\n[data]\n");
        kv(&mut s, "image_size", d.image_size);
        kv(&mut s, "n_normal", d.n_normal);
        kv(&mut s, "n_abnormal", d.n_abnormal);
        kv(&mut s, "vacuole_count", pair(d.vacuole_count));
        kv(&mut s, "vacuole_radius", pair(d.vacuole_radius));
        kv(&mut s, "vacuole_intensity", d.vacuole_intensity);
        kv(&mut s, "grain_scale", d.grain_scale);
        kv(&mut s, "contrast", d.contrast);
        kv(&mut s, "seed", d.seed);
        s
    }
}

fn kv(s: &mut String, key: &str, value: impl std::fmt::Display) {
    writeln!(s, "{key} = {value}").expect("writing to a String");
}

fn list<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn pair(p: (usize, usize)) -> String {
    format!("{},{}", p.0, p.1)
}

/// Canonical `[network]`, `[hyper]` and `[training]` sections.
pub fn network_sections(c: &NetworkConfig) -> String {
    let mut s = String::from("[network]\n");
    kv(&mut s, "input_rows", c.input_rows);
    kv(&mut s, "input_cols", c.input_cols);
    kv(&mut s, "conv_maps", list(c.convs.iter().map(|v| v.maps)));
    kv(&mut s, "conv_filters", list(c.convs.iter().map(|v| v.filter)));
    kv(&mut s, "conv_strides", list(c.convs.iter().map(|v| v.stride)));
    kv(&mut s, "pool", c.pool);
    kv(&mut s, "dense", list(&c.dense));
    kv(&mut s, "classes", c.classes);
    s.push_str("\n[hyper]\n");
    kv(
        &mut s,
        "fusion",
        match c.hyper.fusion {
            Fusion::Hyper => "hyper",
            Fusion::TopOnly => "top_only",
        },
    );
    kv(&mut s, "out_neurons", c.hyper.out_neurons);
    kv(&mut s, "weights", list(&c.hyper.weights));
    kv(
        &mut s,
        "tap_point",
        match c.hyper.tap_point {
            TapPoint::PostPool => "post_pool",
            TapPoint::PrePool => "pre_pool",
        },
    );
    let t = &c.training;
    s.push_str("\n[training]\n");
    kv(&mut s, "lr_pretrain", t.lr_pretrain);
    kv(&mut s, "lr_finetune", t.lr_finetune);
    kv(&mut s, "batch_size", t.batch_size);
    kv(&mut s, "epochs_pretrain", t.epochs_pretrain);
    kv(&mut s, "epochs_finetune", t.epochs_finetune);
    kv(&mut s, "seed", t.seed);
    kv(&mut s, "early_stop_patience", t.early_stop_patience);
    kv(&mut s, "tied", t.tied);
    s
}

pub(crate) type Sections = BTreeMap<String, Vec<(String, String)>>;

/// Split INI text into sections of `key = value` pairs, keeping key order.
/// `#` and `;` start comment lines.
pub(crate) fn parse_ini(text: &str) -> Result<Sections> {
    let mut out: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            out.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
        let section = current
            .as_ref()
            .ok_or_else(|| Error::config(format!("line {}: key outside of any section", n + 1)))?;
        let key = key.trim().to_string();
        let entries = out.get_mut(section).expect("section inserted above");
        if entries.iter().any(|(k, _)| *k == key) {
            return Err(Error::config(format!("line {}: duplicate key {section}.{key}", n + 1)));
        }
        entries.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn value<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{section}.{key}: cannot parse {v:?}")))
}

fn values<T: FromStr>(section: &str, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| value(section, key, p.trim())).collect()
}

fn range(section: &str, key: &str, v: &str) -> Result<(usize, usize)> {
    match values::<usize>(section, key, v)?.as_slice() {
        [lo, hi] => Ok((*lo, *hi)),
        _ => Err(Error::config(format!("{section}.{key}: expected `min,max`, got {v:?}"))),
    }
}

fn set_conv_field(cfg: &mut NetworkConfig, parsed: Vec<usize>, set: fn(&mut ConvSpec, usize)) {
    if cfg.convs.len() != parsed.len() {
        cfg.convs.resize(parsed.len(), ConvSpec { maps: 1, filter: 3, stride: 1 });
    }
    for (spec, v) in cfg.convs.iter_mut().zip(parsed) {
        set(spec, v);
    }
}

fn apply_network_key(cfg: &mut NetworkConfig, section: &str, key: &str, v: &str) -> Result<()> {
    match (section, key) {
        ("network", "input_rows") => cfg.input_rows = value(section, key, v)?,
        ("network", "input_cols") => cfg.input_cols = value(section, key, v)?,
        ("network", "conv_maps") => set_conv_field(cfg, values(section, key, v)?, |s, x| s.maps = x),
        ("network", "conv_filters") => set_conv_field(cfg, values(section, key, v)?, |s, x| s.filter = x),
        ("network", "conv_strides") => set_conv_field(cfg, values(section, key, v)?, |s, x| s.stride = x),
        ("network", "pool") => cfg.pool = value(section, key, v)?,
        ("network", "dense") => {
            cfg.dense = if v.is_empty() {
                Vec::new()
            } else {
                values(section, key, v)?
            }
        }
        ("network", "classes") => cfg.classes = value(section, key, v)?,
        ("hyper", "fusion") => {
            cfg.hyper.fusion = match v {
                "hyper" => Fusion::Hyper,
                "top_only" => Fusion::TopOnly,
                _ => return Err(Error::config(format!("hyper.fusion must be hyper or top_only, got {v:?}"))),
            }
        }
        ("hyper", "out_neurons") => cfg.hyper.out_neurons = value(section, key, v)?,
        ("hyper", "weights") => cfg.hyper.weights = values(section, key, v)?,
        ("hyper", "tap_point") => {
            cfg.hyper.tap_point = match v {
                "post_pool" => TapPoint::PostPool,
                "pre_pool" => TapPoint::PrePool,
                _ => return Err(Error::config(format!("hyper.tap_point must be post_pool or pre_pool, got {v:?}"))),
            }
        }
        ("training", "lr_pretrain") => cfg.training.lr_pretrain = value(section, key, v)?,
        ("training", "lr_finetune") => cfg.training.lr_finetune = value(section, key, v)?,
        ("training", "batch_size") => cfg.training.batch_size = value(section, key, v)?,
        ("training", "epochs_pretrain") => cfg.training.epochs_pretrain = value(section, key, v)?,
        ("training", "epochs_finetune") => cfg.training.epochs_finetune = value(section, key, v)?,
        ("training", "seed") => cfg.training.seed = value(section, key, v)?,
        ("training", "early_stop_patience") => cfg.training.early_stop_patience = value(section, key, v)?,
        ("training", "tied") => cfg.training.tied = value(section, key, v)?,
        _ => return Err(Error::config(format!("unknown key {section}.{key}"))),
    }
    Ok(())
}

fn apply_data_key(d: &mut SynthSpec, key: &str, v: &str) -> Result<()> {
    let s = "data";
    match key {
        "image_size" => d.image_size = value(s, key, v)?,
        "n_normal" => d.n_normal = value(s, key, v)?,
        "n_abnormal" => d.n_abnormal = value(s, key, v)?,
        "vacuole_count" => d.vacuole_count = range(s, key, v)?,
        "vacuole_radius" => d.vacuole_radius = range(s, key, v)?,
        "vacuole_intensity" => d.vacuole_intensity = value(s, key, v)?,
        "grain_scale" => d.grain_scale = value(s, key, v)?,
        "contrast" => d.contrast = value(s, key, v)?,
        "seed" => d.seed = value(s, key, v)?,
        _ => return Err(Error::config(format!("unknown key data.{key}"))),
    }
    Ok(())
}

/// Parse only the network-related sections (as embedded in model files).
pub fn parse_network_sections(text: &str) -> Result<NetworkConfig> {
    let sections = parse_ini(text)?;
    let mut cfg = NetworkConfig::paper();
    for (section, entries) in &sections {
        for (key, v) in entries {
            match section.as_str() {
                "network" | "hyper" | "training" => apply_network_key(&mut cfg, section, key, v)?,
                _ => {}
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
