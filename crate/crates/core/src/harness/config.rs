//! Flat `key=value` config files and run manifests.
//!
//! Blank lines and everything after `#` are ignored. Every [`RunConfig`]
//! field is a key of the same name.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::trainer::RunConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected key=value, got {content:?}")))?;
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() {
            return Err(Error::Config(format!("line {line}: empty key")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!(
                "line {line}: key {key} already set on line {}",
                prev.line
            )));
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

fn parse_value<V: FromStr>(e: &Entry) -> Result<V> {
    e.value
        .parse()
        .map_err(|_| Error::Config(format!("line {}: invalid value {:?} for {}", e.line, e.value, e.key)))
}

macro_rules! run_config_keys {
    ($mac:ident) => {
        $mac!(
            t, t_end, alpha, beta, beta_mult, lr_lora, lr_g, adam_beta1, adam_beta2, adam_eps, weight_decay,
            batch_train, batch_calib, seq_len, p, seed, lora_rank, grad_clip, log_wall_time, sparsity_noise_free
        )
    };
}

macro_rules! key_list {
    ($($f:ident),*) => { &[$(stringify!($f)),*] };
}

/// Every accepted config key.
pub const RUN_CONFIG_KEYS: &[&str] = run_config_keys!(key_list);

/// Sets one field by name.
pub fn apply_entry(config: &mut RunConfig, e: &Entry) -> Result<()> {
    macro_rules! set {
        ($($f:ident),*) => {
            match e.key.as_str() {
                $(stringify!($f) => config.$f = parse_value(e)?,)*
                other => {
                    return Err(Error::Config(format!("line {}: unknown key {other}", e.line)))
                }
            }
        };
    }
    run_config_keys!(set);
    Ok(())
}

/// Defaults overridden by `text`, then validated.
pub fn run_config_from_text(text: &str) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    for e in parse_kv(text)? {
        apply_entry(&mut config, &e)?;
    }
    config.validate()?;
    Ok(config)
}

pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
    run_config_from_text(&text)
}

/// All fields as `key=value` lines, in declaration order.
pub fn run_config_to_text(config: &RunConfig) -> String {
    let mut out = String::new();
    macro_rules! emit {
        ($($f:ident),*) => { $(out.push_str(&format!("{}={}\n", stringify!($f), config.$f));)* };
    }
    run_config_keys!(emit);
    out
}

/// Ordered `key=value` record of one CLI run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, argv: &[String]) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m.set("argv", argv.join(" "));
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string().replace('\n', "\\n");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Adds every run-config field under `config.`.
    pub fn set_run_config(&mut self, config: &RunConfig) {
        for e in parse_kv(&run_config_to_text(config)).expect("serialized config parses") {
            self.set(&format!("config.{}", e.key), e.value);
        }
    }

    pub fn set_digest(&mut self, name: &str, path: &Path, sha256: &str) {
        self.set(&format!("data.{name}.path"), path.display());
        self.set(&format!("data.{name}.sha256"), sha256);
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Run config stored by [`Manifest::set_run_config`].
    pub fn run_config(&self) -> Result<RunConfig> {
        let text: String = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| format!("{k}={v}\n")))
            .collect();
        run_config_from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = Self::default();
        for e in parse_kv(text)? {
            m.entries.push((e.key, e.value));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_field_roundtrips() {
        let mut c = RunConfig::default();
        c.t = 77;
        c.t_end = 20;
        c.alpha = 1.25;
        c.lr_g = 3.3e-4;
        c.seed = 42;
        c.log_wall_time = true;
        c.sparsity_noise_free = false;
        let text = run_config_to_text(&c);
        assert_eq!(text.lines().count(), RUN_CONFIG_KEYS.len());
        assert_eq!(run_config_from_text(&text).unwrap(), c);
    }

    #[test]
    fn comments_blank_lines_and_defaults() {
        let c = run_config_from_text("# a run\n\np = 0.3  # target\n  seed=5\n").unwrap();
        assert_eq!(c.p, 0.3);
        assert_eq!(c.seed, 5);
        assert_eq!(c.t, RunConfig::default().t);
    }

    #[test]
    fn errors_name_the_line() {
        let msg = |t: &str| run_config_from_text(t).unwrap_err().to_string();
        assert!(msg("p=0.5\nbogus=1\n").contains("line 2"));
        assert!(msg("\n\nt=abc\n").contains("line 3"));
        assert!(msg("p\n").contains("line 1"));
        assert!(msg("p=0.1\np=0.2\n").contains("line 2"));
        assert!(matches!(run_config_from_text("p=1.5"), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_recovers_the_config() {
        let mut c = RunConfig::with_steps(10);
        c.p = 0.25;
        let mut m = Manifest::new("atp", &["atp".into(), "--config".into(), "x.cfg".into()]);
        m.set_run_config(&c);
        m.set_digest("train", Path::new("corpus.txt"), "abcd");
        let back = Manifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back.run_config().unwrap(), c);
        assert_eq!(back.get("data.train.sha256"), Some("abcd"));
        assert_eq!(back.get("command"), Some("atp"));
    }
}
