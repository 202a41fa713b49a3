//! `key=value` settings files and run manifests.
//!
//! A manifest is itself a settings file: replaying it with `--config` gives
//! the same resolved settings. Keys under `artifact.` hold output checksums
//! and `command` names the subcommand; both are ignored on replay apart from
//! a check that the command matches.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::Invalid;

pub const SEED_ENV: &str = "CAMERA_SEED";

pub fn parse_settings(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(k) => &raw[..k],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Invalid(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Invalid(format!("line {}: empty key", i + 1)).into());
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Invalid(format!("line {}: duplicate key {k}", i + 1)).into());
        }
    }
    Ok(out)
}

/// Resolves each setting from the flag, then the settings file, then the
/// default, and remembers the result for the manifest.
pub struct Resolver {
    command: &'static str,
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(command: &'static str, config: Option<&Path>) -> Result<Resolver> {
        let file = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_settings(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => BTreeMap::new(),
        };
        if let Some(c) = file.get("command") {
            if c != command {
                return Err(Invalid(format!("settings were recorded for `{c}`, not `{command}`")).into());
            }
        }
        Ok(Resolver {
            command,
            file,
            used: BTreeSet::new(),
            resolved: BTreeMap::new(),
        })
    }

    fn from_file<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        match self.file.get(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Invalid(format!("setting {key}={v}: {e}")).into()),
            None => Ok(None),
        }
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let file = self.from_file(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// A setting with no default.
    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        let file = self.from_file(key)?;
        let v = flag
            .or(file)
            .ok_or_else(|| Invalid(format!("missing required setting --{}", key.replace('_', "-"))))?;
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Switches: set by the flag or by `key=true` in the file.
    pub fn flag(&mut self, key: &str, flag: bool) -> Result<bool> {
        let file: Option<bool> = self.from_file(key)?;
        let v = flag || file.unwrap_or(false);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Seed with `CAMERA_SEED` between the settings file and the default.
    pub fn seed(&mut self, flag: Option<u64>, default: u64) -> Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|e| Invalid(format!("{SEED_ENV}={v}: {e}")))?,
            ),
            Err(_) => None,
        };
        let file = self.from_file("seed")?;
        let v = flag.or(file).or(env).unwrap_or(default);
        self.resolved.insert("seed".into(), v.to_string());
        Ok(v)
    }

    /// Fails on settings-file keys that no flag consumed.
    pub fn finish(self) -> Result<Manifest> {
        let unknown: Vec<&String> = self
            .file
            .keys()
            .filter(|k| !self.used.contains(*k) && *k != "command" && !k.starts_with("artifact."))
            .collect();
        if !unknown.is_empty() {
            return Err(Invalid(format!("unknown settings: {unknown:?}")).into());
        }
        Ok(Manifest {
            command: self.command,
            settings: self.resolved,
            artifacts: BTreeMap::new(),
        })
    }
}

pub struct Manifest {
    command: &'static str,
    settings: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    /// Records the checksum of a written output under `artifact.<name>.sha256`.
    pub fn artifact(&mut self, name: &str, bytes: &[u8]) {
        self.artifacts.insert(format!("artifact.{name}.sha256"), sha256_hex(bytes));
    }

    pub fn render(&self) -> String {
        let mut s = format!("# camera run manifest\ncommand={}\n", self.command);
        for (k, v) in self.settings.iter().chain(&self.artifacts) {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks() {
        let s = parse_settings("# header\n\nseed = 7 # trailing\nout=a.cams\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s["seed"], "7");
        assert_eq!(s["out"], "a.cams");
        assert!(parse_settings("novalue\n").is_err());
        assert!(parse_settings("a=1\na=2\n").is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "count=5\npositive=0.25\n").unwrap();
        let mut r = Resolver::new("gen", Some(&p)).unwrap();
        assert_eq!(r.get("count", Some(9usize), 1).unwrap(), 9);
        assert_eq!(r.get("positive", None, 0.4).unwrap(), 0.25);
        assert_eq!(r.get("frames", None, 64usize).unwrap(), 64);
        let m = r.finish().unwrap();
        let text = m.render();
        assert!(text.contains("count=9\n") && text.contains("positive=0.25\n") && text.contains("frames=64\n"));
    }

    #[test]
    fn unknown_keys_and_wrong_command_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "bogus=1\n").unwrap();
        let r = Resolver::new("gen", Some(&p)).unwrap();
        assert!(r.finish().is_err());
        std::fs::write(&p, "command=train\n").unwrap();
        assert!(Resolver::new("gen", Some(&p)).is_err());
    }

    #[test]
    fn manifest_replays_to_same_settings() {
        let mut r = Resolver::new("gen", None).unwrap();
        r.get("count", Some(3usize), 1).unwrap();
        r.get("positive", Some(0.1f64), 0.4).unwrap();
        let mut m = r.finish().unwrap();
        m.artifact("data", b"xyz");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        m.write(&p).unwrap();
        let mut again = Resolver::new("gen", Some(&p)).unwrap();
        again.get("count", None, 1usize).unwrap();
        again.get("positive", None, 0.4f64).unwrap();
        let m2 = again.finish().unwrap();
        assert_eq!(m2.settings, m.settings);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
