//! Electrode montage: names, 2-D scalp coordinates on the unit disc, and
//! named electrode groups (occipital, parietal, ...). Loaded from a TOML
//! file; a generated ring layout stands in when no file is given.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Montage {
    /// electrode name -> (x, y) within the unit disc
    pub electrodes: BTreeMap<String, (f64, f64)>,
    /// group name -> electrode names
    #[serde(default)]
    pub groups: BTreeMap<String, Vec<String>>,
}

impl Montage {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
        let m: Montage = toml::from_str(&text).map_err(|e| Error::Montage(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Montage(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io_at(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (x, y)) in &self.electrodes {
            if x * x + y * y > 1.0 + 1e-9 {
                return Err(Error::Montage(format!(
                    "electrode {name} at ({x}, {y}) lies outside the unit disc"
                )));
            }
        }
        for (group, members) in &self.groups {
            for m in members {
                if !self.electrodes.contains_key(m) {
                    return Err(Error::Montage(format!(
                        "group {group} references unknown electrode {m}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Generated layout: electrodes on concentric rings, named e000..,
    /// with coarse groups by vertical position (frontal on top, occipital
    /// at the bottom).
    pub fn ring(n: usize) -> Self {
        let mut electrodes = BTreeMap::new();
        let mut placed = 0usize;
        let mut ring = 0usize;
        let mut coords: Vec<(f64, f64)> = Vec::with_capacity(n);
        while placed < n {
            let capacity = if ring == 0 { 1 } else { 6 * ring };
            let radius = if n == 1 {
                0.0
            } else {
                0.95 * ring as f64 / ring_count(n).max(1) as f64
            };
            let take = capacity.min(n - placed);
            for k in 0..take {
                let angle = std::f64::consts::TAU * k as f64 / take as f64
                    + if ring % 2 == 0 { 0.0 } else { std::f64::consts::PI / take as f64 };
                coords.push((radius * angle.cos(), radius * angle.sin()));
            }
            placed += take;
            ring += 1;
        }
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, (x, y)) in coords.into_iter().enumerate() {
            let name = format!("e{i:03}");
            let group = if y > 0.33 {
                "frontal"
            } else if y < -0.33 {
                "occipital"
            } else if x.abs() > 0.5 {
                "temporal"
            } else if y < 0.0 {
                "parietal"
            } else {
                "central"
            };
            groups.entry(group.to_string()).or_default().push(name.clone());
            electrodes.insert(name, (x, y));
        }
        Montage { electrodes, groups }
    }

    pub fn len(&self) -> usize {
        self.electrodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.electrodes.is_empty()
    }

    /// Electrode names in index order (e000, e001, ... for generated
    /// layouts; insertion-sorted names for loaded ones).
    pub fn names(&self) -> Vec<&String> {
        self.electrodes.keys().collect()
    }

    pub fn coords_in_order(&self) -> Vec<(f64, f64)> {
        self.electrodes.values().copied().collect()
    }

    /// Indices (into name order) of a named group.
    pub fn group_indices(&self, group: &str) -> Result<Vec<usize>> {
        let members = self
            .groups
            .get(group)
            .ok_or_else(|| Error::Montage(format!("unknown electrode group {group}")))?;
        let names: Vec<&String> = self.names();
        members
            .iter()
            .map(|m| {
                names
                    .iter()
                    .position(|n| *n == m)
                    .ok_or_else(|| Error::Montage(format!("group member {m} not in montage")))
            })
            .collect()
    }

    /// Checks the montage covers exactly `n` electrodes.
    pub fn check_coverage(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(Error::Montage(format!(
                "montage has {} electrodes, data has {n}",
                self.len()
            )));
        }
        Ok(())
    }
}

fn ring_count(n: usize) -> usize {
    // rings of capacity 1, 6, 12, 18, ...
    let mut total = 1usize;
    let mut ring = 0usize;
    while total < n {
        ring += 1;
        total += 6 * ring;
    }
    ring
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_layout_covers_n_within_disc() {
        for n in [1usize, 7, 16, 64] {
            let m = Montage::ring(n);
            assert_eq!(m.len(), n);
            m.validate().unwrap();
        }
    }

    #[test]
    fn groups_partition_generated_layout() {
        let m = Montage::ring(64);
        let total: usize = m.groups.values().map(|v| v.len()).sum();
        assert_eq!(total, 64);
        m.check_coverage(64).unwrap();
        assert!(m.check_coverage(63).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("montage.toml");
        let m = Montage::ring(9);
        m.save(&path).unwrap();
        let back = Montage::load(&path).unwrap();
        assert_eq!(back.len(), 9);
        assert_eq!(back.names(), m.names());
    }

    #[test]
    fn out_of_disc_coordinates_rejected() {
        let mut m = Montage::ring(4);
        m.electrodes.insert("bad".into(), (1.5, 0.0));
        assert!(m.validate().is_err());
    }

    #[test]
    fn unknown_group_member_rejected() {
        let mut m = Montage::ring(4);
        m.groups.insert("g".into(), vec!["missing".into()]);
        assert!(m.validate().is_err());
    }
}
