//! Variable groups and their physical channel layout.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pressure levels (hPa) of the full upper-air stack.
pub const PRESSURE_LEVELS: [u32; 13] = [50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000];

pub const UPPER_AIR_GROUPS: [&str; 5] = ["z", "q", "u", "v", "t"];
pub const SURFACE_VARIABLES: [&str; 5] = ["u10", "v10", "t2m", "msl", "sp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    UpperAir,
    Surface,
}

impl VariableKind {
    pub fn tag(self) -> u8 {
        match self {
            VariableKind::UpperAir => 0,
            VariableKind::Surface => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(VariableKind::UpperAir),
            1 => Some(VariableKind::Surface),
            _ => None,
        }
    }
}

/// Training stage at which a group becomes available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableGroup {
    pub name: String,
    pub kind: VariableKind,
    /// Number of physical channels: pressure levels for upper-air groups,
    /// bundled single-level variables for surface groups.
    pub levels: usize,
    pub stage: Stage,
}

impl VariableGroup {
    pub fn upper_air(name: &str, levels: usize) -> Self {
        VariableGroup {
            name: name.to_string(),
            kind: VariableKind::UpperAir,
            levels,
            stage: Stage::Initial,
        }
    }

    pub fn surface(name: &str, levels: usize) -> Self {
        VariableGroup {
            name: name.to_string(),
            kind: VariableKind::Surface,
            levels,
            stage: Stage::Incremental,
        }
    }

    /// Physical channel names, in channel order.
    pub fn channel_names(&self) -> Vec<String> {
        match self.kind {
            VariableKind::UpperAir => pressure_levels(self.levels)
                .into_iter()
                .map(|p| format!("{}{p}", self.name))
                .collect(),
            VariableKind::Surface if self.levels == 1 => vec![self.name.clone()],
            VariableKind::Surface => (0..self.levels)
                .map(|i| match SURFACE_VARIABLES.get(i) {
                    Some(v) => v.to_string(),
                    None => format!("{}{i}", self.name),
                })
                .collect(),
        }
    }
}

/// `count` levels spread evenly over [`PRESSURE_LEVELS`]; the three-level
/// desk stack is 250/500/850.
pub fn pressure_levels(count: usize) -> Vec<u32> {
    match count {
        0 => vec![],
        1 => vec![500],
        3 => vec![250, 500, 850],
        n if n >= PRESSURE_LEVELS.len() => {
            let mut v = PRESSURE_LEVELS.to_vec();
            v.extend((PRESSURE_LEVELS.len()..n).map(|i| 1000 + i as u32));
            v
        }
        n => (0..n)
            .map(|i| PRESSURE_LEVELS[i * (PRESSURE_LEVELS.len() - 1) / (n - 1)])
            .collect(),
    }
}

/// Ordered variable groups. Channels are laid out group by group, so index
/// ranges are contiguous and disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableCatalog {
    groups: Vec<VariableGroup>,
}

impl VariableCatalog {
    pub fn new(groups: Vec<VariableGroup>) -> Result<Self> {
        let mut cat = VariableCatalog { groups: Vec::new() };
        cat.extend(groups)?;
        Ok(cat)
    }

    /// Five upper-air groups (Z, Q, U, V, T) of `levels` levels each.
    pub fn upper_air(levels: usize) -> Self {
        VariableCatalog {
            groups: UPPER_AIR_GROUPS
                .iter()
                .map(|n| VariableGroup::upper_air(n, levels))
                .collect(),
        }
    }

    /// The single incremental group bundling the five surface variables.
    pub fn surface_groups() -> Vec<VariableGroup> {
        vec![VariableGroup::surface("sv", SURFACE_VARIABLES.len())]
    }

    /// Upper-air catalog followed by the surface group.
    pub fn full(levels: usize) -> Self {
        let mut cat = Self::upper_air(levels);
        cat.extend(Self::surface_groups())
            .expect("surface names are distinct from upper-air names");
        cat
    }

    /// Append groups; names must be new and level counts positive.
    pub fn extend(&mut self, groups: Vec<VariableGroup>) -> Result<()> {
        for g in groups {
            if g.levels == 0 {
                return Err(Error::Config(format!("group `{}` has no levels", g.name)));
            }
            if self.groups.iter().any(|h| h.name == g.name) {
                return Err(Error::DuplicateGroup(g.name));
            }
            self.groups.push(g);
        }
        Ok(())
    }

    pub fn groups(&self) -> &[VariableGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.groups.iter().map(|g| g.levels).sum()
    }

    /// `N`: channels of initial-stage groups.
    pub fn initial_channels(&self) -> usize {
        self.stage_channels(Stage::Initial)
    }

    /// `M`: channels of incremental-stage groups.
    pub fn incremental_channels(&self) -> usize {
        self.stage_channels(Stage::Incremental)
    }

    fn stage_channels(&self, stage: Stage) -> usize {
        self.groups
            .iter()
            .filter(|g| g.stage == stage)
            .map(|g| g.levels)
            .sum()
    }

    pub fn group_index(&self, name: &str) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g.name == name)
            .ok_or_else(|| Error::UnknownGroup(name.to_string()))
    }

    pub fn range(&self, group: usize) -> Range<usize> {
        let start: usize = self.groups[..group].iter().map(|g| g.levels).sum();
        start..start + self.groups[group].levels
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.groups.iter().flat_map(|g| g.channel_names()).collect()
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channel_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownChannel(name.to_string()))
    }

    /// Kind of each physical channel, in channel order.
    pub fn channel_kinds(&self) -> Vec<VariableKind> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(g.kind, g.levels))
            .collect()
    }

    /// Restriction to the groups of one stage.
    pub fn stage(&self, stage: Stage) -> VariableCatalog {
        VariableCatalog {
            groups: self.groups.iter().filter(|g| g.stage == stage).cloned().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_catalog_shape() {
        let cat = VariableCatalog::full(3);
        assert_eq!(cat.initial_channels(), 15);
        assert_eq!(cat.incremental_channels(), 5);
        assert_eq!(cat.len(), 6);
        assert_eq!(cat.range(5), 15..20);
        assert_eq!(cat.channel_names()[0], "z250");
        assert_eq!(&cat.channel_names()[15..], &SURFACE_VARIABLES.map(String::from));
    }

    #[test]
    fn ranges_are_disjoint_and_cover() {
        let cat = VariableCatalog::full(13);
        let mut next = 0;
        for g in 0..cat.len() {
            let r = cat.range(g);
            assert_eq!(r.start, next);
            next = r.end;
        }
        assert_eq!(next, cat.channels());
        assert_eq!(cat.initial_channels(), 65);
    }

    #[test]
    fn duplicate_group_rejected() {
        let mut cat = VariableCatalog::upper_air(3);
        let err = cat.extend(vec![VariableGroup::upper_air("t", 3)]).unwrap_err();
        assert!(matches!(err, Error::DuplicateGroup(_)));
    }

    #[test]
    fn thirteen_levels_match_table() {
        assert_eq!(pressure_levels(13), PRESSURE_LEVELS.to_vec());
        assert_eq!(pressure_levels(2), vec![50, 1000]);
    }
}
