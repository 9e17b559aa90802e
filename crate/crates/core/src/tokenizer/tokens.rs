use crate::error::{Error, Result};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MARSTOKS";

/// Code indices per scale; grid `s` is `schedule[s]^2` row-major entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiScaleTokenMap {
    pub schedule: Vec<usize>,
    pub grids: Vec<Vec<u32>>,
}

impl MultiScaleTokenMap {
    pub fn new(schedule: Vec<usize>, grids: Vec<Vec<u32>>) -> Result<Self> {
        if schedule.len() != grids.len() {
            return Err(Error::Shape(format!(
                "{} grids for a {}-scale schedule",
                grids.len(),
                schedule.len()
            )));
        }
        for (k, g) in schedule.iter().zip(&grids) {
            if g.len() != k * k {
                return Err(Error::Shape(format!("scale {k} grid holds {} indices", g.len())));
            }
        }
        Ok(Self { schedule, grids })
    }

    pub fn validate_vocab(&self, vocab: usize) -> Result<()> {
        match self.grids.iter().flatten().find(|&&i| i as usize >= vocab) {
            Some(i) => Err(Error::InvalidInput(format!("token {i} outside vocabulary {vocab}"))),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.grids.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.schedule.len() as u32).to_le_bytes());
        for &k in &self.schedule {
            out.extend_from_slice(&(k as u32).to_le_bytes());
        }
        for &i in self.grids.iter().flatten() {
            out.extend_from_slice(&i.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("token map: {m}"));
        if b.len() < 12 || &b[..8] != MAGIC {
            return Err(bad("missing MARSTOKS header"));
        }
        let words: Vec<u32> = b[8..]
            .chunks(4)
            .map(|c| c.try_into().map(u32::from_le_bytes).map_err(|_| bad("truncated")))
            .collect::<Result<_>>()?;
        let n = words[0] as usize;
        if words.len() < 1 + n {
            return Err(bad("truncated schedule"));
        }
        let schedule: Vec<usize> = words[1..1 + n].iter().map(|&k| k as usize).collect();
        let total: usize = schedule.iter().map(|k| k * k).sum();
        if words.len() != 1 + n + total {
            return Err(bad("index count does not match schedule"));
        }
        let mut grids = Vec::new();
        let mut off = 1 + n;
        for k in &schedule {
            grids.push(words[off..off + k * k].to_vec());
            off += k * k;
        }
        Self::new(schedule, grids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
