use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

const SPLIT_STREAM: u64 = 0x5e11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    DdpmTrain,
    DdpmVal,
    UnetTrain,
    UnetVal,
    Test,
}

impl SplitRole {
    pub const ALL: [SplitRole; 5] = [
        SplitRole::DdpmTrain,
        SplitRole::DdpmVal,
        SplitRole::UnetTrain,
        SplitRole::UnetVal,
        SplitRole::Test,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub ddpm_train: usize,
    pub ddpm_val: usize,
    pub unet_train: usize,
    pub unet_val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, role: SplitRole) -> usize {
        match role {
            SplitRole::DdpmTrain => self.ddpm_train,
            SplitRole::DdpmVal => self.ddpm_val,
            SplitRole::UnetTrain => self.unet_train,
            SplitRole::UnetVal => self.unet_val,
            SplitRole::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        SplitRole::ALL.iter().map(|&r| self.get(r)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub ddpm_train: Vec<String>,
    pub ddpm_val: Vec<String>,
    pub unet_train: Vec<String>,
    pub unet_val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn get(&self, role: SplitRole) -> &[String] {
        match role {
            SplitRole::DdpmTrain => &self.ddpm_train,
            SplitRole::DdpmVal => &self.ddpm_val,
            SplitRole::UnetTrain => &self.unet_train,
            SplitRole::UnetVal => &self.unet_val,
            SplitRole::Test => &self.test,
        }
    }

    pub fn role_of(&self, patient: &str) -> Option<SplitRole> {
        SplitRole::ALL
            .into_iter()
            .find(|&r| self.get(r).iter().any(|p| p == patient))
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        SplitRole::ALL
            .iter()
            .flat_map(|&r| self.get(r))
            .all(|p| seen.insert(p))
    }
}

/// Seeded shuffle of the sorted ids, then contiguous blocks in role order.
pub fn split_by_patient(ids: &[String], counts: SplitCounts, seed: u64) -> Result<SplitPlan> {
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::InvalidArgument("duplicate patient ids".into()));
    }
    if counts.total() > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "split needs {} patients, only {} available",
            counts.total(),
            ids.len()
        )));
    }
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    RngStream::new(seed, SPLIT_STREAM).shuffle(&mut order);
    let mut it = order.into_iter();
    let mut take = |n| it.by_ref().take(n).collect::<Vec<_>>();
    Ok(SplitPlan {
        ddpm_train: take(counts.ddpm_train),
        ddpm_val: take(counts.ddpm_val),
        unet_train: take(counts.unet_train),
        unet_val: take(counts.unet_val),
        test: take(counts.test),
        seed,
    })
}
