//! Leakage-safe stratified splitting.
//!
//! Overlapping windows share grid steps, so assigning them to different
//! splits would leak. Windows are first grouped into blocks: maximal chains
//! of same-subject windows whose consecutive starts are less than one width
//! apart. Windows in different blocks share no grid step, so blocks are the
//! unit of assignment. Blocks carrying hypo windows are dealt out first
//! against per-split hypo targets (largest remaining deficit wins), then the
//! pure-normo blocks against total-size targets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

use super::LabeledWindow;

/// Window indices for the three splits, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn split(&self, index: usize) -> &[usize] {
        match index {
            0 => &self.train,
            1 => &self.val,
            _ => &self.test,
        }
    }
}

struct Block {
    windows: Vec<usize>,
    hypo: usize,
}

fn build_blocks(windows: &[LabeledWindow]) -> Vec<Block> {
    // Group indices per subject in first-appearance order, ascending start.
    let mut order: Vec<&str> = Vec::new();
    let mut by_subject: std::collections::HashMap<&str, Vec<usize>> =
        std::collections::HashMap::new();
    for (i, w) in windows.iter().enumerate() {
        let entry = by_subject.entry(w.subject_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(w.subject_id.as_str());
        }
        entry.push(i);
    }
    let mut blocks = Vec::new();
    for subject in order {
        let mut indices = by_subject.remove(subject).unwrap();
        indices.sort_by_key(|&i| windows[i].start_index);
        let mut current: Vec<usize> = Vec::new();
        for &i in &indices {
            if let Some(&prev) = current.last() {
                let gap = windows[i].start_index - windows[prev].start_index;
                if gap >= windows[prev].width() {
                    blocks.push(finish_block(std::mem::take(&mut current), windows));
                }
            }
            current.push(i);
        }
        if !current.is_empty() {
            blocks.push(finish_block(current, windows));
        }
    }
    blocks
}

fn finish_block(indices: Vec<usize>, windows: &[LabeledWindow]) -> Block {
    let hypo = indices.iter().filter(|&&i| windows[i].label.is_hypo()).count();
    Block {
        windows: indices,
        hypo,
    }
}

/// Assign each block to the split with the largest remaining deficit.
fn deal_blocks(
    blocks: Vec<&Block>,
    targets: [f64; 3],
    amount: impl Fn(&Block) -> f64,
    assigned: &mut [Vec<usize>; 3],
    filled: &mut [f64; 3],
) {
    for block in blocks {
        let mut best = 0usize;
        let mut best_deficit = f64::MIN;
        for s in 0..3 {
            let deficit = targets[s] - filled[s];
            if deficit > best_deficit {
                best_deficit = deficit;
                best = s;
            }
        }
        filled[best] += amount(block);
        assigned[best].extend(block.windows.iter().copied());
    }
}

/// Split windows into train/val/test by `fractions`, stratifying on the
/// hypo class at block granularity.
pub fn stratified_split(
    windows: &[LabeledWindow],
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must each lie in (0, 1)"
        )));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must sum to 1"
        )));
    }
    let n_hypo = windows.iter().filter(|w| w.label.is_hypo()).count();
    let n_normo = windows.len() - n_hypo;
    if n_hypo < 10 || n_normo < 10 {
        return Err(Error::InsufficientClass(format!(
            "need at least 10 windows per class to split, got {n_hypo} hypo and {n_normo} normo"
        )));
    }

    let blocks = build_blocks(windows);
    let mut hypo_blocks: Vec<&Block> = blocks.iter().filter(|b| b.hypo > 0).collect();
    let mut pure_blocks: Vec<&Block> = blocks.iter().filter(|b| b.hypo == 0).collect();
    let mut rng_hypo = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split:hypo"));
    let mut rng_pure = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split:pure"));
    hypo_blocks.shuffle(&mut rng_hypo);
    pure_blocks.shuffle(&mut rng_pure);

    let mut assigned: [Vec<usize>; 3] = Default::default();

    // Hypo-bearing blocks against hypo-count targets.
    let hypo_targets = fractions.map(|f| f * n_hypo as f64);
    let mut hypo_filled = [0.0f64; 3];
    deal_blocks(
        hypo_blocks,
        hypo_targets,
        |b| b.hypo as f64,
        &mut assigned,
        &mut hypo_filled,
    );

    // Pure blocks against total-size targets, counting what is already
    // assigned.
    let total_targets = fractions.map(|f| f * windows.len() as f64);
    let mut total_filled = [0.0f64; 3];
    for s in 0..3 {
        total_filled[s] = assigned[s].len() as f64;
    }
    deal_blocks(
        pure_blocks,
        total_targets,
        |b| b.windows.len() as f64,
        &mut assigned,
        &mut total_filled,
    );

    for (s, name) in ["train", "val", "test"].iter().enumerate() {
        if assigned[s].is_empty() {
            return Err(Error::InsufficientClass(format!(
                "too few independent blocks: the {name} split received no windows"
            )));
        }
        if !assigned[s].iter().any(|&i| windows[i].label.is_hypo()) {
            return Err(Error::InsufficientClass(format!(
                "too few hypo-bearing blocks: the {name} split received none"
            )));
        }
    }

    let [mut train, mut val, mut test] = assigned;
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitAssignment {
        train,
        val,
        test,
        seed,
    })
}
