//! Runtime byte accounting split into the four training-memory categories.
//!
//! Counts logical tensor bytes only. Every tensor the engine, optimizers and
//! stabilizers keep alive across op boundaries is recorded here when it is
//! created and again when it is released.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Params,
    Gradients,
    OptimStates,
    Activations,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Params,
        Category::Gradients,
        Category::OptimStates,
        Category::Activations,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub ordinal: u64,
    pub category: Category,
    pub delta: i64,
}

#[derive(Debug, Clone, Default)]
pub struct MemoryLedger {
    current: [u64; 4],
    peak: [u64; 4],
    live: [u64; 4],
    allocations: [u64; 4],
    ordinal: u64,
    events: Option<Vec<LedgerEvent>>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// A ledger that also keeps an ordered log of every delta.
    pub fn with_event_log() -> Self {
        MemoryLedger {
            events: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn record(&mut self, category: Category, delta: i64) -> Result<()> {
        let i = category.index();
        let cur = self.current[i];
        let next = cur as i128 + delta as i128;
        if next < 0 {
            return Err(Error::LedgerUnderflow {
                category,
                current: cur,
                delta,
            });
        }
        self.current[i] = next as u64;
        self.peak[i] = self.peak[i].max(self.current[i]);
        self.ordinal += 1;
        if let Some(log) = &mut self.events {
            log.push(LedgerEvent {
                ordinal: self.ordinal,
                category,
                delta,
            });
        }
        Ok(())
    }

    /// Record a tensor coming into existence.
    pub fn alloc(&mut self, category: Category, bytes: u64) -> Result<()> {
        self.record(category, bytes as i64)?;
        self.live[category.index()] += 1;
        self.allocations[category.index()] += 1;
        Ok(())
    }

    /// Record a tensor being dropped.
    pub fn free(&mut self, category: Category, bytes: u64) -> Result<()> {
        let i = category.index();
        if self.live[i] == 0 {
            return Err(Error::LedgerUnderflow {
                category,
                current: self.current[i],
                delta: -(bytes as i64),
            });
        }
        self.record(category, -(bytes as i64))?;
        self.live[i] -= 1;
        Ok(())
    }

    pub fn current(&self, category: Category) -> u64 {
        self.current[category.index()]
    }

    pub fn peak(&self, category: Category) -> u64 {
        self.peak[category.index()]
    }

    /// Tensors currently alive in `category`.
    pub fn live_tensors(&self, category: Category) -> u64 {
        self.live[category.index()]
    }

    /// Total tensors ever allocated in `category`.
    pub fn allocations(&self, category: Category) -> u64 {
        self.allocations[category.index()]
    }

    /// Restart peak tracking from the current balances.
    pub fn reset_peaks(&mut self) {
        self.peak = self.current;
    }

    pub fn events(&self) -> Option<&[LedgerEvent]> {
        self.events.as_deref()
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        let total_peak: u64 = self.peak.iter().sum();
        let categories = Category::ALL
            .iter()
            .map(|&c| {
                let peak = self.peak(c);
                let share = if total_peak == 0 {
                    0.0
                } else {
                    100.0 * peak as f64 / total_peak as f64
                };
                (
                    c,
                    CategoryUsage {
                        current_bytes: self.current(c),
                        peak_bytes: peak,
                        peak_share_percent: share,
                    },
                )
            })
            .collect();
        MemorySnapshot { categories }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryUsage {
    pub current_bytes: u64,
    pub peak_bytes: u64,
    /// Percentage of the summed per-category peaks.
    pub peak_share_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub categories: BTreeMap<Category, CategoryUsage>,
}

impl MemorySnapshot {
    pub fn peak(&self, category: Category) -> u64 {
        self.categories[&category].peak_bytes
    }

    pub fn current(&self, category: Category) -> u64 {
        self.categories[&category].current_bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alloc_then_free() {
        let mut l = MemoryLedger::new();
        l.record(Category::Gradients, 100).unwrap();
        l.record(Category::Gradients, -100).unwrap();
        assert_eq!(l.current(Category::Gradients), 0);
        assert_eq!(l.peak(Category::Gradients), 100);
    }

    #[test]
    fn interleaved_peak() {
        let mut l = MemoryLedger::new();
        for d in [50, 70, -50] {
            l.record(Category::Activations, d).unwrap();
        }
        assert_eq!(l.peak(Category::Activations), 120);
        assert_eq!(l.current(Category::Activations), 70);
    }

    #[test]
    fn double_free_is_an_error() {
        let mut l = MemoryLedger::new();
        assert!(matches!(
            l.record(Category::Gradients, -100),
            Err(Error::LedgerUnderflow { .. })
        ));
        assert!(l.free(Category::Params, 0).is_err());
    }

    #[test]
    fn snapshot_has_four_categories() {
        let mut l = MemoryLedger::new();
        l.alloc(Category::Params, 300).unwrap();
        l.alloc(Category::Activations, 100).unwrap();
        let s = l.snapshot();
        assert_eq!(s.categories.len(), 4);
        assert_eq!(s.categories[&Category::Params].peak_share_percent, 75.0);
    }

    proptest! {
        #[test]
        fn balances_match_event_sums(deltas in proptest::collection::vec((0usize..4, 0i64..1000, any::<bool>()), 0..200)) {
            let mut l = MemoryLedger::with_event_log();
            let mut last_peak = [0u64; 4];
            for (ci, d, neg) in deltas {
                let c = Category::ALL[ci];
                let delta = if neg { -d } else { d };
                let _ = l.record(c, delta);
                for c in Category::ALL {
                    prop_assert!(l.peak(c) >= l.current(c));
                    prop_assert!(l.peak(c) >= last_peak[c as usize]);
                    last_peak[c as usize] = l.peak(c);
                }
            }
            for c in Category::ALL {
                let sum: i64 = l.events().unwrap().iter().filter(|e| e.category == c).map(|e| e.delta).sum();
                prop_assert_eq!(sum as u64, l.current(c));
            }
        }
    }
}
