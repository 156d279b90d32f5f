//! Stored-activation accounting.
//!
//! Counts elements of activations held for the backward pass, tagged by
//! category. Parameters and their gradients are never counted.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    /// Inputs and hidden activations of coupling blocks inside an autoencoder stack.
    CouplingStack,
    /// Features and frames at autoencoder/predictor boundaries.
    StageBoundary,
    /// Recurrent-cell and attention internals of the predictor.
    Predictor,
    /// Per-timestep predictor state snapshots.
    States,
    /// Per-timestep attention gate tensors.
    Gates,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::CouplingStack,
        Category::StageBoundary,
        Category::Predictor,
        Category::States,
        Category::Gates,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::CouplingStack => "coupling_stack",
            Category::StageBoundary => "stage_boundary",
            Category::Predictor => "predictor",
            Category::States => "states",
            Category::Gates => "gates",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryLedger {
    current: [usize; 5],
    peak: [usize; 5],
    total_current: usize,
    total_peak: usize,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn alloc(&mut self, cat: Category, elems: usize) {
        let s = cat.slot();
        self.current[s] += elems;
        self.peak[s] = self.peak[s].max(self.current[s]);
        self.total_current += elems;
        self.total_peak = self.total_peak.max(self.total_current);
    }

    pub fn free(&mut self, cat: Category, elems: usize) {
        let s = cat.slot();
        assert!(
            self.current[s] >= elems,
            "ledger underflow in {}: freeing {elems} of {}",
            cat.name(),
            self.current[s]
        );
        self.current[s] -= elems;
        self.total_current -= elems;
    }

    pub fn current(&self, cat: Category) -> usize {
        self.current[cat.slot()]
    }

    pub fn peak(&self, cat: Category) -> usize {
        self.peak[cat.slot()]
    }

    pub fn total_current(&self) -> usize {
        self.total_current
    }

    pub fn total_peak(&self) -> usize {
        self.total_peak
    }
}

impl fmt::Display for MemoryLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for cat in Category::ALL {
            writeln!(
                f,
                "{:<15} peak {:>10} current {:>10}",
                cat.name(),
                self.peak(cat),
                self.current(cat)
            )?;
        }
        write!(f, "{:<15} peak {:>10}", "total", self.total_peak)
    }
}
