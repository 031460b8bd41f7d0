//! The query interface attacks run against: a classifier behind an optional
//! input defense, with a hard query budget and per-query randomness.

use crate::error::Result;
use crate::models::{argmax, Classifier};
use crate::purify::{
    purify_ensemble, purify_full, purify_patchwise, PatchGrid, Purifier, PurifierPool,
    TransformKind,
};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// What stands between the query and the classifier.
#[derive(Debug, Clone)]
pub enum Defense<'a> {
    None,
    /// A fixed heuristic transform (bit reduction, smoothing, noise, ...).
    Transform(TransformKind),
    /// One purifier run deterministically on the whole frame.
    Deterministic(&'a Purifier),
    /// The randomized patch-wise pool defense.
    Patchwise {
        pool: &'a PurifierPool,
        grid: PatchGrid,
    },
    /// Whole-image ensemble mixing, the linear-cost baseline.
    Ensemble { pool: &'a PurifierPool },
}

impl Defense<'_> {
    pub fn label(&self) -> String {
        match self {
            Defense::None => "none".into(),
            Defense::Transform(t) => t.label(),
            Defense::Deterministic(_) => "deterministic".into(),
            Defense::Patchwise { pool, grid } => {
                format!("patchwise({},{}x{})", pool.len(), grid.rows(), grid.cols())
            }
            Defense::Ensemble { pool } => format!("ensemble({})", pool.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    Scores,
    Label,
}

/// One oracle reply. `Exhausted` is a signal, not an error: the attack is
/// out of budget and the classifier was not consulted.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleReply {
    Scores(Vec<f32>),
    Label(usize),
    Exhausted,
}

/// A budgeted, query-counting classifier endpoint. Randomized defenses draw
/// fresh randomness per query, keyed by the query index, so replies do not
/// depend on scheduling.
pub struct DefendedOracle<'a> {
    clf: &'a Classifier,
    defense: Defense<'a>,
    mode: OutputMode,
    budget: usize,
    used: usize,
    stream: Stream,
}

impl<'a> DefendedOracle<'a> {
    pub fn new(
        clf: &'a Classifier,
        defense: Defense<'a>,
        mode: OutputMode,
        budget: usize,
        stream: &Stream,
    ) -> Self {
        DefendedOracle {
            clf,
            defense,
            mode,
            budget,
            used: 0,
            stream: stream.clone(),
        }
    }

    pub fn mode(&self) -> OutputMode {
        self.mode
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.used
    }

    pub fn defense(&self) -> &Defense<'a> {
        &self.defense
    }

    fn defend(&self, x: &Tensor, qs: &Stream) -> Result<Tensor> {
        match &self.defense {
            Defense::None => Ok(x.clone()),
            Defense::Transform(t) => t.apply(x, qs),
            Defense::Deterministic(p) => purify_full(p, x),
            Defense::Patchwise { pool, grid } => {
                Ok(purify_patchwise(pool, x, grid, qs)?.0)
            }
            Defense::Ensemble { pool } => Ok(purify_ensemble(pool, x, qs)?.0),
        }
    }

    /// Forwards one query through the defense and classifier. Counts the
    /// query; returns `Exhausted` without counting once the budget is spent.
    pub fn query(&mut self, x: &Tensor) -> Result<OracleReply> {
        if self.used >= self.budget {
            return Ok(OracleReply::Exhausted);
        }
        let qs = self.stream.derive(self.used as u64);
        let defended = self.defend(x, &qs)?;
        let scores = self.clf.predict(&defended)?;
        self.used += 1;
        Ok(match self.mode {
            OutputMode::Scores => OracleReply::Scores(scores),
            OutputMode::Label => OracleReply::Label(argmax(&scores)),
        })
    }
}
