//! In-batch triplet construction.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::data::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Index triples into a batch. `skipped` is set when no triple could be
/// formed, in which case the triplet term contributes zero for the step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletBatch {
    pub triples: Vec<Triplet>,
    pub skipped: bool,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Anchor, positive and negative index columns.
    pub fn columns(&self) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
        let col = |f: fn(&Triplet) -> usize| self.triples.iter().map(|t| f(t) as u32).collect();
        (col(|t| t.anchor), col(|t| t.positive), col(|t| t.negative))
    }

    /// Whether every triple satisfies the label and distinctness constraints.
    pub fn is_valid_for(&self, labels: &[Label]) -> bool {
        self.triples.iter().all(|t| {
            t.anchor < labels.len()
                && t.positive < labels.len()
                && t.negative < labels.len()
                && t.anchor != t.positive
                && labels[t.anchor] == labels[t.positive]
                && labels[t.anchor] != labels[t.negative]
        })
    }
}

/// Every sample whose class has another member and whose opposite class is
/// present becomes an anchor; positive and negative are drawn uniformly.
pub fn build_triplets(labels: &[Label], rng: &mut impl Rng) -> TripletBatch {
    let by_class = |l: Label| -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == l)
            .map(|(i, _)| i)
            .collect()
    };
    let real = by_class(Label::Real);
    let fake = by_class(Label::Fake);
    let mut triples = Vec::new();
    for (anchor, &label) in labels.iter().enumerate() {
        let (same, other) = match label {
            Label::Real => (&real, &fake),
            Label::Fake => (&fake, &real),
        };
        if same.len() < 2 || other.is_empty() {
            continue;
        }
        let pick = rng.random_range(0..same.len() - 1);
        let own = same.iter().position(|&i| i == anchor).expect("anchor in its class");
        let positive = same[if pick >= own { pick + 1 } else { pick }];
        let negative = *other.choose(rng).expect("non-empty");
        triples.push(Triplet { anchor, positive, negative });
    }
    let skipped = triples.is_empty();
    if skipped {
        log::debug!("no valid triplet in a batch of {}", labels.len());
    }
    TripletBatch { triples, skipped }
}
