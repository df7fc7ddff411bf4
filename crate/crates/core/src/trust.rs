//! Topic-conditioned embedder trust weights.
//!
//! Each topic holds one weight per embedder, kept at or above `floor` and
//! summing to one. Feedback marks returned images as irrelevant; every
//! embedder is charged the position importance of those images in its own
//! rankings, and its weight shrinks by `1 - eta * loss` before the topic is
//! renormalized.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::ImageId;
use crate::retrieval::{position_importance, RankedList};

pub const DEFAULT_ETA: f64 = 0.1;
pub const DEFAULT_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TrustError {
    #[error("learning rate must lie in (0, 1), got {0}")]
    Eta(f64),
    #[error("weight floor must lie in (0, 1/l], got {0}")]
    Floor(f64),
    #[error("loss for {embedder} must lie in [0, 1], got {loss}")]
    Loss { embedder: String, loss: f64 },
    #[error("image {0} was not among the returned results")]
    NotReturned(ImageId),
    #[error("unknown embedder {0}")]
    UnknownEmbedder(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid trust file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid trust file: {0}")]
    Invalid(String),
}

/// Images a user marked irrelevant for one query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSet {
    pub query_id: String,
    pub irrelevant: BTreeSet<ImageId>,
}

/// Weights of every embedder for one topic.
pub type TopicWeights = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustTable {
    pub eta: f64,
    pub floor: f64,
    pub topics: BTreeMap<String, TopicWeights>,
    #[serde(skip)]
    embedders: BTreeSet<String>,
}

impl TrustTable {
    pub fn new<I, S>(embedders: I, eta: f64, floor: f64) -> Result<Self, TrustError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(TrustError::Eta(eta));
        }
        let embedders: BTreeSet<String> = embedders.into_iter().map(Into::into).collect();
        if !(floor > 0.0) || (!embedders.is_empty() && floor > 1.0 / embedders.len() as f64) {
            return Err(TrustError::Floor(floor));
        }
        Ok(Self {
            eta,
            floor,
            topics: BTreeMap::new(),
            embedders,
        })
    }

    pub fn with_defaults<I, S>(embedders: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(embedders, DEFAULT_ETA, DEFAULT_FLOOR).expect("defaults are valid")
    }

    pub fn embedders(&self) -> impl Iterator<Item = &str> {
        self.embedders.iter().map(String::as_str)
    }

    fn uniform(&self) -> TopicWeights {
        let w = 1.0 / self.embedders.len().max(1) as f64;
        self.embedders.iter().map(|e| (e.clone(), w)).collect()
    }

    /// Weights for `topic`; uniform when the topic has never been updated.
    pub fn weights(&self, topic: &str) -> TopicWeights {
        self.topics.get(topic).cloned().unwrap_or_else(|| self.uniform())
    }

    /// Registers a new embedder at weight `1/l` in every topic, scaling the
    /// existing weights by `1 - 1/l`.
    pub fn add_embedder(&mut self, id: impl Into<String>) {
        let id = id.into();
        if !self.embedders.insert(id.clone()) {
            return;
        }
        let share = 1.0 / self.embedders.len() as f64;
        for weights in self.topics.values_mut() {
            for w in weights.values_mut() {
                *w *= 1.0 - share;
            }
            weights.insert(id.clone(), share);
            renormalize(weights, self.floor);
        }
    }

    pub fn remove_embedder(&mut self, id: &str) {
        if !self.embedders.remove(id) {
            return;
        }
        for weights in self.topics.values_mut() {
            weights.remove(id);
            renormalize(weights, self.floor);
        }
    }

    /// Makes the registered embedders exactly `ids`.
    pub fn sync_embedders<'a>(&mut self, ids: impl IntoIterator<Item = &'a str>) {
        let wanted: BTreeSet<String> = ids.into_iter().map(str::to_owned).collect();
        let stale: Vec<String> = self.embedders.difference(&wanted).cloned().collect();
        for id in stale {
            self.remove_embedder(&id);
        }
        for id in wanted {
            self.add_embedder(id);
        }
    }

    /// Multiplicative update of `topic` with losses in `[0, 1]`.
    /// Embedders missing from `losses` are charged nothing.
    pub fn update_weights(&mut self, topic: &str, losses: &BTreeMap<String, f64>) -> Result<(), TrustError> {
        for (embedder, &loss) in losses {
            if !self.embedders.contains(embedder) {
                return Err(TrustError::UnknownEmbedder(embedder.clone()));
            }
            if !(0.0..=1.0).contains(&loss) {
                return Err(TrustError::Loss {
                    embedder: embedder.clone(),
                    loss,
                });
            }
        }
        let mut weights = self.weights(topic);
        for (embedder, w) in weights.iter_mut() {
            let loss = losses.get(embedder).copied().unwrap_or(0.0);
            *w = (*w * (1.0 - self.eta * loss)).max(self.floor);
        }
        renormalize(&mut weights, self.floor);
        self.topics.insert(topic.to_owned(), weights);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trust table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TrustError> {
        let mut t: TrustTable = serde_json::from_str(s)?;
        if !(t.eta > 0.0 && t.eta < 1.0) {
            return Err(TrustError::Eta(t.eta));
        }
        if !(t.floor > 0.0) {
            return Err(TrustError::Floor(t.floor));
        }
        for (topic, weights) in &t.topics {
            let sum: f64 = weights.values().sum();
            if weights.values().any(|w| !w.is_finite() || *w < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(TrustError::Invalid(format!("weights of topic {topic} are not a distribution")));
            }
            t.embedders.extend(weights.keys().cloned());
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, TrustError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Writes to a temporary file and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<(), TrustError> {
        crate::vecstore::write_atomic(path, self.to_json().as_bytes())?;
        Ok(())
    }
}

fn renormalize(weights: &mut TopicWeights, floor: f64) {
    let sum: f64 = weights.values().sum();
    if sum <= 0.0 || !sum.is_finite() {
        let w = 1.0 / weights.len().max(1) as f64;
        weights.values_mut().for_each(|v| *v = w);
        return;
    }
    for v in weights.values_mut() {
        *v /= sum;
    }
    // Division can push a floored weight a hair under the floor only through
    // rounding; clamp without renormalizing again.
    for v in weights.values_mut() {
        if *v < floor {
            *v = floor;
        }
    }
}

/// Per-embedder loss for one query's feedback, normalized into `[0, 1]`.
///
/// Raw loss of embedder `i` is the sum over its ranked lists (one per guide)
/// and over irrelevant images of the position importance of that image in the
/// list. It is divided by `|irrelevant| * guides`, the largest value the sum
/// can reach.
pub fn partial_loss(
    ranked: &[RankedList],
    feedback: &FeedbackSet,
    returned: &[ImageId],
    k: usize,
) -> Result<BTreeMap<String, f64>, TrustError> {
    let returned: BTreeSet<ImageId> = returned.iter().copied().collect();
    if let Some(missing) = feedback.irrelevant.iter().find(|id| !returned.contains(id)) {
        return Err(TrustError::NotReturned(*missing));
    }
    let guides: BTreeSet<_> = ranked.iter().map(|r| r.guide_id).collect();
    let mut raw: BTreeMap<String, f64> = BTreeMap::new();
    for list in ranked {
        let entry = raw.entry(list.embedder_id.clone()).or_insert(0.0);
        for image in &feedback.irrelevant {
            if let Some(rank) = list.rank_of(*image) {
                *entry += position_importance(rank, k);
            }
        }
    }
    let denom = (feedback.irrelevant.len() * guides.len()) as f64;
    if denom > 0.0 {
        for v in raw.values_mut() {
            *v = (*v / denom).min(1.0);
        }
    }
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{GuideId, TileId};
    use crate::retrieval::RankedEntry;
    use proptest::prelude::*;

    fn list(guide: u32, embedder: &str, images: &[u64]) -> RankedList {
        RankedList {
            guide_id: GuideId(guide),
            embedder_id: embedder.into(),
            entries: images
                .iter()
                .enumerate()
                .map(|(i, &id)| RankedEntry {
                    image_id: ImageId(id),
                    best_tile_id: TileId(id * 10),
                    distance: 0.1 * i as f64,
                })
                .collect(),
        }
    }

    fn losses(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn zero_loss_keeps_weights() {
        let mut t = TrustTable::with_defaults(["a", "b"]);
        t.update_weights("general", &losses(&[("a", 0.0), ("b", 0.0)])).unwrap();
        assert_eq!(t.weights("general"), losses(&[("a", 0.5), ("b", 0.5)]));
    }

    #[test]
    fn hand_computed_update() {
        let mut t = TrustTable::with_defaults(["a", "b"]);
        t.update_weights("general", &losses(&[("a", 1.0), ("b", 0.0)])).unwrap();
        let w = t.weights("general");
        assert!((w["a"] - 0.45 / 0.95).abs() < 1e-12);
        assert!((w["b"] - 0.5 / 0.95).abs() < 1e-12);
        assert!((w["a"] - 0.473684).abs() < 1e-6 && (w["b"] - 0.526316).abs() < 1e-6);
    }

    #[test]
    fn repeated_penalty_approaches_floor() {
        let mut t = TrustTable::new(["a", "b"], 0.5, 1e-4).unwrap();
        let mut prev = 0.5;
        for _ in 0..200 {
            t.update_weights("t", &losses(&[("a", 1.0)])).unwrap();
            let w = t.weights("t")["a"];
            assert!(w <= prev && w >= 1e-4);
            prev = w;
        }
        assert!(prev < 1e-3);
        assert!(prev >= 1e-4);
    }

    #[test]
    fn invalid_parameters() {
        assert!(matches!(TrustTable::new(["a"], 1.0, 1e-4), Err(TrustError::Eta(_))));
        assert!(matches!(TrustTable::new(["a"], 0.1, 0.0), Err(TrustError::Floor(_))));
        let mut t = TrustTable::with_defaults(["a"]);
        assert!(matches!(t.update_weights("g", &losses(&[("a", 1.5)])), Err(TrustError::Loss { .. })));
        assert!(matches!(
            t.update_weights("g", &losses(&[("zz", 0.5)])),
            Err(TrustError::UnknownEmbedder(_))
        ));
    }

    #[test]
    fn adding_embedder_enters_at_one_over_l() {
        let mut t = TrustTable::with_defaults(["a", "b"]);
        t.update_weights("g", &losses(&[("a", 1.0)])).unwrap();
        let before = t.weights("g");
        t.add_embedder("c");
        let after = t.weights("g");
        assert!((after["c"] - 1.0 / 3.0).abs() < 1e-12);
        assert!((after["a"] / after["b"] - before["a"] / before["b"]).abs() < 1e-12);
        assert!((after.values().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((t.weights("fresh")["c"] - 1.0 / 3.0).abs() < 1e-12);
        t.remove_embedder("c");
        let back = t.weights("g");
        assert!((back["a"] - before["a"]).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_is_bit_identical() {
        let mut t = TrustTable::with_defaults(["clip", "siglip", "dino"]);
        t.update_weights("animals", &losses(&[("clip", 0.7), ("dino", 0.1)])).unwrap();
        t.update_weights("fruit", &losses(&[("siglip", 1.0 / 3.0)])).unwrap();
        let s = t.to_json();
        let back = TrustTable::from_json(&s).unwrap();
        assert_eq!(back.to_json(), s);
        assert_eq!(back.topics, t.topics);
        assert!(TrustTable::from_json(r#"{"eta":0.1,"floor":0.0001,"topics":{"x":{"a":0.9}}}"#).is_err());
    }

    #[test]
    fn partial_loss_examples() {
        let ranked = vec![list(0, "a", &[7, 8, 9]), list(0, "b", &[8, 9, 10])];
        let returned = [ImageId(7), ImageId(8), ImageId(9)];
        let none = FeedbackSet::default();
        assert!(partial_loss(&ranked, &none, &returned, 3).unwrap().values().all(|v| *v == 0.0));

        let fb = FeedbackSet { query_id: "q".into(), irrelevant: [ImageId(7)].into() };
        let l = partial_loss(&ranked, &fb, &returned, 3).unwrap();
        assert_eq!(l, losses(&[("a", 1.0), ("b", 0.0)]));

        // Outside every top-k: no loss.
        let ranked_short = vec![list(0, "a", &[1, 2, 3, 7]), list(0, "b", &[1, 2, 3])];
        let l = partial_loss(&ranked_short, &fb, &returned, 3).unwrap();
        assert!(l.values().all(|v| *v == 0.0));

        let stray = FeedbackSet { query_id: "q".into(), irrelevant: [ImageId(99)].into() };
        assert!(matches!(partial_loss(&ranked, &stray, &returned, 3), Err(TrustError::NotReturned(ImageId(99)))));
    }

    #[test]
    fn partial_loss_normalizes_by_guides_and_feedback() {
        let ranked = vec![
            list(0, "a", &[1, 2]),
            list(1, "a", &[2, 1]),
            list(0, "b", &[3, 4]),
            list(1, "b", &[4, 3]),
        ];
        let fb = FeedbackSet { query_id: "q".into(), irrelevant: [ImageId(1), ImageId(2)].into() };
        let returned = [ImageId(1), ImageId(2)];
        let l = partial_loss(&ranked, &fb, &returned, 2).unwrap();
        // a: (1 + 0.5) + (0.5 + 1) = 3 over |T| * m = 4
        assert!((l["a"] - 0.75).abs() < 1e-12);
        assert_eq!(l["b"], 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn invariants_hold_over_random_sequences(
            steps in prop::collection::vec((0usize..3, prop::collection::vec(0.0f64..=1.0, 3)), 1..60),
            eta in 0.01f64..0.99,
        ) {
            let names = ["e0", "e1", "e2"];
            let topics = ["t0", "t1", "t2"];
            let mut t = TrustTable::new(names, eta, 1e-4).unwrap();
            for (topic_idx, ls) in steps {
                let topic = topics[topic_idx];
                let others: Vec<_> = topics.iter().filter(|x| **x != topic).map(|x| (x.to_string(), t.topics.get(*x).cloned())).collect();
                let before = t.weights(topic);
                let loss_map: BTreeMap<String, f64> = names.iter().map(|n| n.to_string()).zip(ls.iter().copied()).collect();
                t.update_weights(topic, &loss_map).unwrap();
                let w = t.weights(topic);
                prop_assert!((w.values().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(w.values().all(|v| *v >= 1e-4));
                for (o, snapshot) in others {
                    prop_assert_eq!(t.topics.get(&o).cloned(), snapshot);
                }
                for a in names {
                    for b in names {
                        if loss_map[a] > loss_map[b] && before[a] * (1.0 - eta * loss_map[a]) > 1e-4 {
                            prop_assert!(w[a] / w[b] < before[a] / before[b]);
                        }
                    }
                }
            }
        }
    }
}
