//! The HOI taxonomy: verbs, objects, (verb, object) triplet classes, rarity
//! bookkeeping, prompt construction, and the zero-shot split protocols.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Verb/object/HOI taxonomy with per-HOI training counts.
#[derive(Debug, Clone, Serialize)]
pub struct LabelSpace {
    verbs: Vec<String>,
    objects: Vec<String>,
    hois: Vec<(usize, usize)>,
    train_counts: Vec<u64>,
    rare_threshold: u64,
    #[serde(skip)]
    pair_index: HashMap<(usize, usize), usize>,
}

fn default_rare_threshold() -> u64 {
    10
}

/// On-disk schema for a label-space document.
#[derive(Debug, Serialize, Deserialize)]
pub struct LabelSpaceFile {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    pub hois: Vec<(usize, usize)>,
    pub train_counts: Vec<u64>,
    #[serde(default = "default_rare_threshold")]
    pub rare_threshold: u64,
}

impl LabelSpace {
    pub fn build(
        verbs: Vec<String>,
        objects: Vec<String>,
        hoi_pairs: Vec<(usize, usize)>,
        train_counts: Vec<u64>,
        rare_threshold: u64,
    ) -> Result<Self> {
        if has_duplicates(&verbs) {
            return Err(Error::validation("duplicate verb names"));
        }
        if has_duplicates(&objects) {
            return Err(Error::validation("duplicate object names"));
        }
        if train_counts.len() != hoi_pairs.len() {
            return Err(Error::validation(format!(
                "train_counts length {} != number of HOI pairs {}",
                train_counts.len(),
                hoi_pairs.len()
            )));
        }
        let mut pair_index = HashMap::new();
        for (h, &(v, o)) in hoi_pairs.iter().enumerate() {
            if v >= verbs.len() || o >= objects.len() {
                return Err(Error::validation(format!(
                    "hoi {h} references verb {v} / object {o} out of range"
                )));
            }
            if pair_index.insert((v, o), h).is_some() {
                return Err(Error::validation(format!("duplicate HOI pair ({v}, {o})")));
            }
        }
        Ok(Self {
            verbs,
            objects,
            hois: hoi_pairs,
            train_counts,
            rare_threshold,
            pair_index,
        })
    }

    pub fn from_file_doc(doc: LabelSpaceFile) -> Result<Self> {
        Self::build(
            doc.verbs,
            doc.objects,
            doc.hois,
            doc.train_counts,
            doc.rare_threshold,
        )
    }

    pub fn to_file_doc(&self) -> LabelSpaceFile {
        LabelSpaceFile {
            verbs: self.verbs.clone(),
            objects: self.objects.clone(),
            hois: self.hois.clone(),
            train_counts: self.train_counts.clone(),
            rare_threshold: self.rare_threshold,
        }
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: LabelSpaceFile = serde_json::from_str(&text)?;
        Self::from_file_doc(doc)
    }

    /// Number of verb categories (A).
    pub fn n_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn n_hois(&self) -> usize {
        self.hois.len()
    }

    pub fn verb_name(&self, v: usize) -> &str {
        &self.verbs[v]
    }

    pub fn object_name(&self, o: usize) -> &str {
        &self.objects[o]
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn hoi(&self, h: usize) -> (usize, usize) {
        self.hois[h]
    }

    pub fn hois(&self) -> &[(usize, usize)] {
        &self.hois
    }

    pub fn hoi_id(&self, verb: usize, object: usize) -> Option<usize> {
        self.pair_index.get(&(verb, object)).copied()
    }

    pub fn train_count(&self, h: usize) -> u64 {
        self.train_counts[h]
    }

    pub fn train_counts(&self) -> &[u64] {
        &self.train_counts
    }

    pub fn rare_threshold(&self) -> u64 {
        self.rare_threshold
    }

    pub fn is_rare(&self, h: usize) -> bool {
        self.train_counts[h] < self.rare_threshold
    }

    pub fn rare_ids(&self) -> Vec<usize> {
        (0..self.n_hois()).filter(|&h| self.is_rare(h)).collect()
    }

    /// Replace per-HOI training counts (used after generating a synthetic
    /// training set, whose census defines rarity).
    pub fn with_train_counts(mut self, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != self.hois.len() {
            return Err(Error::validation("train_counts length mismatch"));
        }
        self.train_counts = counts;
        Ok(self)
    }
}

fn has_duplicates(names: &[String]) -> bool {
    let mut seen = HashSet::new();
    names.iter().any(|n| !seen.insert(n.as_str()))
}

/// "A photo of a person [verb] a/an [object]"; underscores become spaces and
/// the article is "an" before a vowel.
pub fn hoi_prompt(verb_name: &str, object_name: &str) -> String {
    let verb = verb_name.replace('_', " ");
    let object = object_name.replace('_', " ");
    format!("A photo of a person {verb} {} {object}", article(&object))
}

/// "A photo of a/an [object]".
pub fn object_prompt(object_name: &str) -> String {
    let object = object_name.replace('_', " ");
    format!("A photo of {} {object}", article(&object))
}

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Zero-shot protocol families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Setting {
    Full,
    Uc,
    RfUc,
    NfUc,
    Uo,
    Uv,
}

impl Setting {
    pub fn parse(s: &str) -> Result<Setting> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "FULL" => Ok(Setting::Full),
            "UC" => Ok(Setting::Uc),
            "RF_UC" => Ok(Setting::RfUc),
            "NF_UC" => Ok(Setting::NfUc),
            "UO" => Ok(Setting::Uo),
            "UV" => Ok(Setting::Uv),
            other => Err(Error::validation(format!("unknown setting {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::Full => "FULL",
            Setting::Uc => "UC",
            Setting::RfUc => "RF_UC",
            Setting::NfUc => "NF_UC",
            Setting::Uo => "UO",
            Setting::Uv => "UV",
        }
    }
}

/// A concrete seen/unseen partition of the HOI classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub setting: Setting,
    pub seed: u64,
    /// Sorted, deduplicated unseen class ids.
    pub unseen_hoi_ids: Vec<usize>,
}

impl SplitSpec {
    pub fn full() -> Self {
        Self {
            setting: Setting::Full,
            seed: 0,
            unseen_hoi_ids: Vec::new(),
        }
    }

    pub fn is_unseen(&self, hoi_id: usize) -> bool {
        self.unseen_hoi_ids.binary_search(&hoi_id).is_ok()
    }

    pub fn seen_ids(&self, space: &LabelSpace) -> Vec<usize> {
        (0..space.n_hois()).filter(|&h| !self.is_unseen(h)).collect()
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        for ids in self.unseen_hoi_ids.windows(2) {
            if ids[0] >= ids[1] {
                return Err(Error::validation("unseen ids not strictly ascending"));
            }
        }
        if let Some(&last) = self.unseen_hoi_ids.last() {
            if last >= space.n_hois() {
                return Err(Error::validation("unseen id out of range"));
            }
        }
        Ok(())
    }
}

/// Count parameter for `make_split`, with an optional explicit id list
/// (verb ids under UV, object ids under UO, HOI ids under UC) that
/// overrides seeded random selection.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplitParams {
    pub count: usize,
    #[serde(default)]
    pub explicit_ids: Option<Vec<usize>>,
}

impl SplitParams {
    pub fn count(count: usize) -> Self {
        Self {
            count,
            explicit_ids: None,
        }
    }

    pub fn explicit(ids: Vec<usize>) -> Self {
        Self {
            count: ids.len(),
            explicit_ids: Some(ids),
        }
    }
}

/// Build a deterministic seen/unseen split. Pure in (space, setting,
/// params, seed): repeated calls return byte-identical specs.
pub fn make_split(
    space: &LabelSpace,
    setting: Setting,
    params: &SplitParams,
    seed: u64,
) -> Result<SplitSpec> {
    let unseen = match setting {
        Setting::Full => Vec::new(),
        Setting::Uv => {
            let verbs = pick_ids(space.n_verbs(), params, seed, "verb")?;
            let set: HashSet<usize> = verbs.into_iter().collect();
            (0..space.n_hois())
                .filter(|&h| set.contains(&space.hoi(h).0))
                .collect()
        }
        Setting::Uo => {
            let objects = pick_ids(space.n_objects(), params, seed, "object")?;
            let set: HashSet<usize> = objects.into_iter().collect();
            (0..space.n_hois())
                .filter(|&h| set.contains(&space.hoi(h).1))
                .collect()
        }
        Setting::Uc => {
            let order: Vec<usize> = match &params.explicit_ids {
                Some(ids) => {
                    validate_ids(ids, space.n_hois(), "hoi")?;
                    ids.clone()
                }
                None => {
                    let mut order: Vec<usize> = (0..space.n_hois()).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                    order
                }
            };
            take_feasible(space, &order, params.count)?
        }
        Setting::RfUc => {
            let mut order: Vec<usize> = (0..space.n_hois()).collect();
            order.sort_by_key(|&h| (space.train_count(h), h));
            take_feasible(space, &order, params.count)?
        }
        Setting::NfUc => {
            let mut order: Vec<usize> = (0..space.n_hois()).collect();
            order.sort_by_key(|&h| (std::cmp::Reverse(space.train_count(h)), h));
            take_feasible(space, &order, params.count)?
        }
    };
    let mut unseen = unseen;
    unseen.sort_unstable();
    unseen.dedup();
    Ok(SplitSpec {
        setting,
        seed,
        unseen_hoi_ids: unseen,
    })
}

fn validate_ids(ids: &[usize], limit: usize, what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for &id in ids {
        if id >= limit {
            return Err(Error::validation(format!("{what} id {id} out of range")));
        }
        if !seen.insert(id) {
            return Err(Error::validation(format!("duplicate {what} id {id}")));
        }
    }
    Ok(())
}

fn pick_ids(universe: usize, params: &SplitParams, seed: u64, what: &str) -> Result<Vec<usize>> {
    if let Some(ids) = &params.explicit_ids {
        validate_ids(ids, universe, what)?;
        return Ok(ids.clone());
    }
    if params.count > universe {
        return Err(Error::validation(format!(
            "cannot pick {} {what}s out of {universe}",
            params.count
        )));
    }
    let mut all: Vec<usize> = (0..universe).collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    all.truncate(params.count);
    Ok(all)
}

/// Greedily take candidates in order, skipping any whose removal would leave
/// a verb or object with no remaining seen HOI.
fn take_feasible(space: &LabelSpace, order: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut verb_seen = vec![0usize; space.n_verbs()];
    let mut obj_seen = vec![0usize; space.n_objects()];
    for &(v, o) in space.hois() {
        verb_seen[v] += 1;
        obj_seen[o] += 1;
    }
    let mut taken = Vec::with_capacity(n);
    for &h in order {
        if taken.len() == n {
            break;
        }
        let (v, o) = space.hoi(h);
        if verb_seen[v] > 1 && obj_seen[o] > 1 {
            verb_seen[v] -= 1;
            obj_seen[o] -= 1;
            taken.push(h);
        }
    }
    if taken.len() < n {
        return Err(Error::Infeasible(format!(
            "only {} of {} unseen HOIs selectable while keeping every verb and object seen",
            taken.len(),
            n
        )));
    }
    Ok(taken)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    /// 5 verbs x 8 objects, all pairs; counts form a fixed permutation so
    /// the rarity order spreads across verbs and objects.
    pub(crate) fn synthetic_space() -> LabelSpace {
        let mut pairs = Vec::new();
        for v in 0..5 {
            for o in 0..8 {
                pairs.push((v, o));
            }
        }
        let counts = (0..40u64).map(|h| (h * 17) % 40).collect();
        LabelSpace::build(names("verb", 5), names("object", 8), pairs, counts, 10).unwrap()
    }

    #[test]
    fn degenerate_single_pair_space() {
        let space = LabelSpace::build(
            vec!["hold".into()],
            vec!["cup".into()],
            vec![(0, 0)],
            vec![0],
            10,
        )
        .unwrap();
        assert_eq!(space.n_hois(), 1);
        assert_eq!(space.rare_ids(), vec![0]);
    }

    #[test]
    fn synthetic_space_ids_match_nested_loop_oracle() {
        let space = synthetic_space();
        assert_eq!(space.n_hois(), 40);
        let mut h = 0;
        for v in 0..5 {
            for o in 0..8 {
                assert_eq!(space.hoi(h), (v, o));
                assert_eq!(space.hoi_id(v, o), Some(h));
                h += 1;
            }
        }
    }

    #[test]
    fn build_rejects_bad_inputs() {
        let dup = LabelSpace::build(
            vec!["a".into(), "a".into()],
            vec!["x".into()],
            vec![(0, 0)],
            vec![1],
            10,
        );
        assert!(dup.is_err());
        let dangling = LabelSpace::build(
            vec!["a".into()],
            vec!["x".into()],
            vec![(0, 1)],
            vec![1],
            10,
        );
        assert!(dangling.is_err());
        let dup_pair = LabelSpace::build(
            vec!["a".into()],
            vec!["x".into()],
            vec![(0, 0), (0, 0)],
            vec![1, 1],
            10,
        );
        assert!(dup_pair.is_err());
        let bad_counts = LabelSpace::build(
            vec!["a".into()],
            vec!["x".into()],
            vec![(0, 0)],
            vec![1, 2],
            10,
        );
        assert!(bad_counts.is_err());
    }

    #[test]
    fn prompts_follow_template_and_article_rule() {
        assert_eq!(hoi_prompt("ride", "horse"), "A photo of a person ride a horse");
        assert_eq!(object_prompt("umbrella"), "A photo of an umbrella");
        assert_eq!(
            hoi_prompt("no_interaction", "dining_table"),
            "A photo of a person no interaction a dining table"
        );
        // independent template oracle
        let (verb, object) = ("no_interaction", "dining_table");
        let v = verb.replace('_', " ");
        let o = object.replace('_', " ");
        let art = if "aeiou".contains(o.chars().next().unwrap()) { "an" } else { "a" };
        assert_eq!(hoi_prompt(verb, object), format!("A photo of a person {v} {art} {o}"));
    }

    #[test]
    fn rf_uc_matches_full_sort_oracle() {
        let space = synthetic_space();
        let split = make_split(&space, Setting::RfUc, &SplitParams::count(8), 7).unwrap();
        // oracle: exhaustive sort by (count, id); the 8 smallest counts spread
        // over all verbs and objects, so nothing is skipped
        let mut order: Vec<usize> = (0..40).collect();
        order.sort_by_key(|&h| (space.train_count(h), h));
        let mut expect = order[..8].to_vec();
        expect.sort_unstable();
        assert_eq!(split.unseen_hoi_ids, expect);
    }

    #[test]
    fn nf_uc_takes_highest_counts() {
        let space = synthetic_space();
        let split = make_split(&space, Setting::NfUc, &SplitParams::count(4), 0).unwrap();
        let mut order: Vec<usize> = (0..40).collect();
        order.sort_by_key(|&h| (std::cmp::Reverse(space.train_count(h)), h));
        let mut expect = order[..4].to_vec();
        expect.sort_unstable();
        assert_eq!(split.unseen_hoi_ids, expect);
    }

    #[test]
    fn rf_uc_skips_candidates_that_would_orphan_a_verb() {
        // verb 0's only HOI (id 0) has the smallest count and is skipped;
        // after taking id 1, verb 1's last HOI (id 2) is skipped too.
        let space = LabelSpace::build(
            names("verb", 3),
            names("object", 2),
            vec![(0, 0), (1, 0), (1, 1), (2, 0), (2, 1)],
            vec![0, 1, 2, 3, 4],
            10,
        )
        .unwrap();
        let split = make_split(&space, Setting::RfUc, &SplitParams::count(2), 0).unwrap();
        assert_eq!(split.unseen_hoi_ids, vec![1, 3]);
    }

    #[test]
    fn uc_infeasible_when_constraint_cannot_hold() {
        let space = LabelSpace::build(
            names("verb", 2),
            names("object", 1),
            vec![(0, 0), (1, 0)],
            vec![1, 1],
            10,
        )
        .unwrap();
        // removing either HOI orphans its verb, so even n=1 is infeasible
        let err = make_split(&space, Setting::Uc, &SplitParams::count(1), 0);
        assert!(matches!(err, Err(Error::Infeasible(_))));
    }

    #[test]
    fn uv_uo_membership_equals_set_construction() {
        let space = synthetic_space();
        let uv = make_split(&space, Setting::Uv, &SplitParams::count(2), 3).unwrap();
        let unseen_verbs: HashSet<usize> =
            uv.unseen_hoi_ids.iter().map(|&h| space.hoi(h).0).collect();
        assert_eq!(unseen_verbs.len(), 2);
        for h in 0..space.n_hois() {
            let (v, _) = space.hoi(h);
            assert_eq!(uv.is_unseen(h), unseen_verbs.contains(&v));
        }

        let uo = make_split(&space, Setting::Uo, &SplitParams::count(3), 9).unwrap();
        let unseen_objs: HashSet<usize> =
            uo.unseen_hoi_ids.iter().map(|&h| space.hoi(h).1).collect();
        assert_eq!(unseen_objs.len(), 3);
        for h in 0..space.n_hois() {
            let (_, o) = space.hoi(h);
            assert_eq!(uo.is_unseen(h), unseen_objs.contains(&o));
        }
    }

    #[test]
    fn make_split_is_pure_and_partitions() {
        let space = synthetic_space();
        for setting in [Setting::Uc, Setting::RfUc, Setting::NfUc, Setting::Uo, Setting::Uv] {
            let params = SplitParams::count(3);
            let a = make_split(&space, setting, &params, 123).unwrap();
            let b = make_split(&space, setting, &params, 123).unwrap();
            assert_eq!(a, b, "{setting:?} not deterministic");
            assert_eq!(
                serde_json::to_vec(&a).unwrap(),
                serde_json::to_vec(&b).unwrap()
            );
            let seen = a.seen_ids(&space);
            let mut all: Vec<usize> = seen.iter().copied().chain(a.unseen_hoi_ids.iter().copied()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..space.n_hois()).collect::<Vec<_>>());
        }
        let full = make_split(&space, Setting::Full, &SplitParams::count(0), 1).unwrap();
        assert!(full.unseen_hoi_ids.is_empty());
    }

    #[test]
    fn explicit_ids_override_random_selection() {
        let space = synthetic_space();
        let split = make_split(&space, Setting::Uv, &SplitParams::explicit(vec![4]), 0).unwrap();
        let expect: Vec<usize> = (0..40).filter(|&h| space.hoi(h).0 == 4).collect();
        assert_eq!(split.unseen_hoi_ids, expect);
        assert!(make_split(&space, Setting::Uv, &SplitParams::explicit(vec![7]), 0).is_err());
    }
}
