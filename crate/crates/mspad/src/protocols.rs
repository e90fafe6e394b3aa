//! Evaluation partitions: participant-disjoint 3-fold cross-validation,
//! leave-one-attack-category-out, and cross-site train/test.
//!
//! Every fold keeps the train, validation and test roles participant-
//! disjoint. In leave-one-attack-out folds, attack samples of *other*
//! categories owned by test-side participants can belong to no role
//! (test holds only the held-out category plus bona-fides; train/val may
//! not share participants with test); those sample ids are listed in the
//! fold's `excluded` set, so the roles plus `excluded` always cover the
//! manifest.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{CategoryKey, DatasetManifest, SampleRecord, BONA_FIDE_SENTINEL};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("need at least {needed} participants, found {found}")]
    TooFewParticipants { needed: usize, found: usize },
    #[error("need both classes present (bona-fide: {n_bf}, attack: {n_pa})")]
    SingleClass { n_bf: usize, n_pa: usize },
    #[error("need at least 2 distinct attack categories, found {0}")]
    TooFewCategories(usize),
    #[error("identity collision across manifests: {kind} `{id}` appears in both")]
    IdentityCollision { kind: String, id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "THREEFOLD")]
    ThreeFold,
    #[serde(rename = "LOO")]
    Loo,
    #[serde(rename = "INTERSITE")]
    InterSite,
}

/// One fold's role assignment, as sample id lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub name: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Samples out of scope for this fold (see module docs).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
}

/// A named assignment of samples to train/validation/test roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub name: String,
    pub protocol: Protocol,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

fn participant_samples(manifest: &DatasetManifest) -> BTreeMap<&str, Vec<&SampleRecord>> {
    let mut map: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for r in manifest.records() {
        map.entry(r.participant_id.as_str()).or_default().push(r);
    }
    map
}

fn class_counts(manifest: &DatasetManifest) -> (usize, usize) {
    let n_pa = manifest.records().iter().filter(|r| r.is_attack()).count();
    (manifest.len() - n_pa, n_pa)
}

fn category_of(record: &SampleRecord, key: CategoryKey) -> String {
    if record.is_attack() {
        key.of(&record.pai)
    } else {
        BONA_FIDE_SENTINEL.to_string()
    }
}

/// Splits participants into train/val: validation gets ceil(0.2 n),
/// clamped so train keeps at least one participant when n >= 2.
fn split_train_val(
    mut participants: Vec<String>,
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, Vec<String>) {
    participants.sort();
    participants.shuffle(rng);
    let n = participants.len();
    if n <= 1 {
        return (participants, Vec::new());
    }
    let val_count = ((n as f64 * 0.2).ceil() as usize).clamp(1, n - 1);
    let val = participants.split_off(n - val_count);
    (participants, val)
}

fn ids_of(records: &[&SampleRecord]) -> Vec<String> {
    let mut ids: Vec<String> = records.iter().map(|r| r.sample_id.clone()).collect();
    ids.sort();
    ids
}

/// Participant-disjoint 3-fold plan: participants are packed into three
/// groups balancing sample and per-category counts (greedy, heaviest
/// participant first), then each fold tests one group and splits the other
/// two 80/20 into train/val by participant.
pub fn make_3fold(manifest: &DatasetManifest, seed: u64) -> Result<SplitPlan, ProtocolError> {
    let by_participant = participant_samples(manifest);
    if by_participant.len() < 3 {
        return Err(ProtocolError::TooFewParticipants {
            needed: 3,
            found: by_participant.len(),
        });
    }
    let (n_bf, n_pa) = class_counts(manifest);
    if n_bf == 0 || n_pa == 0 {
        return Err(ProtocolError::SingleClass { n_bf, n_pa });
    }

    // Per-participant category histograms (bona-fide counts as a category).
    let mut participant_cats: BTreeMap<&str, BTreeMap<String, usize>> = BTreeMap::new();
    for (p, records) in &by_participant {
        let cats = participant_cats.entry(p).or_default();
        for r in records {
            *cats
                .entry(category_of(r, CategoryKey::CategoryForLoo))
                .or_default() += 1;
        }
    }

    let mut order: Vec<&str> = by_participant.keys().copied().collect();
    order.sort_by_key(|p| (usize::MAX - by_participant[p].len(), *p));

    let mut group_sizes = [0usize; 3];
    let mut group_cats: [BTreeMap<String, usize>; 3] = Default::default();
    let mut groups: [Vec<&str>; 3] = Default::default();
    for p in order {
        let overlap = |g: usize| -> usize {
            participant_cats[p]
                .iter()
                .map(|(c, n)| group_cats[g].get(c).copied().unwrap_or(0) * n)
                .sum()
        };
        let g = (0..3)
            .min_by_key(|&g| (group_sizes[g], overlap(g), g))
            .unwrap();
        group_sizes[g] += by_participant[p].len();
        for (c, n) in &participant_cats[p] {
            *group_cats[g].entry(c.clone()).or_default() += n;
        }
        groups[g].push(p);
    }

    let mut folds = Vec::new();
    for fold_idx in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fold_idx as u64 + 1);
        let test_ps: BTreeSet<&str> = groups[fold_idx].iter().copied().collect();
        let rest: Vec<String> = by_participant
            .keys()
            .filter(|p| !test_ps.contains(*p))
            .map(|p| p.to_string())
            .collect();
        let (train_ps, val_ps) = split_train_val(rest, &mut rng);
        let collect = |ps: &[String]| -> Vec<String> {
            let set: BTreeSet<&str> = ps.iter().map(|s| s.as_str()).collect();
            let mut ids: Vec<String> = manifest
                .records()
                .iter()
                .filter(|r| set.contains(r.participant_id.as_str()))
                .map(|r| r.sample_id.clone())
                .collect();
            ids.sort();
            ids
        };
        let test: Vec<String> = {
            let mut ids: Vec<String> = manifest
                .records()
                .iter()
                .filter(|r| test_ps.contains(r.participant_id.as_str()))
                .map(|r| r.sample_id.clone())
                .collect();
            ids.sort();
            ids
        };
        folds.push(Fold {
            name: format!("fold{fold_idx}"),
            train: collect(&train_ps),
            val: collect(&val_ps),
            test,
            excluded: Vec::new(),
        });
    }
    Ok(SplitPlan {
        name: "3fold".into(),
        protocol: Protocol::ThreeFold,
        seed,
        folds,
    })
}

/// Leave-one-attack-out plan: one fold per distinct value of the grouping
/// attribute. Fold `c` tests every category-`c` sample plus the bona-fides
/// of a one-third participant share; the held-out category never appears in
/// train or val.
pub fn make_loo(
    manifest: &DatasetManifest,
    category_key: CategoryKey,
    seed: u64,
) -> Result<SplitPlan, ProtocolError> {
    let (n_bf, n_pa) = class_counts(manifest);
    if n_bf == 0 || n_pa == 0 {
        return Err(ProtocolError::SingleClass { n_bf, n_pa });
    }
    let categories: BTreeSet<String> = manifest
        .records()
        .iter()
        .filter(|r| r.is_attack())
        .map(|r| category_key.of(&r.pai))
        .collect();
    if categories.len() < 2 {
        return Err(ProtocolError::TooFewCategories(categories.len()));
    }
    let bf_participants: BTreeSet<&str> = manifest
        .records()
        .iter()
        .filter(|r| !r.is_attack())
        .map(|r| r.participant_id.as_str())
        .collect();

    let mut folds = Vec::new();
    for (cat_idx, category) in categories.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(cat_idx as u64 + 1);

        let holders: BTreeSet<&str> = manifest
            .records()
            .iter()
            .filter(|r| r.is_attack() && &category_key.of(&r.pai) == category)
            .map(|r| r.participant_id.as_str())
            .collect();

        // Test side: every category holder, topped up with bona-fide
        // participants to a one-third share.
        let target_bf = (bf_participants.len() + 2) / 3;
        let mut test_side: BTreeSet<&str> = holders.clone();
        let held_bf = test_side.intersection(&bf_participants).count();
        if held_bf < target_bf {
            let mut pool: Vec<&str> = bf_participants
                .iter()
                .filter(|p| !test_side.contains(*p))
                .copied()
                .collect();
            pool.sort();
            pool.shuffle(&mut rng);
            for p in pool.into_iter().take(target_bf - held_bf) {
                test_side.insert(p);
            }
        }

        let mut test = Vec::new();
        let mut excluded = Vec::new();
        for r in manifest.records() {
            if !test_side.contains(r.participant_id.as_str()) {
                continue;
            }
            if r.is_attack() && &category_key.of(&r.pai) != category {
                excluded.push(r.sample_id.clone());
            } else {
                test.push(r.sample_id.clone());
            }
        }
        test.sort();
        excluded.sort();

        let rest: Vec<String> = participant_samples(manifest)
            .keys()
            .filter(|p| !test_side.contains(*p))
            .map(|p| p.to_string())
            .collect();
        let (train_ps, val_ps) = split_train_val(rest, &mut rng);
        let collect = |ps: &[String]| -> Vec<String> {
            let set: BTreeSet<&str> = ps.iter().map(|s| s.as_str()).collect();
            let mut ids: Vec<String> = manifest
                .records()
                .iter()
                .filter(|r| set.contains(r.participant_id.as_str()))
                .map(|r| r.sample_id.clone())
                .collect();
            ids.sort();
            ids
        };
        folds.push(Fold {
            name: format!("loo_{category}"),
            train: collect(&train_ps),
            val: collect(&val_ps),
            test,
            excluded,
        });
    }
    Ok(SplitPlan {
        name: "loo".into(),
        protocol: Protocol::Loo,
        seed,
        folds,
    })
}

/// Cross-site plan: the source manifest is split 80/20 into train/val by
/// participant; the whole target manifest is the test set.
pub fn make_intersite(
    train_manifest: &DatasetManifest,
    test_manifest: &DatasetManifest,
    seed: u64,
) -> Result<SplitPlan, ProtocolError> {
    let source_ps = train_manifest.participants();
    for p in test_manifest.participants() {
        if source_ps.contains(p) {
            return Err(ProtocolError::IdentityCollision {
                kind: "participant".into(),
                id: p.to_string(),
            });
        }
    }
    let source_ids: BTreeSet<&str> = train_manifest
        .records()
        .iter()
        .map(|r| r.sample_id.as_str())
        .collect();
    for r in test_manifest.records() {
        if source_ids.contains(r.sample_id.as_str()) {
            return Err(ProtocolError::IdentityCollision {
                kind: "sample".into(),
                id: r.sample_id.clone(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let all: Vec<String> = source_ps.iter().map(|p| p.to_string()).collect();
    let (train_ps, val_ps) = split_train_val(all, &mut rng);
    let collect = |ps: &[String]| -> Vec<String> {
        let set: BTreeSet<&str> = ps.iter().map(|s| s.as_str()).collect();
        let mut ids: Vec<String> = train_manifest
            .records()
            .iter()
            .filter(|r| set.contains(r.participant_id.as_str()))
            .map(|r| r.sample_id.clone())
            .collect();
        ids.sort();
        ids
    };
    let refs: Vec<&SampleRecord> = test_manifest.records().iter().collect();
    Ok(SplitPlan {
        name: "intersite".into(),
        protocol: Protocol::InterSite,
        seed,
        folds: vec![Fold {
            name: "intersite".into(),
            train: collect(&train_ps),
            val: collect(&val_ps),
            test: ids_of(&refs),
            excluded: Vec::new(),
        }],
    })
}

/// Outcome of [`validate_split`]: hard violations and soft balance
/// warnings.
#[derive(Debug, Clone, Serialize)]
pub struct SplitValidation {
    pub violations: Vec<String>,
    pub balance_warnings: Vec<String>,
}

impl SplitValidation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks role disjointness, participant-disjointness and coverage of every
/// fold, plus (for 3-fold plans) per-category balance of the test sets
/// against an ideal one-third share within `tolerance` (relative; default
/// 0.2 when `None`).
pub fn validate_split(
    plan: &SplitPlan,
    manifest: &DatasetManifest,
    tolerance: Option<f64>,
) -> SplitValidation {
    let tolerance = tolerance.unwrap_or(0.2);
    let mut violations = Vec::new();
    let mut balance_warnings = Vec::new();

    let by_id: BTreeMap<&str, &SampleRecord> = manifest
        .records()
        .iter()
        .map(|r| (r.sample_id.as_str(), r))
        .collect();

    for fold in &plan.folds {
        let roles: [(&str, &Vec<String>); 3] = [
            ("train", &fold.train),
            ("val", &fold.val),
            ("test", &fold.test),
        ];
        // Sample-level disjointness and coverage.
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (role, ids) in &roles {
            for id in ids.iter() {
                if !by_id.contains_key(id.as_str()) {
                    violations.push(format!("{}: unknown sample `{id}` in {role}", fold.name));
                }
                if let Some(prev) = seen.insert(id.as_str(), role) {
                    violations.push(format!(
                        "{}: sample `{id}` assigned to both {prev} and {role}",
                        fold.name
                    ));
                }
            }
        }
        for id in &fold.excluded {
            if let Some(prev) = seen.insert(id.as_str(), "excluded") {
                violations.push(format!(
                    "{}: sample `{id}` assigned to both {prev} and excluded",
                    fold.name
                ));
            }
        }
        let covered = seen.len();
        if covered != manifest.len() && plan.protocol != Protocol::InterSite {
            violations.push(format!(
                "{}: covers {covered} of {} samples",
                fold.name,
                manifest.len()
            ));
        }

        // Participant-disjointness across roles.
        let mut participant_role: BTreeMap<&str, &str> = BTreeMap::new();
        for (role, ids) in &roles {
            for id in ids.iter() {
                if let Some(r) = by_id.get(id.as_str()) {
                    let p = r.participant_id.as_str();
                    match participant_role.get(p) {
                        Some(prev) if prev != role => violations.push(format!(
                            "{}: participant `{p}` appears in both {prev} and {role}",
                            fold.name
                        )),
                        _ => {
                            participant_role.insert(p, role);
                        }
                    }
                }
            }
        }
    }

    if plan.protocol == Protocol::ThreeFold {
        let mut global: BTreeMap<String, usize> = BTreeMap::new();
        for r in manifest.records() {
            *global
                .entry(category_of(r, CategoryKey::CategoryForLoo))
                .or_default() += 1;
        }
        for fold in &plan.folds {
            let mut in_test: BTreeMap<String, usize> = BTreeMap::new();
            for id in &fold.test {
                if let Some(r) = by_id.get(id.as_str()) {
                    *in_test
                        .entry(category_of(r, CategoryKey::CategoryForLoo))
                        .or_default() += 1;
                }
            }
            for (cat, &total) in &global {
                let ideal = total as f64 / 3.0;
                let got = in_test.get(cat).copied().unwrap_or(0) as f64;
                if (got - ideal).abs() > tolerance * ideal {
                    balance_warnings.push(format!(
                        "{}: category `{cat}` has {got} test samples, ideal {ideal:.1}",
                        fold.name
                    ));
                }
            }
        }
    }

    SplitValidation {
        violations,
        balance_warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{CollectionSite, PaiAttributes, Transparency};
    use std::path::PathBuf;

    fn record(id: &str, participant: &str, finger: &str, category: Option<&str>) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            participant_id: participant.into(),
            finger_id: finger.into(),
            collection_site: CollectionSite::Synth,
            ground_truth: category.is_some() as u8,
            pai: match category {
                Some(c) => PaiAttributes {
                    pai_code: format!("code_{c}"),
                    material: c.into(),
                    species: format!("{c}_sp"),
                    transparency: Transparency::Opaque,
                    attack_type: "overlay".into(),
                    category_for_loo: c.into(),
                },
                None => PaiAttributes::bona_fide(),
            },
            tensor_refs: Default::default(),
            extensions: Default::default(),
        }
    }

    /// participants p0..p{n-1}, 4 bona-fide + 4 attack fingers each; each
    /// participant's attacks carry one category, cycling through `cats`.
    fn toy_manifest(n_participants: usize, cats: &[&str]) -> DatasetManifest {
        let mut records = Vec::new();
        for p in 0..n_participants {
            let pid = format!("p{p:02}");
            for f in 0..4 {
                records.push(record(
                    &format!("{pid}_bf{f}"),
                    &pid,
                    &format!("L{}", f + 1),
                    None,
                ));
            }
            let cat = cats[p % cats.len()];
            for f in 0..4 {
                records.push(record(
                    &format!("{pid}_pa{f}"),
                    &pid,
                    &format!("R{}", f + 1),
                    Some(cat),
                ));
            }
        }
        DatasetManifest::from_records(records, PathBuf::from(".")).unwrap()
    }

    #[test]
    fn three_participants_force_one_per_group() {
        let manifest = toy_manifest(3, &["a", "b"]);
        let plan = make_3fold(&manifest, 0).unwrap();
        assert_eq!(plan.folds.len(), 3);
        for fold in &plan.folds {
            assert_eq!(fold.test.len(), 8);
            assert_eq!(fold.train.len() + fold.val.len(), 16);
        }
        let validation = validate_split(&plan, &manifest, None);
        assert!(validation.is_ok(), "{:?}", validation.violations);
    }

    #[test]
    fn group_sizes_stay_within_one_participant_block() {
        let manifest = toy_manifest(30, &["a", "b", "c", "d"]);
        let plan = make_3fold(&manifest, 7).unwrap();
        let ideal = manifest.len() as f64 / 3.0;
        for fold in &plan.folds {
            // 8 samples per participant is the block size here.
            assert!(
                (fold.test.len() as f64 - ideal).abs() <= 8.0,
                "test size {} vs ideal {ideal}",
                fold.test.len()
            );
        }
    }

    #[test]
    fn each_sample_tested_exactly_once_across_folds() {
        let manifest = toy_manifest(9, &["a", "b", "c"]);
        let plan = make_3fold(&manifest, 3).unwrap();
        let mut tested: BTreeMap<&str, usize> = BTreeMap::new();
        for fold in &plan.folds {
            for id in &fold.test {
                *tested.entry(id.as_str()).or_default() += 1;
            }
        }
        assert_eq!(tested.len(), manifest.len());
        assert!(tested.values().all(|&c| c == 1));
    }

    #[test]
    fn same_seed_reproduces_plan() {
        let manifest = toy_manifest(12, &["a", "b", "c"]);
        let a = make_3fold(&manifest, 42).unwrap();
        let b = make_3fold(&manifest, 42).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = make_3fold(&manifest, 43).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn too_few_participants_rejected() {
        let manifest = toy_manifest(2, &["a"]);
        assert!(matches!(
            make_3fold(&manifest, 0),
            Err(ProtocolError::TooFewParticipants { needed: 3, found: 2 })
        ));
    }

    #[test]
    fn loo_excludes_held_out_category_from_train_and_val() {
        let manifest = toy_manifest(12, &["a", "b"]);
        let plan = make_loo(&manifest, CategoryKey::CategoryForLoo, 5).unwrap();
        assert_eq!(plan.folds.len(), 2);
        let by_id: BTreeMap<&str, &SampleRecord> = manifest
            .records()
            .iter()
            .map(|r| (r.sample_id.as_str(), r))
            .collect();
        for (fold, cat) in plan.folds.iter().zip(["a", "b"]) {
            assert_eq!(fold.name, format!("loo_{cat}"));
            for id in fold.train.iter().chain(&fold.val) {
                let r = by_id[id.as_str()];
                assert!(!(r.is_attack() && r.pai.category_for_loo == cat));
            }
            // All category samples are in test.
            let n_cat_total = manifest
                .records()
                .iter()
                .filter(|r| r.is_attack() && r.pai.category_for_loo == cat)
                .count();
            let n_cat_test = fold
                .test
                .iter()
                .filter(|id| {
                    let r = by_id[id.as_str()];
                    r.is_attack() && r.pai.category_for_loo == cat
                })
                .count();
            assert_eq!(n_cat_total, n_cat_test);
            let validation = validate_split(&plan, &manifest, None);
            assert!(validation.is_ok(), "{:?}", validation.violations);
        }
    }

    #[test]
    fn eleven_categories_give_eleven_folds() {
        let cats: Vec<String> = (0..11).map(|i| format!("cat{i:02}")).collect();
        let cat_refs: Vec<&str> = cats.iter().map(|s| s.as_str()).collect();
        let manifest = toy_manifest(22, &cat_refs);
        let plan = make_loo(&manifest, CategoryKey::CategoryForLoo, 1).unwrap();
        assert_eq!(plan.folds.len(), 11);
    }

    #[test]
    fn loo_train_side_keeps_bona_fide_majority() {
        let manifest = toy_manifest(15, &["a", "b", "c", "d", "e"]);
        let plan = make_loo(&manifest, CategoryKey::CategoryForLoo, 2).unwrap();
        let by_id: BTreeMap<&str, &SampleRecord> = manifest
            .records()
            .iter()
            .map(|r| (r.sample_id.as_str(), r))
            .collect();
        for fold in &plan.folds {
            let bf_train: BTreeSet<&str> = fold
                .train
                .iter()
                .chain(&fold.val)
                .filter(|id| !by_id[id.as_str()].is_attack())
                .map(|id| by_id[id.as_str()].participant_id.as_str())
                .collect();
            assert!(
                bf_train.len() * 2 >= 15,
                "{}: only {} bona-fide participants outside test",
                fold.name,
                bf_train.len()
            );
        }
    }

    #[test]
    fn single_category_is_rejected() {
        let manifest = toy_manifest(6, &["only"]);
        assert!(matches!(
            make_loo(&manifest, CategoryKey::CategoryForLoo, 0),
            Err(ProtocolError::TooFewCategories(1))
        ));
    }

    #[test]
    fn intersite_roles() {
        let source = toy_manifest(10, &["a", "b"]);
        let mut records = Vec::new();
        for p in 0..4 {
            let pid = format!("q{p}");
            records.push(record(&format!("{pid}_bf"), &pid, "L1", None));
            records.push(record(&format!("{pid}_pa"), &pid, "R1", Some("a")));
        }
        let target = DatasetManifest::from_records(records, PathBuf::from(".")).unwrap();
        let plan = make_intersite(&source, &target, 9).unwrap();
        assert_eq!(plan.folds.len(), 1);
        let fold = &plan.folds[0];
        assert_eq!(fold.test.len(), target.len());
        // 10 source participants -> 8 train / 2 val.
        let by_id: BTreeMap<&str, &SampleRecord> = source
            .records()
            .iter()
            .map(|r| (r.sample_id.as_str(), r))
            .collect();
        let train_ps: BTreeSet<&str> = fold
            .train
            .iter()
            .map(|id| by_id[id.as_str()].participant_id.as_str())
            .collect();
        let val_ps: BTreeSet<&str> = fold
            .val
            .iter()
            .map(|id| by_id[id.as_str()].participant_id.as_str())
            .collect();
        assert_eq!(train_ps.len(), 8);
        assert_eq!(val_ps.len(), 2);
    }

    #[test]
    fn overlapping_participants_across_sites_rejected() {
        let source = toy_manifest(5, &["a", "b"]);
        let mut records = vec![record("x_bf", "p00", "L1", None)];
        records.push(record("x_pa", "p00", "R1", Some("a")));
        let target = DatasetManifest::from_records(records, PathBuf::from(".")).unwrap();
        assert!(matches!(
            make_intersite(&source, &target, 0),
            Err(ProtocolError::IdentityCollision { .. })
        ));
    }

    #[test]
    fn corrupted_plans_are_reported() {
        let manifest = toy_manifest(6, &["a", "b"]);
        let plan = make_3fold(&manifest, 0).unwrap();

        // Duplicate assignment of one sample.
        let mut dup = plan.clone();
        let stolen = dup.folds[0].test[0].clone();
        dup.folds[0].train.push(stolen);
        let v = validate_split(&dup, &manifest, None);
        assert!(v.violations.iter().any(|m| m.contains("assigned to both")));

        // Participant in two roles.
        let mut cross = plan.clone();
        let moved = cross.folds[0].train.pop().unwrap();
        cross.folds[0].val.push(moved);
        let v = validate_split(&cross, &manifest, None);
        assert!(v
            .violations
            .iter()
            .any(|m| m.contains("participant") && m.contains("both")));

        // Missing sample breaks coverage.
        let mut missing = plan;
        missing.folds[0].train.pop();
        let v = validate_split(&missing, &manifest, None);
        assert!(v.violations.iter().any(|m| m.contains("covers")));
    }
}
