use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Regime, Triplet};
use crate::error::{rejected, Error, Result};
use crate::labels::{lookup, HierLabel, LabelMap};

/// Attempts allowed per emitted triplet before giving up.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Violation {
    RepeatedSample,
    MissingDisease,
    MissingGroup,
    SimilarDiseaseMismatch,
    SimilarGroupMismatch,
    DissimilarSameDisease,
    DissimilarSameGroup,
    CousinAsDissimilar,
    NoJointRule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Violation::RepeatedSample => "sample repeated within triplet",
            Violation::MissingDisease => "missing disease label",
            Violation::MissingGroup => "missing similarity group",
            Violation::SimilarDiseaseMismatch => "similar pair differs in disease",
            Violation::SimilarGroupMismatch => "similar pair differs in group",
            Violation::DissimilarSameDisease => "dissimilar shares the anchor disease",
            Violation::DissimilarSameGroup => "dissimilar shares the anchor group",
            Violation::CousinAsDissimilar => "cousin as dissimilar",
            Violation::NoJointRule => "neither the disease rule nor the group rule holds",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    Invalid(Violation),
}

impl Verdict {
    pub fn is_valid(self) -> bool {
        self == Verdict::Valid
    }
}

type Rule = fn(&HierLabel, &HierLabel, &HierLabel) -> std::result::Result<(), Violation>;

fn disease_rule(a: &HierLabel, b: &HierLabel, c: &HierLabel) -> std::result::Result<(), Violation> {
    let (Some(da), Some(db), Some(dc)) = (&a.disease, &b.disease, &c.disease) else {
        return Err(Violation::MissingDisease);
    };
    if da != db {
        return Err(Violation::SimilarDiseaseMismatch);
    }
    if dc == da {
        return Err(Violation::DissimilarSameDisease);
    }
    Ok(())
}

fn sibling_pair(a: &HierLabel, b: &HierLabel) -> std::result::Result<(), Violation> {
    let (Some(ga), Some(gb)) = (a.hier_group(), b.hier_group()) else {
        return Err(Violation::MissingGroup);
    };
    if ga.0 != gb.0 {
        return Err(Violation::SimilarDiseaseMismatch);
    }
    if ga.1 != gb.1 {
        return Err(Violation::SimilarGroupMismatch);
    }
    Ok(())
}

fn hierarchical_rule(a: &HierLabel, b: &HierLabel, c: &HierLabel) -> std::result::Result<(), Violation> {
    sibling_pair(a, b)?;
    let dc = c.disease.as_ref().ok_or(Violation::MissingDisease)?;
    if Some(dc) == a.disease.as_ref() {
        return Err(match &c.group {
            Some(g) if Some(g) != a.group.as_ref() => Violation::CousinAsDissimilar,
            Some(_) => Violation::DissimilarSameGroup,
            None => Violation::DissimilarSameDisease,
        });
    }
    Ok(())
}

fn non_hierarchical_rule(a: &HierLabel, b: &HierLabel, c: &HierLabel) -> std::result::Result<(), Violation> {
    sibling_pair(a, b)?;
    let gc = c.hier_group().ok_or(Violation::MissingGroup)?;
    if Some(gc) == a.hier_group() {
        return Err(Violation::DissimilarSameGroup);
    }
    Ok(())
}

/// Group rule over unconstrained annotations: groups are identified by name alone.
fn unconstrained_group_rule(a: &HierLabel, b: &HierLabel, c: &HierLabel) -> std::result::Result<(), Violation> {
    let (Some(ga), Some(gb), Some(gc)) = (&a.group, &b.group, &c.group) else {
        return Err(Violation::MissingGroup);
    };
    if ga != gb {
        return Err(Violation::SimilarGroupMismatch);
    }
    if gc == ga {
        return Err(Violation::DissimilarSameGroup);
    }
    Ok(())
}

fn joint_rule(a: &HierLabel, b: &HierLabel, c: &HierLabel) -> std::result::Result<(), Violation> {
    if disease_rule(a, b, c).is_ok() || unconstrained_group_rule(a, b, c).is_ok() {
        Ok(())
    } else {
        Err(Violation::NoJointRule)
    }
}

fn rule_for(regime: Regime) -> Rule {
    match regime {
        Regime::Disease => disease_rule,
        Regime::Joint => joint_rule,
        Regime::Hierarchical => hierarchical_rule,
        Regime::NonHierarchical => non_hierarchical_rule,
    }
}

/// Checks `t` against the rules of its own regime.
pub fn validate_triplet(t: &Triplet, labels: &LabelMap) -> Result<Verdict> {
    let a = lookup(labels, &t.anchor)?;
    let b = lookup(labels, &t.similar)?;
    let c = lookup(labels, &t.dissimilar)?;
    if t.anchor == t.similar || t.anchor == t.dissimilar || t.similar == t.dissimilar {
        return Ok(Verdict::Invalid(Violation::RepeatedSample));
    }
    Ok(match rule_for(t.regime)(a, b, c) {
        Ok(()) => Verdict::Valid,
        Err(v) => Verdict::Invalid(v),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerOptions {
    /// Probability that a joint triplet is drawn from the group source.
    pub joint_mix_ratio: f64,
    pub max_rejections: usize,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { joint_mix_ratio: 0.5, max_rejections: MAX_REJECTIONS }
    }
}

/// One rejection-sampling source: candidate pools for each slot plus the
/// acceptance rule. Drawing each slot uniformly from its pool and accepting
/// on the rule yields a uniform draw over all valid triples.
struct Source<'a> {
    pair_pool: Vec<&'a str>,
    dissimilar_pool: Vec<&'a str>,
    rule: Rule,
}

impl<'a> Source<'a> {
    fn draw(&self, labels: &LabelMap, rng: &mut ChaCha8Rng, regime: Regime, max: usize) -> Result<Triplet> {
        for _ in 0..max {
            let a = *self.pair_pool.choose(rng).expect("non-empty pool");
            let b = *self.pair_pool.choose(rng).expect("non-empty pool");
            let c = *self.dissimilar_pool.choose(rng).expect("non-empty pool");
            if a == b || a == c || b == c {
                continue;
            }
            if (self.rule)(&labels[a], &labels[b], &labels[c]).is_ok() {
                return Ok(Triplet::new(a, b, c, regime));
            }
        }
        Err(Error::DatasetStructure(format!("no valid {regime} triplet found in {max} attempts")))
    }
}

fn count_by<'a, K: Ord>(
    ids: &[&'a str],
    labels: &'a LabelMap,
    key: impl Fn(&'a HierLabel) -> Option<K>,
) -> BTreeMap<K, usize> {
    let mut m = BTreeMap::new();
    for id in ids {
        if let Some(k) = key(&labels[*id]) {
            *m.entry(k).or_insert(0) += 1;
        }
    }
    m
}

fn disease_source(labels: &LabelMap) -> Result<Source<'_>> {
    let pool: Vec<&str> = labels.iter().filter(|(_, l)| l.disease.is_some()).map(|(k, _)| k.as_str()).collect();
    let counts = count_by(&pool, labels, |l| l.disease.as_ref());
    if counts.len() < 2 {
        return Err(Error::DatasetStructure(format!("disease triplets need two diseases, found {}", counts.len())));
    }
    if !counts.values().any(|&n| n >= 2) {
        return Err(Error::DatasetStructure("no disease has two samples".into()));
    }
    Ok(Source { pair_pool: pool.clone(), dissimilar_pool: pool, rule: disease_rule })
}

fn hierarchical_source(labels: &LabelMap, regime: Regime) -> Result<Source<'_>> {
    let grouped: Vec<&str> = labels.iter().filter(|(_, l)| l.hier_group().is_some()).map(|(k, _)| k.as_str()).collect();
    let counts = count_by(&grouped, labels, HierLabel::hier_group);
    let pairable: Vec<_> = counts.iter().filter(|(_, &n)| n >= 2).map(|(k, _)| *k).collect();
    if pairable.is_empty() {
        return Err(Error::DatasetStructure("no similarity group has two members".into()));
    }
    if regime == Regime::Hierarchical {
        let diseased: Vec<&str> = labels.iter().filter(|(_, l)| l.disease.is_some()).map(|(k, _)| k.as_str()).collect();
        let ok = pairable.iter().any(|(d, _)| diseased.iter().any(|id| labels[*id].disease.as_ref() != Some(*d)));
        if !ok {
            return Err(Error::DatasetStructure("hierarchical triplets need a sample from another disease".into()));
        }
        Ok(Source { pair_pool: grouped, dissimilar_pool: diseased, rule: hierarchical_rule })
    } else {
        if counts.len() < 2 {
            return Err(Error::DatasetStructure("non-hierarchical triplets need at least two groups".into()));
        }
        Ok(Source { pair_pool: grouped.clone(), dissimilar_pool: grouped, rule: non_hierarchical_rule })
    }
}

fn group_source(labels: &LabelMap) -> Result<Source<'_>> {
    let grouped: Vec<&str> = labels.iter().filter(|(_, l)| l.group.is_some()).map(|(k, _)| k.as_str()).collect();
    let counts = count_by(&grouped, labels, |l| l.group.as_deref());
    if counts.len() < 2 || !counts.values().any(|&n| n >= 2) {
        return Err(Error::DatasetStructure("group triplets need two groups, one with two members".into()));
    }
    Ok(Source { pair_pool: grouped.clone(), dissimilar_pool: grouped, rule: unconstrained_group_rule })
}

/// Draws exactly `count` triplets valid under `regime`, deterministic in `seed`.
pub fn sample_triplets(
    labels: &LabelMap,
    regime: Regime,
    count: usize,
    seed: u64,
    options: &SamplerOptions,
) -> Result<Vec<Triplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = options.max_rejections.max(1);
    match regime {
        Regime::Disease => {
            let s = disease_source(labels)?;
            (0..count).map(|_| s.draw(labels, &mut rng, regime, max)).collect()
        }
        Regime::Hierarchical | Regime::NonHierarchical => {
            let s = hierarchical_source(labels, regime)?;
            (0..count).map(|_| s.draw(labels, &mut rng, regime, max)).collect()
        }
        Regime::Joint => {
            let ratio = options.joint_mix_ratio;
            if !(0.0..=1.0).contains(&ratio) {
                return Err(rejected(format!("joint_mix_ratio {ratio} outside [0, 1]")));
            }
            let groups = if ratio > 0.0 { Some(group_source(labels)?) } else { None };
            let diseases = if ratio < 1.0 { Some(disease_source(labels)?) } else { None };
            (0..count)
                .map(|_| {
                    let from_groups = rng.gen_bool(ratio);
                    let s = if from_groups { groups.as_ref() } else { diseases.as_ref() };
                    s.expect("source checked above").draw(labels, &mut rng, regime, max)
                })
                .collect()
        }
    }
}
