//! Metric suite: neighbor-vote AUC, human relevancy (REL) and activation map
//! Jaccard (JA), per regime and neighbor count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use crate::error::{rejected, Error, Result};
use crate::evidence::{activation_pair, query_map_jaccard, BinaryMask};
use crate::labels::{lookup, HierLabel, LabelMap};
use crate::model::{embed, EmbeddingOutput, ModelConfig};
use crate::params::ParamSet;
use crate::retrieval::{melanoma_score, EmbeddingIndex, NeighborList};
use crate::tensor::Tensor;
use crate::triplet::ImageSet;

pub const DEFAULT_KS: [usize; 5] = [3, 5, 10, 20, 40];

/// Mann-Whitney area: P(positive outranks negative) with half credit for ties.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    if sorted.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::NumericDomain("non-finite score".into()));
    }
    let n_pos = sorted.iter().filter(|s| s.1).count();
    let n_neg = sorted.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!("AUC needs both classes ({n_pos} positive, {n_neg} negative)")));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        rank_sum += midrank * sorted[i..j].iter().filter(|s| s.1).count() as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Neighbors sharing both disease and similarity group with the query.
pub fn rel_at_k(query: &HierLabel, neighbors: &NeighborList, labels: &LabelMap) -> Result<usize> {
    let q = query.hier_group().ok_or_else(|| rejected("query lacks a hierarchical group"))?;
    let mut count = 0;
    for id in neighbors.ids() {
        let g = lookup(labels, id)?
            .hier_group()
            .ok_or_else(|| rejected(format!("neighbor {id} lacks a hierarchical group")))?;
        if g == q {
            count += 1;
        }
    }
    Ok(count)
}

/// Labeled images of one split, with optional ground-truth masks.
#[derive(Clone, Debug, Default)]
pub struct EvalSplit {
    pub images: ImageSet,
    pub labels: LabelMap,
    pub masks: BTreeMap<String, BinaryMask>,
}

#[derive(Clone, Debug)]
pub struct RegimeModel {
    pub name: String,
    pub model: ModelConfig,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Binarization threshold on the min-max normalized query map.
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: DEFAULT_KS.to_vec(), tau: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub regime: String,
    pub k: usize,
    pub auc: f64,
    pub rel: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Mean JA per regime; absent for embeddings without filter maps.
    pub ja: BTreeMap<String, f64>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn row(&self, regime: &str, k: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.regime == regime && r.k == k)
    }

    pub fn regimes(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.regime.as_str()) {
                seen.push(r.regime.as_str());
            }
        }
        seen
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["regime", "k", "auc", "rel", "ja"])?;
        for r in &self.rows {
            let ja = self.ja.get(&r.regime).map(|v| format!("{v:.6}")).unwrap_or_default();
            w.write_record([r.regime.clone(), r.k.to_string(), format!("{:.6}", r.auc), format!("{:.6}", r.rel), ja])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("ascii report"))
    }

    /// One line per regime: AUC and REL for each k, then JA.
    pub fn to_table(&self) -> String {
        let ks: Vec<usize> = self.rows.iter().map(|r| r.k).collect::<BTreeSet<_>>().into_iter().collect();
        let regimes = self.regimes();
        let width = regimes.iter().map(|r| r.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = write!(s, "{:<width$}", "regime");
        for k in &ks {
            let _ = write!(s, " | {:>7} {:>7}", format!("AUC@{k}"), format!("REL@{k}"));
        }
        let _ = writeln!(s, " | {:>6}", "JA");
        for regime in regimes {
            let _ = write!(s, "{regime:<width$}");
            for &k in &ks {
                match self.row(regime, k) {
                    Some(r) => {
                        let _ = write!(s, " | {:>7.4} {:>7.3}", r.auc, r.rel);
                    }
                    None => {
                        let _ = write!(s, " | {:>7} {:>7}", "-", "-");
                    }
                }
            }
            match self.ja.get(regime) {
                Some(ja) => {
                    let _ = writeln!(s, " | {ja:>6.4}");
                }
                None => {
                    let _ = writeln!(s, " | {:>6}", "-");
                }
            }
        }
        s
    }
}

pub fn check_disjoint(train: &EvalSplit, test: &EvalSplit) -> Result<()> {
    let shared: Vec<&String> = test.labels.keys().filter(|id| train.labels.contains_key(*id)).take(5).collect();
    if !shared.is_empty() {
        return Err(Error::SplitLeakage(format!("ids in both train and test: {shared:?}")));
    }
    Ok(())
}

/// AUC and mean REL for every k, given an index over training embeddings and
/// one embedding per test query.
pub fn score_embeddings(
    regime: &str,
    index: &EmbeddingIndex,
    queries: &BTreeMap<String, Tensor>,
    test_labels: &LabelMap,
    ks: &[usize],
) -> Result<Vec<ReportRow>> {
    let k_max = *ks.iter().max().ok_or_else(|| rejected("no neighbor counts given"))?;
    if k_max > index.len() {
        return Err(rejected(format!("k = {k_max} exceeds index size {}", index.len())));
    }
    let train_labels = index.label_map();
    let mut scores: Vec<Vec<(f64, bool)>> = vec![Vec::with_capacity(queries.len()); ks.len()];
    let mut rel_sums = vec![0.0; ks.len()];
    for (id, emb) in queries {
        let label = lookup(test_labels, id)?;
        let positive = label.disease.as_ref().ok_or_else(|| rejected(format!("{id} has no disease")))?.is_positive();
        let full = index.knn_query(emb, k_max)?;
        for (i, &k) in ks.iter().enumerate() {
            let nl = full.truncated(k);
            scores[i].push((melanoma_score(&nl, &train_labels)?, positive));
            rel_sums[i] += rel_at_k(label, &nl, &train_labels)? as f64;
        }
    }
    ks.iter()
        .enumerate()
        .map(|(i, &k)| {
            Ok(ReportRow {
                regime: regime.to_owned(),
                k,
                auc: auc(&scores[i])?,
                rel: rel_sums[i] / queries.len() as f64,
            })
        })
        .collect()
}

fn embed_all(m: &RegimeModel, split: &EvalSplit) -> Result<BTreeMap<String, EmbeddingOutput>> {
    split.images.iter().map(|(id, img)| Ok((id.clone(), embed(&m.model, &m.params, id, img)?))).collect()
}

/// Builds the retrieval index for one trained model over a training split.
pub fn build_index(m: &RegimeModel, train: &EvalSplit) -> Result<EmbeddingIndex> {
    let outputs = embed_all(m, train)?;
    index_from_outputs(&outputs, &train.labels)
}

fn index_from_outputs(outputs: &BTreeMap<String, EmbeddingOutput>, labels: &LabelMap) -> Result<EmbeddingIndex> {
    let records = outputs
        .iter()
        .map(|(id, o)| Ok((id.as_str(), &o.embedding, lookup(labels, id)?.clone())))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingIndex::build(records)
}

/// Evaluates every regime: index over `train`, queries from `test`.
/// JA compares the query map against the rank-1 result for every test sample
/// with a mask.
pub fn evaluate(models: &[RegimeModel], train: &EvalSplit, test: &EvalSplit, cfg: &EvalConfig) -> Result<EvalReport> {
    check_disjoint(train, test)?;
    if test.images.is_empty() {
        return Err(rejected("empty test split"));
    }
    let mut report = EvalReport::default();
    report.metadata.insert("n_train".into(), train.images.len().to_string());
    report.metadata.insert("n_test".into(), test.images.len().to_string());
    report.metadata.insert("tau".into(), cfg.tau.to_string());
    for m in models {
        let train_out = embed_all(m, train)?;
        let index = index_from_outputs(&train_out, &train.labels)?;
        let test_out = embed_all(m, test)?;
        let queries: BTreeMap<String, Tensor> =
            test_out.iter().map(|(id, o)| (id.clone(), o.embedding.clone())).collect();
        report.rows.extend(score_embeddings(&m.name, &index, &queries, &test.labels, &cfg.ks)?);

        let mut ja_sum = 0.0;
        let mut n = 0usize;
        for (id, q) in &test_out {
            let Some(mask) = test.masks.get(id) else { continue };
            let top = index.knn_query(&q.embedding, 1)?;
            let pair = activation_pair(q, &train_out[&top.neighbors[0].id])?;
            ja_sum += query_map_jaccard(&pair, mask, cfg.tau)?;
            n += 1;
        }
        if n > 0 {
            report.ja.insert(m.name.clone(), ja_sum / n as f64);
        }
        log::info!("evaluated {}", m.name);
    }
    Ok(report)
}

/// Mean JA of each regime over a grid of thresholds, for auditing the
/// sensitivity of the JA ordering to `tau`.
pub fn ja_tau_sweep(
    models: &[RegimeModel],
    train: &EvalSplit,
    test: &EvalSplit,
    taus: &[f64],
) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let mut out = BTreeMap::new();
    for m in models {
        let train_out = embed_all(m, train)?;
        let index = index_from_outputs(&train_out, &train.labels)?;
        let mut pairs = Vec::new();
        for (id, img) in &test.images {
            let Some(mask) = test.masks.get(id) else { continue };
            let q = embed(&m.model, &m.params, id, img)?;
            let top = index.knn_query(&q.embedding, 1)?;
            pairs.push((activation_pair(&q, &train_out[&top.neighbors[0].id])?, mask));
        }
        let mut row = Vec::new();
        for &tau in taus {
            let mut sum = 0.0;
            for (pair, mask) in &pairs {
                sum += query_map_jaccard(pair, mask, tau)?;
            }
            row.push((tau, if pairs.is_empty() { 0.0 } else { sum / pairs.len() as f64 }));
        }
        out.insert(m.name.clone(), row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Disease;
    use crate::retrieval::Neighbor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(scores: &[(f64, bool)]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for p in scores.iter().filter(|s| s.1) {
            for n in scores.iter().filter(|s| !s.1) {
                pairs += 1.0;
                if p.0 > n.0 {
                    wins += 1.0;
                } else if p.0 == n.0 {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[(0.9, true), (0.8, true), (0.1, false)]).unwrap(), 1.0);
        assert_eq!(auc(&[(0.3, true), (0.3, false), (0.3, false), (0.3, true)]).unwrap(), 0.5);
        assert_eq!(auc(&[(0.9, true), (0.4, true), (0.6, false), (0.1, false)]).unwrap(), 0.75);
        assert!(matches!(auc(&[(0.2, true), (0.4, true)]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc(&[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(2..60);
            let k = rng.gen_range(1..8);
            let mut s: Vec<(f64, bool)> =
                (0..n).map(|_| (f64::from(rng.gen_range(0..=k)) / f64::from(k), rng.gen_bool(0.4))).collect();
            s[0].1 = true;
            s[1].1 = false;
            assert!((auc(&s).unwrap() - pairwise_auc(&s)).abs() < 1e-12);
        }
    }

    fn neighbors(ids: &[&str]) -> NeighborList {
        NeighborList {
            query_id: None,
            neighbors: ids.iter().map(|id| Neighbor { id: (*id).into(), distance: 0.0 }).collect(),
        }
    }

    fn rel_labels() -> LabelMap {
        let mut l = LabelMap::new();
        for (id, d, g) in [
            ("a", Disease::Melanoma, "G1"),
            ("b", Disease::Melanoma, "G1"),
            ("c", Disease::Melanoma, "G2"),
            ("d", Disease::Melanoma, "G3"),
            ("e", Disease::BenignNevus, "G1"),
        ] {
            l.insert(id.into(), HierLabel::hierarchical(d, g));
        }
        l
    }

    #[test]
    fn rel_cases() {
        let l = rel_labels();
        let q = HierLabel::hierarchical(Disease::Melanoma, "G1");
        assert_eq!(rel_at_k(&q, &neighbors(&["a", "b"]), &l).unwrap(), 2);
        assert_eq!(rel_at_k(&q, &neighbors(&["c", "d"]), &l).unwrap(), 0);
        assert_eq!(rel_at_k(&q, &neighbors(&["a", "c", "e", "b", "d"]), &l).unwrap(), 2);
        assert!(rel_at_k(&HierLabel::disease(Disease::Melanoma), &neighbors(&["a"]), &l).is_err());
        let mut l2 = l.clone();
        l2.insert("x".into(), HierLabel::disease(Disease::Melanoma));
        assert!(rel_at_k(&q, &neighbors(&["x"]), &l2).is_err());
    }

    #[test]
    fn rel_monotone_in_k() {
        let l = rel_labels();
        let q = HierLabel::hierarchical(Disease::Melanoma, "G1");
        let full = neighbors(&["c", "a", "e", "b", "d"]);
        let rels: Vec<usize> = (1..=5).map(|k| rel_at_k(&q, &full.truncated(k), &l).unwrap()).collect();
        assert!(rels.windows(2).all(|w| w[0] <= w[1]));
        assert!(rels.iter().enumerate().all(|(i, &r)| r <= i + 1));
    }

    #[test]
    fn leakage_detected() {
        let mut train = EvalSplit::default();
        let mut test = EvalSplit::default();
        train.labels.insert("a".into(), HierLabel::disease(Disease::Melanoma));
        test.labels.insert("a".into(), HierLabel::disease(Disease::Melanoma));
        assert!(matches!(check_disjoint(&train, &test), Err(Error::SplitLeakage(_))));
    }

    #[test]
    fn random_embeddings_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let diseases = [Disease::Melanoma, Disease::SeborrheicKeratosis, Disease::BenignNevus];
        let mut index = EmbeddingIndex::new(8).unwrap();
        let mut labels = LabelMap::new();
        for i in 0..600 {
            let d = diseases[i % 3].clone();
            let e = Tensor::from_vec((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
            index.insert(&format!("tr{i}"), &e, HierLabel::hierarchical(d.clone(), "G0")).unwrap();
        }
        let mut queries = BTreeMap::new();
        for i in 0..3000 {
            labels.insert(format!("te{i}"), HierLabel::hierarchical(diseases[i % 3].clone(), "G0"));
            queries.insert(format!("te{i}"), Tensor::from_vec((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        }
        let rows = score_embeddings("random", &index, &queries, &labels, &[5, 40]).unwrap();
        for r in rows {
            assert!((r.auc - 0.5).abs() <= 0.05, "k={} auc {}", r.k, r.auc);
        }
    }

    #[test]
    fn report_formats() {
        let mut report = EvalReport::default();
        report.rows.push(ReportRow { regime: "disease".into(), k: 3, auc: 0.75, rel: 1.5 });
        report.rows.push(ReportRow { regime: "disease".into(), k: 5, auc: 0.8, rel: 2.0 });
        report.ja.insert("disease".into(), 0.25);
        assert_eq!(
            report.to_csv().unwrap(),
            "regime,k,auc,rel,ja\ndisease,3,0.750000,1.500000,0.250000\ndisease,5,0.800000,2.000000,0.250000\n"
        );
        let table = report.to_table();
        assert!(table.lines().next().unwrap().contains("AUC@5"));
        assert!(table.contains("0.7500"));
    }
}
