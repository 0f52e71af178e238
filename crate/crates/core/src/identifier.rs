//! k-NN rogue detection, majority-vote classification and evaluation
//! metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedder::RffVector;
use crate::registry::Registry;
use crate::util::serde_f64;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub device_id: String,
    pub distance: f64,
}

/// The `k` stored templates closest to `q`, ordered by distance and then
/// device id, so the result does not depend on insertion order.
pub fn nearest(reg: &Registry, q: &RffVector, k: usize) -> Result<Vec<Neighbor>> {
    if let Some(dim) = reg.dim() {
        if dim != q.dim() {
            return Err(Error::Contract(format!(
                "query dimension {} does not match registry dimension {dim}",
                q.dim()
            )));
        }
    }
    let mut all: Vec<(f64, &str)> = reg.templates().map(|(id, v)| (q.distance(v), id)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    all.truncate(k);
    Ok(all
        .into_iter()
        .map(|(distance, id)| Neighbor {
            device_id: id.to_string(),
            distance,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub d_avg: f64,
    pub is_legitimate: bool,
    #[serde(with = "serde_f64")]
    pub threshold_used: f64,
}

/// Mean distance to the K nearest templates across all devices; the query
/// is legitimate iff that mean does not exceed the registry threshold.
pub fn detect(reg: &Registry, q: &RffVector) -> Result<DetectionResult> {
    let d_avg = rogue_score(reg, q)?;
    Ok(DetectionResult {
        d_avg,
        is_legitimate: d_avg <= reg.rogue_threshold,
        threshold_used: reg.rogue_threshold,
    })
}

/// `D_avg` alone.
pub fn rogue_score(reg: &Registry, q: &RffVector) -> Result<f64> {
    let k = reg.k_neighbors;
    if reg.n_vectors() < k {
        return Err(Error::Contract(format!(
            "detection needs at least K={k} stored vectors, registry holds {}",
            reg.n_vectors()
        )));
    }
    let nn = nearest(reg, q, k)?;
    Ok(nn.iter().map(|n| n.distance).sum::<f64>() / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub predicted_id: String,
    pub vote_counts: BTreeMap<String, usize>,
    pub neighbor_distances: Vec<f64>,
}

/// Majority vote over the K nearest templates (fewer if the registry is
/// smaller). Ties go to the smaller summed distance, then the smaller id.
pub fn classify(reg: &Registry, q: &RffVector) -> Result<ClassificationResult> {
    if reg.is_empty() {
        return Err(Error::Contract("cannot classify against an empty registry".into()));
    }
    let nn = nearest(reg, q, reg.k_neighbors)?;
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for n in &nn {
        let e = tally.entry(n.device_id.as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += n.distance;
    }
    let predicted = tally
        .iter()
        .max_by(|a, b| {
            a.1 .0
                .cmp(&b.1 .0)
                .then_with(|| b.1 .1.total_cmp(&a.1 .1))
                .then_with(|| b.0.cmp(a.0))
        })
        .map(|(id, _)| id.to_string())
        .expect("at least one neighbor");
    Ok(ClassificationResult {
        predicted_id: predicted,
        vote_counts: tally.iter().map(|(id, (c, _))| (id.to_string(), *c)).collect(),
        neighbor_distances: nn.iter().map(|n| n.distance).collect(),
    })
}

/// Smallest threshold under which at least `target_tpr` of the held-out
/// legitimate queries are accepted.
pub fn calibrate_threshold(reg: &Registry, held_out_legit: &[RffVector], target_tpr: f64) -> Result<f64> {
    let scores = held_out_legit
        .iter()
        .map(|v| rogue_score(reg, v))
        .collect::<Result<Vec<_>>>()?;
    threshold_for_scores(&scores, target_tpr)
}

/// [`calibrate_threshold`] on precomputed `D_avg` scores.
pub fn threshold_for_scores(scores: &[f64], target_tpr: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target_tpr) {
        return Err(Error::Calibration(format!("target TPR {target_tpr} outside [0, 1]")));
    }
    if target_tpr == 0.0 {
        return Ok(0.0);
    }
    if scores.is_empty() {
        return Err(Error::Calibration("no held-out legitimate scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Calibration("non-finite score".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let need = (target_tpr * s.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(s[need - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    #[serde(with = "serde_f64")]
    pub threshold: f64,
}

/// Empirical ROC with every observed score as a threshold, starting from
/// the (0, 0) point. A query counts as accepted when its score is at most
/// the threshold.
pub fn roc_curve(legit: &[f64], rogue: &[f64]) -> Vec<RocPoint> {
    let mut thresholds: Vec<f64> = legit.iter().chain(rogue).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut l = legit.to_vec();
    l.sort_by(f64::total_cmp);
    let mut r = rogue.to_vec();
    r.sort_by(f64::total_cmp);
    let frac = |sorted: &[f64], t: f64| {
        if sorted.is_empty() {
            0.0
        } else {
            sorted.partition_point(|&x| x <= t) as f64 / sorted.len() as f64
        }
    };
    let mut out = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::NEG_INFINITY,
    }];
    out.extend(thresholds.into_iter().map(|t| RocPoint {
        fpr: frac(&r, t),
        tpr: frac(&l, t),
        threshold: t,
    }));
    out
}

/// Trapezoidal area under an ROC curve.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Row and column labels of `confusion`: true ids on rows, predicted
    /// ids on columns.
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    pub overall_accuracy: f64,
    pub per_device_accuracy: BTreeMap<String, f64>,
    pub n_legit: usize,
    pub n_rogue: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub roc_points: Option<Vec<RocPoint>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
    pub k_neighbors: usize,
    pub extractor_fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub registry_sha256: Option<String>,
}

/// Labeled legitimate queries are classified; rogue queries only feed the
/// ROC. The ROC is omitted when `rogue` is empty.
pub fn evaluate(reg: &Registry, legit: &[(String, RffVector)], rogue: &[RffVector]) -> Result<EvalReport> {
    if legit.is_empty() {
        return Err(Error::Contract("evaluation needs at least one legitimate query".into()));
    }
    let mut labels: Vec<String> = reg.device_ids().map(str::to_string).collect();
    labels.extend(legit.iter().map(|(id, _)| id.clone()));
    labels.sort();
    labels.dedup();
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut confusion = vec![vec![0usize; labels.len()]; labels.len()];
    let mut correct = 0;
    for (truth, v) in legit {
        let c = classify(reg, v)?;
        confusion[index[truth.as_str()]][index[c.predicted_id.as_str()]] += 1;
        if &c.predicted_id == truth {
            correct += 1;
        }
    }
    let per_device_accuracy = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let n: usize = confusion[i].iter().sum();
            (n > 0).then(|| (l.clone(), confusion[i][i] as f64 / n as f64))
        })
        .collect();
    let (roc_points, auc_value) = if rogue.is_empty() {
        (None, None)
    } else {
        let ls = legit.iter().map(|(_, v)| rogue_score(reg, v)).collect::<Result<Vec<_>>>()?;
        let rs = rogue.iter().map(|v| rogue_score(reg, v)).collect::<Result<Vec<_>>>()?;
        let roc = roc_curve(&ls, &rs);
        let a = auc(&roc);
        (Some(roc), Some(a))
    };
    Ok(EvalReport {
        labels,
        confusion,
        overall_accuracy: correct as f64 / legit.len() as f64,
        per_device_accuracy,
        n_legit: legit.len(),
        n_rogue: rogue.len(),
        roc_points,
        auc: auc_value,
        k_neighbors: reg.k_neighbors,
        extractor_fingerprint: reg.extractor_fingerprint.clone(),
        registry_sha256: None,
    })
}

impl EvalReport {
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.confusion) {
            s.push_str(l);
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn roc_csv(&self) -> Option<String> {
        self.roc_points.as_ref().map(|pts| {
            let mut s = String::from("fpr,tpr,threshold\n");
            for p in pts {
                s.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
            }
            s
        })
    }

    /// Writes `report.json`, `confusion.csv` and, with a rogue set,
    /// `roc.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("report.json", &serde_json::to_string_pretty(self).expect("report serializes"))?;
        write("confusion.csv", &self.confusion_csv())?;
        if let Some(roc) = self.roc_csv() {
            write("roc.csv", &roc)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> RffVector {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        RffVector(v.iter().map(|x| (x / n) as f32).collect())
    }

    fn random_registry(devices: usize, per: usize, dim: usize, k: usize, seed: u64) -> Registry {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = Registry::new("fp", k).unwrap();
        for d in 0..devices {
            let vs = (0..per)
                .map(|_| unit(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
                .collect();
            reg.enroll(&format!("dev{d}"), vs, 0, "fp").unwrap();
        }
        reg
    }

    /// Exhaustive scan: all distances, full sort, first K.
    fn oracle(reg: &Registry, q: &RffVector, k: usize) -> (f64, String) {
        let mut all: Vec<(f64, String)> = Vec::new();
        for rec in reg.records.values() {
            for v in &rec.vectors {
                let d = q
                    .0
                    .iter()
                    .zip(&v.0)
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                all.push((d, rec.device_id.clone()));
            }
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let top = &all[..k.min(all.len())];
        let d_avg = top.iter().map(|t| t.0).sum::<f64>() / k as f64;
        let mut best: Option<(usize, f64, String)> = None;
        let mut ids: Vec<&String> = top.iter().map(|t| &t.1).collect();
        ids.sort();
        ids.dedup();
        for id in ids {
            let count = top.iter().filter(|t| &t.1 == id).count();
            let sum: f64 = top.iter().filter(|t| &t.1 == id).map(|t| t.0).sum();
            let better = match &best {
                None => true,
                Some((c, s, _)) => count > *c || (count == *c && sum < *s),
            };
            if better {
                best = Some((count, sum, id.clone()));
            }
        }
        (d_avg, best.unwrap().2)
    }

    #[test]
    fn detection_mean_of_two() {
        let mut reg = Registry::new("fp", 2).unwrap();
        let e0 = unit(&[1.0, 0.0]);
        let a = 2.0 * (0.05f64).asin();
        let b = 2.0 * (0.15f64).asin();
        reg.enroll("x", vec![unit(&[a.cos(), a.sin()]), unit(&[b.cos(), -b.sin()])], 0, "fp")
            .unwrap();
        reg.set_threshold(0.2).unwrap();
        let d = detect(&reg, &e0).unwrap();
        assert!((d.d_avg - 0.2).abs() < 1e-7);
    }

    #[test]
    fn stored_vector_with_k_copies_scores_zero() {
        let mut reg = Registry::new("fp", 3).unwrap();
        let v = unit(&[0.3, -0.2, 0.9]);
        reg.enroll("x", vec![v.clone(); 3], 0, "fp").unwrap();
        reg.set_threshold(0.0).unwrap();
        let d = detect(&reg, &v).unwrap();
        assert_eq!(d.d_avg, 0.0);
        assert!(d.is_legitimate);
    }

    #[test]
    fn too_small_or_empty_registry() {
        let reg = random_registry(1, 3, 4, 15, 0);
        assert!(matches!(detect(&reg, &reg.records["dev0"].vectors[0]), Err(Error::Contract(_))));
        let empty = Registry::new("fp", 15).unwrap();
        assert!(matches!(classify(&empty, &unit(&[1.0])), Err(Error::Contract(_))));
    }

    #[test]
    fn majority_and_k1() {
        let mut reg = Registry::new("fp", 15).unwrap();
        let near = |s: f64| unit(&[1.0, s]);
        reg.enroll("A", (0..10).map(|i| near(0.01 * i as f64)).collect(), 0, "fp").unwrap();
        reg.enroll("B", (0..5).map(|i| near(-0.001 - 0.001 * i as f64)).collect(), 0, "fp")
            .unwrap();
        let c = classify(&reg, &near(0.0)).unwrap();
        assert_eq!(c.predicted_id, "A");
        assert_eq!(c.vote_counts.values().sum::<usize>(), 15);
        reg.k_neighbors = 1;
        assert_eq!(classify(&reg, &near(-0.0035)).unwrap().predicted_id, "B");
    }

    #[test]
    fn tie_breaks_by_summed_distance_then_id() {
        let mut reg = Registry::new("fp", 2).unwrap();
        reg.enroll("b", vec![unit(&[1.0, 0.1])], 0, "fp").unwrap();
        reg.enroll("a", vec![unit(&[1.0, -0.2])], 0, "fp").unwrap();
        // One vote each; "b" is closer.
        assert_eq!(classify(&reg, &unit(&[1.0, 0.0])).unwrap().predicted_id, "b");
        let mut reg = Registry::new("fp", 2).unwrap();
        reg.enroll("b", vec![unit(&[1.0, 0.1])], 0, "fp").unwrap();
        reg.enroll("a", vec![unit(&[1.0, -0.1])], 0, "fp").unwrap();
        assert_eq!(classify(&reg, &unit(&[1.0, 0.0])).unwrap().predicted_id, "a");
    }

    #[test]
    fn random_queries_match_exhaustive_oracle() {
        let reg = random_registry(5, 20, 8, 15, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let q = unit(&(0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let (d, id) = oracle(&reg, &q, 15);
            assert_eq!(rogue_score(&reg, &q).unwrap(), d);
            assert_eq!(classify(&reg, &q).unwrap().predicted_id, id);
        }
    }

    #[test]
    fn four_point_auc() {
        let roc = roc_curve(&[0.1, 0.2], &[0.15, 0.3]);
        assert_eq!(auc(&roc), 0.75);
    }

    #[test]
    fn perfect_and_chance_auc() {
        assert_eq!(auc(&roc_curve(&[0.1, 0.2, 0.3], &[0.4, 0.5])), 1.0);
        let s = [0.1, 0.4, 0.2, 0.9];
        assert!((auc(&roc_curve(&s, &s)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn calibration_edges() {
        let scores = [0.3, 0.1, 0.5, 0.2];
        assert_eq!(threshold_for_scores(&scores, 1.0).unwrap(), 0.5);
        assert_eq!(threshold_for_scores(&scores, 0.0).unwrap(), 0.0);
        assert_eq!(threshold_for_scores(&scores, 0.5).unwrap(), 0.2);
        assert_eq!(threshold_for_scores(&scores, 0.51).unwrap(), 0.3);
        assert!(matches!(threshold_for_scores(&scores, 1.1), Err(Error::Calibration(_))));
        assert!(matches!(threshold_for_scores(&[], 0.9), Err(Error::Calibration(_))));
    }

    #[test]
    fn calibration_lands_between_bands() {
        // Enrolled cluster around e0; legit queries within ~0.05, rogue near e1.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut jitter = |c: [f64; 3], s: f64| unit(&c.map(|x| x + rng.random_range(-s..s)));
        let mut reg = Registry::new("fp", 5).unwrap();
        let templ = (0..30).map(|_| jitter([1.0, 0.0, 0.0], 0.02)).collect();
        reg.enroll("a", templ, 0, "fp").unwrap();
        let legit: Vec<RffVector> = (0..20).map(|_| jitter([1.0, 0.0, 0.0], 0.02)).collect();
        let rogue: Vec<RffVector> = (0..20).map(|_| jitter([0.0, 1.0, 0.0], 0.02)).collect();
        let lam = calibrate_threshold(&reg, &legit, 1.0).unwrap();
        let max_legit = legit.iter().map(|v| rogue_score(&reg, v).unwrap()).fold(0.0, f64::max);
        let min_rogue = rogue.iter().map(|v| rogue_score(&reg, v).unwrap()).fold(2.0, f64::min);
        assert_eq!(lam, max_legit);
        assert!(lam < min_rogue);
    }

    #[test]
    fn evaluate_without_rogues_omits_roc() {
        let reg = random_registry(3, 20, 8, 15, 5);
        let legit: Vec<(String, RffVector)> = reg
            .templates()
            .map(|(id, v)| (id.to_string(), v.clone()))
            .take(25)
            .collect();
        let rep = evaluate(&reg, &legit, &[]).unwrap();
        assert!(rep.roc_points.is_none() && rep.auc.is_none());
        let rows: Vec<usize> = rep.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![20, 5, 0]);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(!json.contains("roc_points"));
        let rogue = vec![unit(&[1.0; 8])];
        let rep = evaluate(&reg, &legit, &rogue).unwrap();
        let roc = rep.roc_points.unwrap();
        assert!(roc.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        assert!((0.0..=1.0).contains(&rep.auc.unwrap()));
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let reg = random_registry(4, 10, 6, 7, 6);
        let mut rev = Registry::new("fp", 7).unwrap();
        for (id, rec) in reg.records.iter().rev() {
            let mut vs = rec.vectors.clone();
            vs.reverse();
            rev.enroll(id, vs, 0, "fp").unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let q = unit(&(0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            assert_eq!(classify(&reg, &q).unwrap(), classify(&rev, &q).unwrap());
            assert_eq!(detect(&reg, &q).unwrap(), detect(&rev, &q).unwrap());
        }
    }

    proptest! {
        #[test]
        fn scores_bounded_and_monotone_in_threshold(seed in 0u64..500, lam in 0.0f64..2.0, extra in 0.0f64..1.0) {
            let mut reg = random_registry(3, 6, 5, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let q = unit(&(0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            reg.set_threshold(lam).unwrap();
            let d1 = detect(&reg, &q).unwrap();
            prop_assert!((0.0..=2.0).contains(&d1.d_avg));
            reg.set_threshold(lam + extra).unwrap();
            let d2 = detect(&reg, &q).unwrap();
            prop_assert!(!d1.is_legitimate || d2.is_legitimate);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            legit in proptest::collection::vec(0.0f64..2.0, 1..20),
            rogue in proptest::collection::vec(0.0f64..2.0, 1..20),
        ) {
            let a = auc(&roc_curve(&legit, &rogue));
            let f = |x: &f64| (3.0 * x).exp() + 1.0;
            let b = auc(&roc_curve(&legit.iter().map(f).collect::<Vec<_>>(), &rogue.iter().map(f).collect::<Vec<_>>()));
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
