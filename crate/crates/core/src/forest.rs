//! Regression forest built from scratch.
//!
//! Bagged CART trees with variance-reduction splits over a random feature
//! subset and a bounded number of midpoint thresholds. A forest's prediction
//! is the mean of its trees' leaf scores.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub const FOREST_FORMAT: &str = "tinyobs-forest";
pub const FOREST_FORMAT_VERSION: u32 = 1;

/// Nodes whose target variance falls below this are leaves.
const PURE_VARIANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until the other stopping rules fire.
    pub max_depth: Option<usize>,
    /// Nodes with fewer samples become leaves.
    pub min_node_size: usize,
    /// Candidate features per split; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
    /// Maximum midpoint thresholds tried per feature.
    pub n_thresholds: usize,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: Some(20),
            min_node_size: 5,
            max_features: None,
            n_thresholds: 32,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("forest.n_trees must be at least 1".into()));
        }
        if self.min_node_size == 0 {
            return Err(Error::Config("forest.min_node_size must be at least 1".into()));
        }
        if self.n_thresholds == 0 {
            return Err(Error::Config("forest.n_thresholds must be at least 1".into()));
        }
        if self.max_features == Some(0) {
            return Err(Error::Config("forest.max_features must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { score: f64, count: usize },
}

/// Binary tree stored as a node arena with the root at index 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn predict(&self, v: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { score, .. } => return *score,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if v[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    fn validate(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Format("tree without nodes".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let TreeNode::Split { feature, threshold, left, right } = n {
                // children always follow their parent, which rules out cycles
                if *left <= i || *right <= i || *left >= self.nodes.len() || *right >= self.nodes.len() {
                    return Err(Error::Format(format!("node {i} has invalid children {left}/{right}")));
                }
                if *feature >= n_features || !threshold.is_finite() {
                    return Err(Error::Format(format!("node {i} has an invalid split")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    params: ForestParams,
    n_features: usize,
    seed: u64,
    trees: Vec<Tree>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ForestDoc {
    format: String,
    version: u32,
    params: ForestParams,
    n_features: usize,
    seed: u64,
    trees: Vec<Tree>,
}

struct Builder<'a> {
    /// Feature-major copy of the samples.
    columns: &'a [Vec<f64>],
    targets: &'a [f64],
    params: &'a ForestParams,
    mtry: usize,
    nodes: Vec<TreeNode>,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn sse(sum: f64, sum_sq: f64, n: f64) -> f64 {
    (sum_sq - sum * sum / n).max(0.0)
}

impl Builder<'_> {
    fn leaf(&self, idx: &[usize]) -> TreeNode {
        let mean = idx.iter().map(|&i| self.targets[i]).sum::<f64>() / idx.len() as f64;
        TreeNode::Leaf { score: mean, count: idx.len() }
    }

    /// Best split of `idx` on `feature`, if the feature is not constant there.
    fn best_on_feature(&self, idx: &[usize], feature: usize, parent_sse: f64) -> Option<SplitChoice> {
        let col = &self.columns[feature];
        let mut pairs: Vec<(f64, f64)> = idx.iter().map(|&i| (col[i], self.targets[i])).collect();
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        // last position of each run of equal values
        let run_ends: Vec<usize> = (0..pairs.len() - 1).filter(|&j| pairs[j].0 < pairs[j + 1].0).collect();
        if run_ends.is_empty() {
            return None;
        }
        let q = self.params.n_thresholds;
        let chosen: Vec<usize> = if run_ends.len() <= q {
            run_ends
        } else {
            let m = run_ends.len();
            (0..q).map(|i| run_ends[(2 * i + 1) * m / (2 * q)]).collect()
        };

        let n = pairs.len() as f64;
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        let total_sq: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
        let mut best: Option<SplitChoice> = None;
        let (mut left_sum, mut left_sq, mut cursor) = (0.0, 0.0, 0usize);
        for &end in &chosen {
            while cursor <= end {
                left_sum += pairs[cursor].1;
                left_sq += pairs[cursor].1 * pairs[cursor].1;
                cursor += 1;
            }
            let nl = cursor as f64;
            let nr = n - nl;
            let children = sse(left_sum, left_sq, nl) + sse(total - left_sum, total_sq - left_sq, nr);
            let gain = parent_sse - children;
            if gain > 0.0 && best.as_ref().is_none_or(|b| gain > b.gain) {
                let (lo, hi) = (pairs[end].0, pairs[end + 1].0);
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(SplitChoice { feature, threshold, gain });
            }
        }
        best
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { score: 0.0, count: 0 });
        let n = idx.len() as f64;
        let sum: f64 = idx.iter().map(|&i| self.targets[i]).sum();
        let sum_sq: f64 = idx.iter().map(|&i| self.targets[i] * self.targets[i]).sum();
        let parent_sse = sse(sum, sum_sq, n);
        let at_depth_limit = self.params.max_depth.is_some_and(|d| depth >= d);
        if at_depth_limit || idx.len() < self.params.min_node_size || idx.len() < 2 || parent_sse / n < PURE_VARIANCE {
            self.nodes[id] = self.leaf(idx);
            return id;
        }

        let d = self.columns.len();
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(rng);
        let mut best: Option<SplitChoice> = None;
        for (tried, &f) in order.iter().enumerate() {
            // past the candidate budget, keep looking only until some split is valid
            if tried >= self.mtry && best.is_some() {
                break;
            }
            if let Some(c) = self.best_on_feature(idx, f, parent_sse) {
                if best.as_ref().is_none_or(|b| c.gain > b.gain) {
                    best = Some(c);
                }
            }
        }
        let Some(split) = best else {
            self.nodes[id] = self.leaf(idx);
            return id;
        };

        let col = &self.columns[split.feature];
        let mut mid = 0;
        for j in 0..idx.len() {
            if col[idx[j]] <= split.threshold {
                idx.swap(j, mid);
                mid += 1;
            }
        }
        let (l, r) = idx.split_at_mut(mid);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[id] = TreeNode::Split { feature: split.feature, threshold: split.threshold, left, right };
        id
    }
}

fn train_tree(columns: &[Vec<f64>], targets: &[f64], params: &ForestParams, mtry: usize, rng: &mut ChaCha8Rng) -> Tree {
    let n = targets.len();
    let mut idx: Vec<usize> =
        if params.bootstrap { (0..n).map(|_| rng.gen_range(0..n)).collect() } else { (0..n).collect() };
    let mut b = Builder { columns, targets, params, mtry, nodes: Vec::new() };
    b.grow(&mut idx, 0, rng);
    Tree { nodes: b.nodes }
}

/// Trains `params.n_trees` trees; tree `i` draws from its own seed stream.
pub fn train_forest(samples: &[Vec<f64>], targets: &[f64], params: &ForestParams, seed: u64) -> Result<Forest> {
    params.validate()?;
    if samples.len() < 2 || samples.len() != targets.len() {
        return Err(Error::Config(format!(
            "forest needs at least 2 samples with matching targets (got {} samples, {} targets)",
            samples.len(),
            targets.len()
        )));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::Config("samples must share a non-zero feature dimension".into()));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Config(format!("target {t} outside [0, 1]")));
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config("samples contain non-finite values".into()));
    }
    let mtry = params.max_features.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).min(d);
    let columns: Vec<Vec<f64>> = (0..d).map(|f| samples.iter().map(|s| s[f]).collect()).collect();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|i| train_tree(&columns, targets, params, mtry, &mut stream_rng(seed, i as u64)))
        .collect();
    Ok(Forest { params: params.clone(), n_features: d, seed, trees })
}

impl Forest {
    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if self.trees.is_empty() {
            return Err(Error::State("forest has no trained trees".into()));
        }
        if v.len() != self.n_features {
            return Err(Error::Contract(format!(
                "feature vector has {} entries, forest expects {}",
                v.len(),
                self.n_features
            )));
        }
        Ok(())
    }

    /// Mean of the per-tree leaf scores.
    pub fn predict(&self, v: &[f64]) -> Result<f64> {
        self.check(v)?;
        Ok(self.trees.iter().map(|t| t.predict(v)).sum::<f64>() / self.trees.len() as f64)
    }

    /// [`Forest::predict`] over many vectors, walking one tree at a time so
    /// each tree stays cache-resident. Results are bit-identical to
    /// per-vector prediction.
    pub fn predict_batch<V: AsRef<[f64]> + Sync>(&self, vs: &[V]) -> Result<Vec<f64>> {
        for v in vs {
            self.check(v.as_ref())?;
        }
        const CHUNK: usize = 256;
        let n = self.trees.len() as f64;
        Ok(vs
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| {
                let mut sums = vec![0.0; chunk.len()];
                for t in &self.trees {
                    for (s, v) in sums.iter_mut().zip(chunk) {
                        *s += t.predict(v.as_ref());
                    }
                }
                sums.into_iter().map(move |s| s / n)
            })
            .collect())
    }

    pub fn tree_outputs(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        Ok(self.trees.iter().map(|t| t.predict(v)).collect())
    }

    pub(crate) fn to_doc(&self) -> ForestDoc {
        ForestDoc {
            format: FOREST_FORMAT.into(),
            version: FOREST_FORMAT_VERSION,
            params: self.params.clone(),
            n_features: self.n_features,
            seed: self.seed,
            trees: self.trees.clone(),
        }
    }

    pub(crate) fn from_doc(doc: ForestDoc) -> Result<Self> {
        if doc.format != FOREST_FORMAT {
            return Err(Error::Format(format!("not a forest document (format tag {:?})", doc.format)));
        }
        if doc.version != FOREST_FORMAT_VERSION {
            return Err(Error::Format(format!("forest version {} (expected {})", doc.version, FOREST_FORMAT_VERSION)));
        }
        if doc.trees.is_empty() {
            return Err(Error::Format("forest has no trees".into()));
        }
        for t in &doc.trees {
            t.validate(doc.n_features)?;
        }
        Ok(Self { params: doc.params, n_features: doc.n_features, seed: doc.seed, trees: doc.trees })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.to_doc()).expect("forest serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Format("empty forest payload".into()));
        }
        let doc: ForestDoc =
            serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("forest payload: {e}")))?;
        Self::from_doc(doc)
    }
}

impl Serialize for Forest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_doc().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Forest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = ForestDoc::deserialize(d)?;
        Forest::from_doc(doc).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_data(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect();
        let y = x.iter().map(|v| (v[0] * 0.7 + v[1 % d] * 0.3).clamp(0.0, 1.0)).collect();
        (x, y)
    }

    #[test]
    fn constant_targets_predict_constant() {
        let (x, _) = random_data(50, 4, 1);
        let f = train_forest(&x, &vec![0.7; 50], &ForestParams { n_trees: 5, ..Default::default() }, 3).unwrap();
        for v in &x {
            assert!((f.predict(v).unwrap() - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn unpruned_single_tree_memorizes() {
        let (x, _) = random_data(120, 6, 2);
        let mut y: Vec<f64> = (0..120).map(|i| i as f64 / 119.0).collect();
        y.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let p = ForestParams { n_trees: 1, max_depth: None, min_node_size: 1, bootstrap: false, ..Default::default() };
        let f = train_forest(&x, &y, &p, 4).unwrap();
        for (v, t) in x.iter().zip(&y) {
            assert_eq!(f.predict(v).unwrap(), *t);
        }
    }

    #[test]
    fn constant_feature_yields_leaf() {
        let x = vec![vec![1.0, 1.0]; 10];
        let y: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let f = train_forest(&x, &y, &ForestParams { n_trees: 2, ..Default::default() }, 0).unwrap();
        assert!(f.trees().iter().all(|t| t.nodes().len() == 1));
    }

    #[test]
    fn prediction_bounds_and_averaging() {
        let (x, y) = random_data(200, 5, 5);
        let f = train_forest(&x, &y, &ForestParams { n_trees: 20, ..Default::default() }, 6).unwrap();
        let (lo, hi) = y.iter().fold((1.0f64, 0.0f64), |(a, b), &t| (a.min(t), b.max(t)));
        let (probe, _) = random_data(50, 5, 77);
        for v in &probe {
            let p = f.predict(v).unwrap();
            assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
            assert_eq!(f.predict_batch(std::slice::from_ref(v)).unwrap()[0].to_bits(), p.to_bits());
            let outs = f.tree_outputs(v).unwrap();
            assert!((p - outs.iter().sum::<f64>() / outs.len() as f64).abs() < 1e-12);
            assert_eq!(p, f.predict(v).unwrap());
        }
    }

    #[test]
    fn two_tree_mean() {
        let f = Forest {
            params: ForestParams::default(),
            n_features: 1,
            seed: 0,
            trees: vec![
                Tree { nodes: vec![TreeNode::Leaf { score: 0.4, count: 1 }] },
                Tree { nodes: vec![TreeNode::Leaf { score: 0.6, count: 1 }] },
            ],
        };
        assert_eq!(f.predict(&[0.0]).unwrap(), 0.5);
        assert!(matches!(f.predict(&[0.0, 1.0]), Err(Error::Contract(_))));
        let empty = Forest { trees: vec![], ..f };
        assert!(matches!(empty.predict(&[0.0]), Err(Error::State(_))));
    }

    #[test]
    fn splits_never_increase_child_sse() {
        let (x, y) = random_data(300, 4, 8);
        let p = ForestParams::default();
        let cols: Vec<Vec<f64>> = (0..4).map(|f| x.iter().map(|s| s[f]).collect()).collect();
        let b = Builder { columns: &cols, targets: &y, params: &p, mtry: 2, nodes: vec![] };
        let idx: Vec<usize> = (0..300).collect();
        let parent = sse(y.iter().sum(), y.iter().map(|t| t * t).sum(), 300.0);
        for (f, col) in cols.iter().enumerate() {
            let c = b.best_on_feature(&idx, f, parent).unwrap();
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| col[i] <= c.threshold);
            let part = |s: &[usize]| {
                let t: Vec<f64> = s.iter().map(|&i| y[i]).collect();
                sse(t.iter().sum(), t.iter().map(|v| v * v).sum(), t.len() as f64)
            };
            assert!(part(&l) + part(&r) <= parent + 1e-9);
            assert!((parent - part(&l) - part(&r) - c.gain).abs() < 1e-9);
        }
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let (x, y) = random_data(150, 20, 10);
        let f = train_forest(&x, &y, &ForestParams { n_trees: 8, ..Default::default() }, 11).unwrap();
        let bytes = f.to_bytes();
        let back = Forest::from_bytes(&bytes).unwrap();
        let (probe, _) = random_data(100, 20, 12);
        for v in &probe {
            assert_eq!(f.predict(v).unwrap().to_bits(), back.predict(v).unwrap().to_bits());
        }
        assert_eq!(back, f);

        assert!(matches!(Forest::from_bytes(&[]), Err(Error::Format(_))));
        let text = String::from_utf8(bytes.clone()).unwrap();
        let bad_magic = text.replacen(FOREST_FORMAT, "not-a-forest", 1);
        assert!(matches!(Forest::from_bytes(bad_magic.as_bytes()), Err(Error::Format(_))));
        let bad_version = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(Forest::from_bytes(bad_version.as_bytes()), Err(Error::Format(_))));
        assert!(matches!(Forest::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Format(_))));
    }

    #[test]
    fn same_seed_same_forest() {
        let (x, y) = random_data(100, 20, 13);
        let p = ForestParams { n_trees: 6, ..Default::default() };
        assert_eq!(train_forest(&x, &y, &p, 1).unwrap().to_bytes(), train_forest(&x, &y, &p, 1).unwrap().to_bytes());
        assert_ne!(train_forest(&x, &y, &p, 1).unwrap().to_bytes(), train_forest(&x, &y, &p, 2).unwrap().to_bytes());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(train_forest(&[], &[], &ForestParams::default(), 0), Err(Error::Config(_))));
        let x = vec![vec![0.0], vec![1.0]];
        assert!(matches!(train_forest(&x, &[0.0, 1.5], &ForestParams::default(), 0), Err(Error::Config(_))));
    }
}
