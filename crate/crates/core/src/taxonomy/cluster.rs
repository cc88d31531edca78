//! Average-linkage agglomerative clustering of labels on cosine distance.

use std::collections::BTreeSet;
use std::error::Error as StdError;

use serde::{Deserialize, Serialize};

use super::normalize_label;

/// Anything that can embed a batch of label strings.
pub trait LabelEmbedder {
    type Error: StdError + Send + Sync + 'static;

    fn embed_labels(&self, labels: &[String]) -> Result<Vec<Vec<f64>>, Self::Error>;
}

#[derive(Debug, thiserror::Error)]
pub enum DendrogramError {
    #[error("need at least 2 distinct labels, got {0}")]
    TooFew(usize),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("embedding label {label:?}: {source}")]
    Embed { label: String, source: Box<dyn StdError + Send + Sync> },
    #[error("embedder returned {got} vectors for {expected} labels")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding of {0:?} has zero norm or mismatched dimension")]
    BadVector(String),
}

/// One agglomeration step. Ids below `n` are leaves; merge `i` creates id `n + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Clusters left after keeping only merges below `threshold`.
    ///
    /// Cosine distance lives in `[0, 2]`, so `threshold >= 2` keeps every
    /// merge and `threshold == 0` keeps none. Members and clusters are sorted.
    pub fn cut(&self, threshold: f64) -> Vec<Vec<String>> {
        let n = self.labels.len();
        let mut parent: Vec<usize> = (0..n + self.merges.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (step, merge) in self.merges.iter().enumerate() {
            if merge.height < threshold || threshold >= 2.0 {
                let id = n + step;
                let a = find(&mut parent, merge.left);
                let b = find(&mut parent, merge.right);
                parent[a] = id;
                parent[b] = id;
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<String>> = Default::default();
        for leaf in 0..n {
            let root = find(&mut parent, leaf);
            groups.entry(root).or_default().push(self.labels[leaf].clone());
        }
        let mut clusters: Vec<Vec<String>> = groups
            .into_values()
            .map(|mut members| {
                members.sort();
                members
            })
            .collect();
        clusters.sort();
        clusters
    }

    /// Heights never decrease from a child merge to its parent.
    pub fn is_monotone(&self) -> bool {
        let n = self.labels.len();
        self.merges.iter().all(|m| {
            [m.left, m.right]
                .iter()
                .filter(|&&c| c >= n)
                .all(|&c| self.merges[c - n].height <= m.height)
        })
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot.clamp(-1.0, 1.0)).clamp(0.0, 2.0)
}

fn unit(label: &str, v: Vec<f64>, dim: usize) -> Result<Vec<f64>, DendrogramError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if v.len() != dim || norm == 0.0 || !norm.is_finite() {
        return Err(DendrogramError::BadVector(label.to_string()));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// Builds the average-linkage dendrogram of `labels`.
///
/// Labels are normalized first and must be distinct afterwards. Ties in
/// merge distance go to the pair whose (smaller, larger) minimum member
/// names sort first.
pub fn build_dendrogram<E: LabelEmbedder>(
    labels: &[String],
    embedder: &E,
) -> Result<Dendrogram, DendrogramError> {
    let labels: Vec<String> = labels.iter().map(|l| normalize_label(l)).collect();
    let mut seen = BTreeSet::new();
    for label in &labels {
        if !seen.insert(label.as_str()) {
            return Err(DendrogramError::DuplicateLabel(label.clone()));
        }
    }
    let n = labels.len();
    if n < 2 {
        return Err(DendrogramError::TooFew(n));
    }

    let raw = match embedder.embed_labels(&labels) {
        Ok(v) => v,
        Err(batch_err) => {
            // Find the offending label so the error is actionable.
            for label in &labels {
                if let Err(e) = embedder.embed_labels(std::slice::from_ref(label)) {
                    return Err(DendrogramError::Embed { label: label.clone(), source: Box::new(e) });
                }
            }
            return Err(DendrogramError::Embed { label: "<batch>".into(), source: Box::new(batch_err) });
        }
    };
    if raw.len() != n {
        return Err(DendrogramError::CountMismatch { expected: n, got: raw.len() });
    }
    let dim = raw[0].len();
    let vectors = labels
        .iter()
        .zip(raw)
        .map(|(label, v)| unit(label, v, dim))
        .collect::<Result<Vec<_>, _>>()?;

    // rank of each label in sorted order, for the tie-break key
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| labels[a].cmp(&labels[b]));
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }

    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = cosine_distance(&vectors[i], &vectors[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    let mut active = vec![true; n];
    let mut node_id: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut min_rank = rank.clone();
    let mut height = vec![0.0f64; n];
    let mut merges = Vec::with_capacity(n - 1);

    for step in 0..n - 1 {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if !active[j] {
                    continue;
                }
                let d = dist[i][j];
                let key = (min_rank[i].min(min_rank[j]), min_rank[i].max(min_rank[j]));
                let better = match best {
                    None => true,
                    Some((bd, bkey, _, _)) => d < bd || (d == bd && key < bkey),
                };
                if better {
                    best = Some((d, key, i, j));
                }
            }
        }
        let (d, _, i, j) = best.expect("at least two active clusters");

        let h = d.max(height[i]).max(height[j]);
        let (left, right) = if node_id[i] < node_id[j] { (node_id[i], node_id[j]) } else { (node_id[j], node_id[i]) };
        let merged_size = size[i] + size[j];
        merges.push(Merge { left, right, height: h, size: merged_size });

        for k in 0..n {
            if active[k] && k != i && k != j {
                let updated = (size[i] as f64 * dist[i][k] + size[j] as f64 * dist[j][k]) / merged_size as f64;
                dist[i][k] = updated;
                dist[k][i] = updated;
            }
        }
        active[j] = false;
        node_id[i] = n + step;
        size[i] = merged_size;
        min_rank[i] = min_rank[i].min(min_rank[j]);
        height[i] = h;
    }

    Ok(Dendrogram { labels, merges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Looks vectors up by label; unknown labels fail.
    struct Table(Vec<(String, Vec<f64>)>);

    #[derive(Debug, thiserror::Error)]
    #[error("no vector for {0}")]
    struct Missing(String);

    impl LabelEmbedder for Table {
        type Error = Missing;
        fn embed_labels(&self, labels: &[String]) -> Result<Vec<Vec<f64>>, Missing> {
            labels
                .iter()
                .map(|l| {
                    self.0
                        .iter()
                        .find(|(k, _)| k == l)
                        .map(|(_, v)| v.clone())
                        .ok_or_else(|| Missing(l.clone()))
                })
                .collect()
        }
    }

    fn table(rows: &[(&str, &[f64])]) -> Table {
        Table(rows.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect())
    }

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn two_labels_single_merge() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        let d = build_dendrogram(&strings(&["a", "b"]), &t).unwrap();
        assert_eq!(d.merges.len(), 1);
        assert_eq!(d.merges[0], Merge { left: 0, right: 1, height: 1.0, size: 2 });
    }

    #[test]
    fn duplicate_label_rejected() {
        let t = table(&[("a", &[1.0, 0.0])]);
        let err = build_dendrogram(&strings(&["a", " A "]), &t).unwrap_err();
        assert!(matches!(err, DendrogramError::DuplicateLabel(l) if l == "a"));
    }

    #[test]
    fn too_few_labels() {
        let t = table(&[("a", &[1.0])]);
        assert!(matches!(build_dendrogram(&strings(&["a"]), &t), Err(DendrogramError::TooFew(1))));
    }

    #[test]
    fn embed_failure_names_label() {
        let t = table(&[("a", &[1.0, 0.0])]);
        match build_dendrogram(&strings(&["a", "zz"]), &t) {
            Err(DendrogramError::Embed { label, .. }) => assert_eq!(label, "zz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn average_linkage_heights() {
        // a,b close; c far. d(a,b) = 1 - cos(10°); then avg(d(a,c), d(b,c)).
        let deg = std::f64::consts::PI / 180.0;
        let a = [1.0, 0.0];
        let b = [(10.0 * deg).cos(), (10.0 * deg).sin()];
        let c = [0.0, 1.0];
        let t = table(&[("a", &a), ("b", &b), ("c", &c)]);
        let d = build_dendrogram(&strings(&["a", "b", "c"]), &t).unwrap();
        let first = 1.0 - (10.0 * deg).cos();
        let second = ((1.0 - 0.0) + (1.0 - (80.0 * deg).cos())) / 2.0;
        assert!((d.merges[0].height - first).abs() < 1e-12);
        assert_eq!((d.merges[0].left, d.merges[0].right), (0, 1));
        assert!((d.merges[1].height - second).abs() < 1e-12);
        assert_eq!((d.merges[1].left, d.merges[1].right), (2, 3));
        assert!(d.is_monotone());
    }

    #[test]
    fn ties_break_on_member_names() {
        // Three mutually equidistant labels: the (a, b) pair must merge first
        // regardless of input order.
        let t = table(&[("c", &[1.0, 0.0, 0.0]), ("b", &[0.0, 1.0, 0.0]), ("a", &[0.0, 0.0, 1.0])]);
        let d = build_dendrogram(&strings(&["c", "b", "a"]), &t).unwrap();
        let first = d.merges[0];
        let pair: BTreeSet<&str> = [first.left, first.right].iter().map(|&i| d.labels[i].as_str()).collect();
        assert_eq!(pair, BTreeSet::from(["a", "b"]));
    }

    #[test]
    fn cut_extremes() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[1.0, 0.0]), ("c", &[-1.0, 0.0])]);
        let d = build_dendrogram(&strings(&["a", "b", "c"]), &t).unwrap();
        assert_eq!(d.cut(0.0).len(), 3);
        assert_eq!(d.cut(2.0), vec![strings(&["a", "b", "c"])]);
        assert_eq!(d.cut(0.5), vec![strings(&["a", "b"]), strings(&["c"])]);
    }

    proptest! {
        #[test]
        fn heights_monotone(vectors in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..25)) {
            prop_assume!(vectors.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6));
            let rows: Vec<(String, Vec<f64>)> = vectors.into_iter().enumerate().map(|(i, v)| (format!("l{i:02}"), v)).collect();
            let labels: Vec<String> = rows.iter().map(|(k, _)| k.clone()).collect();
            let d = build_dendrogram(&labels, &Table(rows)).unwrap();
            prop_assert!(d.is_monotone());
            prop_assert_eq!(d.merges.len(), labels.len() - 1);
            prop_assert_eq!(d.merges.last().unwrap().size, labels.len());
            // Every cut is a partition of the labels.
            for t in [0.0, 0.3, 1.0, 2.0] {
                let mut all: Vec<String> = d.cut(t).into_iter().flatten().collect();
                all.sort();
                let mut want = labels.clone();
                want.sort();
                prop_assert_eq!(all, want);
            }
        }
    }
}
