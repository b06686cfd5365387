//! Bagged CART regression trees with per-split feature subsampling.
//! Multi-output targets share one tree; the split criterion is the summed
//! squared error over all outputs.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub max_features: usize,
    pub seed: u64,
}

/// Mean of the trees' predictions.
pub fn predict(trees: &[Tree], x: &[f64]) -> Vec<f64> {
    let mut out = trees[0].predict(x).to_vec();
    for t in &trees[1..] {
        for (o, v) in out.iter_mut().zip(t.predict(x)) {
            *o += v;
        }
    }
    let k = trees.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    out
}

pub fn fit(xs: &[&[f64]], ys: &[&[f64]], cfg: &ForestConfig) -> Vec<Tree> {
    let n = xs.len();
    (0..cfg.trees)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64 + 1);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let mut b = Builder {
                xs,
                ys,
                cfg,
                rng,
                nodes: Vec::new(),
            };
            b.grow(idx, 0);
            Tree { nodes: b.nodes }
        })
        .collect()
}

struct Builder<'a> {
    xs: &'a [&'a [f64]],
    ys: &'a [&'a [f64]],
    cfg: &'a ForestConfig,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn mean(&self, idx: &[usize]) -> Vec<f64> {
        let mut m = vec![0.0; self.ys[0].len()];
        for &i in idx {
            for (a, b) in m.iter_mut().zip(self.ys[i]) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= idx.len() as f64);
        m
    }

    fn grow(&mut self, mut idx: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: self.mean(&idx) });
        if depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_leaf.max(1) {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&mut idx) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.xs[i][feature] <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&mut self, idx: &mut [usize]) -> Option<(usize, f64)> {
        let d = self.xs[0].len();
        let out = self.ys[0].len();
        let k = self.cfg.max_features.clamp(1, d);
        let mut feats = sample(&mut self.rng, d, k).into_vec();
        feats.sort_unstable();
        let n = idx.len();
        let min_leaf = self.cfg.min_leaf.max(1);
        let mut total = vec![0.0; out];
        let mut total_sq = 0.0;
        for &i in idx.iter() {
            for (t, v) in total.iter_mut().zip(self.ys[i]) {
                *t += v;
                total_sq += v * v;
            }
        }
        let parent_sse = total_sq - total.iter().map(|s| s * s).sum::<f64>() / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut left = vec![0.0; out];
        for f in feats {
            idx.sort_by(|&a, &b| self.xs[a][f].total_cmp(&self.xs[b][f]).then(a.cmp(&b)));
            left.iter_mut().for_each(|v| *v = 0.0);
            for pos in 0..n - 1 {
                for (l, v) in left.iter_mut().zip(self.ys[idx[pos]]) {
                    *l += v;
                }
                let nl = pos + 1;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let (xa, xb) = (self.xs[idx[pos]][f], self.xs[idx[pos + 1]][f]);
                if xa == xb {
                    continue;
                }
                // SSE = sum y^2 - |S_l|^2/n_l - |S_r|^2/n_r; maximize the gain term
                let gain: f64 = left
                    .iter()
                    .zip(&total)
                    .map(|(l, t)| l * l / nl as f64 + (t - l) * (t - l) / nr as f64)
                    .sum();
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, 0.5 * (xa + xb)));
                }
            }
        }
        let (gain, f, thr) = best?;
        let child_sse = total_sq - gain;
        (child_sse < parent_sse - 1e-12 * parent_sse.abs().max(1e-300)).then_some((f, thr))
    }
}
