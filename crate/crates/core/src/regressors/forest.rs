//! CART regression trees and bagged forests over 0/1 bit features.
//!
//! Every split is "bit j set?"; the gain of a split is the reduction in the
//! sum of squared errors, `S₁²/n₁ + S₀²/n₀ - S²/n`, computed from per-bit
//! counts and sums accumulated over the set bits of the node's samples.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fingerprint::Fingerprint;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features considered per split; `None` means all.
    pub max_features: Option<usize>,
    pub min_samples_split: usize,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 10,
            max_features: None,
            min_samples_split: 2,
            bootstrap: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf { value: f64 },
    /// Samples with the bit clear go to `zero`, set to `one`.
    Split { feature: u32, zero: u32, one: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &Fingerprint) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, zero, one } => {
                    i = if x.get(feature as usize) { one } else { zero } as usize;
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { zero, one, .. } => 1 + walk(nodes, zero as usize).max(walk(nodes, one as usize)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Grow a tree on `samples` (indices into `xs`/`ys`; repeats allowed).
    pub fn fit(xs: &[Fingerprint], ys: &[f64], samples: Vec<usize>, params: &ForestParams, rng: &mut seed::Rng) -> Self {
        let p = xs.first().map_or(0, |x| x.len());
        let mut builder = Builder {
            xs,
            ys,
            params,
            p,
            nodes: Vec::new(),
            cnt: vec![0; p],
            sum: vec![0.0; p],
            features: (0..p).collect(),
        };
        builder.grow(samples, rng);
        RegressionTree { nodes: builder.nodes }
    }
}

struct Builder<'a> {
    xs: &'a [Fingerprint],
    ys: &'a [f64],
    params: &'a ForestParams,
    p: usize,
    nodes: Vec<Node>,
    cnt: Vec<u32>,
    sum: Vec<f64>,
    features: Vec<usize>,
}

impl Builder<'_> {
    fn grow(&mut self, samples: Vec<usize>, rng: &mut seed::Rng) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { value: 0.0 });
        let m = samples.len();
        let total: f64 = samples.iter().map(|&i| self.ys[i]).sum();
        let mean = total / m as f64;
        let pure = samples.iter().all(|&i| self.ys[i] == self.ys[samples[0]]);
        if m < self.params.min_samples_split.max(2) || pure {
            self.nodes[id as usize] = Node::Leaf { value: mean };
            return id;
        }
        let Some(feature) = self.best_split(&samples, total, rng) else {
            self.nodes[id as usize] = Node::Leaf { value: mean };
            return id;
        };
        let (one, zero): (Vec<usize>, Vec<usize>) = samples.into_iter().partition(|&i| self.xs[i].get(feature));
        let zero_id = self.grow(zero, rng);
        let one_id = self.grow(one, rng);
        self.nodes[id as usize] = Node::Split {
            feature: feature as u32,
            zero: zero_id,
            one: one_id,
        };
        id
    }

    fn best_split(&mut self, samples: &[usize], total: f64, rng: &mut seed::Rng) -> Option<usize> {
        let m = samples.len() as u32;
        self.cnt.iter_mut().for_each(|c| *c = 0);
        self.sum.iter_mut().for_each(|s| *s = 0.0);
        for &i in samples {
            let y = self.ys[i];
            for j in self.xs[i].ones() {
                self.cnt[j] += 1;
                self.sum[j] += y;
            }
        }
        let limit = match self.params.max_features {
            Some(k) if k < self.p => {
                self.features.shuffle(rng);
                k
            }
            _ => {
                // evaluate in index order so ties go to the lowest feature
                self.features.sort_unstable();
                self.p
            }
        };
        let mut best: Option<(f64, usize)> = None;
        let mut visited = 0;
        for &j in &self.features {
            if visited >= limit {
                break;
            }
            let n1 = self.cnt[j];
            if n1 == 0 || n1 == m {
                continue;
            }
            visited += 1;
            let n0 = m - n1;
            let s1 = self.sum[j];
            let s0 = total - s1;
            let gain = s1 * s1 / f64::from(n1) + s0 * s0 / f64::from(n0);
            best = match best {
                Some((g, f)) if g > gain || (g == gain && f < j) => Some((g, f)),
                _ => Some((gain, j)),
            };
        }
        best.map(|(_, j)| j)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<RegressionTree>,
}

impl ForestModel {
    pub fn predict(&self, x: &Fingerprint) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// Rows are put into a canonical order first and tree `t` draws from the
    /// substream `(seed, t)`, so the fit does not depend on row order or on
    /// the thread schedule.
    pub fn fit(xs: &[Fingerprint], ys: &[f64], params: &ForestParams, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let keys: Vec<Vec<u8>> = xs.iter().map(|x| x.sort_key()).collect();
        order.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(ys[a].total_cmp(&ys[b])));
        let cx: Vec<Fingerprint> = order.iter().map(|&i| xs[i].clone()).collect();
        let cy: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
        let n = cx.len();
        let trees = (0..params.n_trees.max(1))
            .into_par_iter()
            .map(|t| {
                let mut rng = seed::rng(seed::indexed(seed, t as u64));
                let samples = if params.bootstrap {
                    (0..n).map(|_| rng.gen_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                RegressionTree::fit(&cx, &cy, samples, params, &mut rng)
            })
            .collect();
        ForestModel { trees }
    }
}
