//! Time-aware activation quantizers.
//!
//! The `T` denoising steps are split into `num_clusters` contiguous runs of
//! `⌊T / num_clusters⌋` steps; the last run absorbs the remainder. Each
//! (layer, cluster) pair owns its own activation [`QuantParams`], and the
//! first step of every run is the representative step that gets calibrated.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::QuantParams;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    total_steps: usize,
    num_clusters: usize,
}

impl ClusterMap {
    pub fn new(total_steps: usize, num_clusters: usize) -> Result<Self> {
        if num_clusters == 0 || num_clusters > total_steps {
            return Err(Error::Contract(format!(
                "need 1 <= num_clusters <= T, got {num_clusters} clusters for T={total_steps}"
            )));
        }
        Ok(Self {
            total_steps,
            num_clusters,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    fn run(&self) -> usize {
        self.total_steps / self.num_clusters
    }

    /// Zero-based cluster of step `t ∈ [1, T]`.
    pub fn cluster_of(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.total_steps {
            return Err(Error::Contract(format!(
                "step {t} outside [1, {}]",
                self.total_steps
            )));
        }
        Ok(((t - 1) / self.run()).min(self.num_clusters - 1))
    }

    /// Inclusive step range of a cluster.
    pub fn steps_of(&self, cluster: usize) -> (usize, usize) {
        let start = cluster * self.run() + 1;
        let end = if cluster + 1 == self.num_clusters {
            self.total_steps
        } else {
            start + self.run() - 1
        };
        (start, end)
    }

    pub fn representative(&self, cluster: usize) -> usize {
        self.steps_of(cluster).0
    }

    /// The uniformly sampled calibration steps, one per cluster, ascending.
    pub fn representatives(&self) -> Vec<usize> {
        (0..self.num_clusters)
            .map(|k| self.representative(k))
            .collect()
    }
}

/// Per-layer, per-cluster activation quantization parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeAwareQuantizerSet {
    map: ClusterMap,
    params: BTreeMap<(String, usize), QuantParams>,
}

/// Empty quantizer set over `T` steps split into `num_clusters` runs.
pub fn build_cluster_map(total_steps: usize, num_clusters: usize) -> Result<TimeAwareQuantizerSet> {
    Ok(TimeAwareQuantizerSet {
        map: ClusterMap::new(total_steps, num_clusters)?,
        params: BTreeMap::new(),
    })
}

impl TimeAwareQuantizerSet {
    pub fn map(&self) -> &ClusterMap {
        &self.map
    }

    pub fn cluster_of(&self, t: usize) -> Result<usize> {
        self.map.cluster_of(t)
    }

    pub fn insert(&mut self, layer: &str, cluster: usize, p: QuantParams) -> Result<()> {
        if cluster >= self.map.num_clusters() {
            return Err(Error::Contract(format!(
                "cluster {cluster} out of range for layer `{layer}`"
            )));
        }
        p.validate()?;
        self.params.insert((layer.to_string(), cluster), p);
        Ok(())
    }

    /// Parameters of `layer` for the cluster containing step `t`.
    pub fn select_params(&self, layer: &str, t: usize) -> Result<&QuantParams> {
        let cluster = self.map.cluster_of(t)?;
        self.get(layer, cluster)
    }

    pub fn get(&self, layer: &str, cluster: usize) -> Result<&QuantParams> {
        self.params
            .get(&(layer.to_string(), cluster))
            .ok_or_else(|| Error::MissingQuantParams {
                layer: layer.to_string(),
                cluster,
            })
    }

    pub fn get_mut(&mut self, layer: &str, cluster: usize) -> Result<&mut QuantParams> {
        self.params
            .get_mut(&(layer.to_string(), cluster))
            .ok_or_else(|| Error::MissingQuantParams {
                layer: layer.to_string(),
                cluster,
            })
    }

    /// Whether `layer` has activation quantizers at all.
    pub fn covers(&self, layer: &str) -> bool {
        self.params
            .range((layer.to_string(), 0)..(layer.to_string(), usize::MAX))
            .next()
            .is_some()
    }

    pub fn layers(&self) -> BTreeSet<&str> {
        self.params.keys().map(|(l, _)| l.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize, &QuantParams)> {
        self.params.iter().map(|((l, c), p)| (l.as_str(), *c, p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Errors unless every covered layer has parameters for every cluster.
    pub fn check_total(&self) -> Result<()> {
        for layer in self.layers() {
            for c in 0..self.map.num_clusters() {
                self.get(layer, c)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(m: &ClusterMap) -> Vec<usize> {
        (0..m.num_clusters())
            .map(|k| m.steps_of(k))
            .map(|(a, b)| b - a + 1)
            .collect()
    }

    #[test]
    fn paper_setting_has_ten_step_clusters() {
        let m = ClusterMap::new(200, 20).unwrap();
        assert!(sizes(&m).iter().all(|&s| s == 10));
        assert_eq!(m.representatives()[..3], [1, 11, 21]);
    }

    #[test]
    fn identity_and_remainder_clustering() {
        let m = ClusterMap::new(10, 10).unwrap();
        for t in 1..=10 {
            assert_eq!(m.cluster_of(t).unwrap(), t - 1);
        }
        let m = ClusterMap::new(10, 3).unwrap();
        assert_eq!(sizes(&m), vec![3, 3, 4]);
        assert_eq!(m.cluster_of(10).unwrap(), 2);
        assert_eq!(m.cluster_of(7).unwrap(), 2);
        assert_eq!(m.cluster_of(6).unwrap(), 1);
    }

    #[test]
    fn invalid_maps_rejected() {
        assert!(ClusterMap::new(10, 11).is_err());
        assert!(ClusterMap::new(10, 0).is_err());
        let m = ClusterMap::new(10, 2).unwrap();
        assert!(m.cluster_of(0).is_err());
        assert!(m.cluster_of(11).is_err());
    }

    #[test]
    fn partition_is_total_and_contiguous() {
        for total in 1..60 {
            for k in 1..=total {
                let m = ClusterMap::new(total, k).unwrap();
                let mut prev = 0;
                for t in 1..=total {
                    let c = m.cluster_of(t).unwrap();
                    assert!(c == prev || c == prev + 1);
                    let (a, b) = m.steps_of(c);
                    assert!(a <= t && t <= b);
                    prev = c;
                }
                assert_eq!(prev, k - 1);
            }
        }
    }

    #[test]
    fn select_params_is_a_lookup() {
        let mut set = build_cluster_map(200, 20).unwrap();
        for c in 0..20 {
            let p = QuantParams::new(0.1 * (c + 1) as f32, 0, 4, true).unwrap();
            set.insert("fc", c, p).unwrap();
        }
        let a = set.select_params("fc", 5).unwrap();
        let b = set.select_params("fc", 10).unwrap();
        assert!(std::ptr::eq(a, b));
        assert_eq!(set.select_params("fc", 1).unwrap().scale, 0.1);
        assert_eq!(
            set.select_params("fc", 200).unwrap(),
            set.get("fc", 19).unwrap()
        );
        let err = set.select_params("other", 3).unwrap_err().to_string();
        assert!(err.contains("other") && err.contains('0'));
        set.check_total().unwrap();
    }
}
