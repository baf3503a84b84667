//! The full network: agent-aware fusion followed by the boundary network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boundary_net::{BoundaryNet, BoundaryOutputs, NetCache};
use crate::config::ModelConfig;
use crate::data_model::FeatureBundle;
use crate::error::{Error, Result};
use crate::fusion::{FusionCache, FusionNet};
use crate::losses::{total_loss, LossReport};
use crate::nn::ParamSet;
use crate::supervision::SupervisionTargets;

#[derive(Debug, Clone)]
pub struct AbnModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub fusion: FusionNet,
    pub net: BoundaryNet,
}

pub struct ModelCache {
    fusion: FusionCache,
    net: NetCache,
}

impl AbnModel {
    /// Builds the network with parameters drawn from a seeded generator. The
    /// parameter layout depends only on `config`; values depend on `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let fusion = FusionNet::new(&mut params, config, &mut rng);
        let net = BoundaryNet::new(&mut params, config, &mut rng)?;
        params.round_to_f32();
        Ok(AbnModel {
            config: config.clone(),
            params,
            fusion,
            net,
        })
    }

    fn prepare(&self, bundle: &FeatureBundle) -> Result<FeatureBundle> {
        bundle.validate()?;
        if bundle.feature_dim() != self.config.feature_dim {
            return Err(Error::shape("feature dimension", self.config.feature_dim, bundle.feature_dim()));
        }
        Ok(bundle.rescale(self.config.temporal_scale))
    }

    pub fn forward(&self, bundle: &FeatureBundle) -> Result<BoundaryOutputs> {
        self.forward_cached(bundle).map(|(o, _)| o)
    }

    pub fn forward_cached(&self, bundle: &FeatureBundle) -> Result<(BoundaryOutputs, ModelCache)> {
        let bundle = self.prepare(bundle)?;
        let (features, fusion) = self.fusion.fuse_sequence(&self.params, &bundle)?;
        let (out, net) = self.net.forward(&self.params, features.view())?;
        Ok((out, ModelCache { fusion, net }))
    }

    /// Loss of one video; parameter gradients are added into `grads`.
    pub fn loss_and_grad(&self, bundle: &FeatureBundle, targets: &SupervisionTargets, grads: &mut ParamSet) -> Result<LossReport> {
        let (out, cache) = self.forward_cached(bundle)?;
        let (report, og) = total_loss(&out, targets, &self.config)?;
        let d_features = self.net.backward(&self.params, grads, &cache.net, &og);
        self.fusion.backward(&self.params, grads, &cache.fusion, d_features.view());
        Ok(report)
    }

    pub fn loss(&self, bundle: &FeatureBundle, targets: &SupervisionTargets) -> Result<LossReport> {
        let out = self.forward(bundle)?;
        total_loss(&out, targets, &self.config).map(|(r, _)| r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FeatureMode, NetWidths};
    use ndarray::Array2;

    pub(crate) fn tiny_config(mode: FeatureMode) -> ModelConfig {
        ModelConfig {
            temporal_scale: 8,
            max_duration: 4,
            feature_dim: 6,
            num_samples: 4,
            heads: 2,
            feature_mode: mode,
            widths: NetWidths {
                base1: 5,
                base2: 4,
                base3: 5,
                pam3d: 6,
                pam2d: 3,
            },
            ..ModelConfig::default()
        }
    }

    fn bundle(t: usize, c: usize) -> FeatureBundle {
        let g = Array2::from_shape_fn((t, c), |(i, j)| ((i * 7 + j * 3) % 5) as f32 * 0.2 - 0.4);
        let agents = (0..t)
            .map(|i| Array2::from_shape_fn((i % 3, c), |(a, j)| ((a + j + i) % 4) as f32 * 0.3 - 0.5))
            .collect();
        FeatureBundle::new("v", g, agents).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny_config(FeatureMode::AgentEnv);
        let a = AbnModel::new(&cfg, 3).unwrap();
        let b = AbnModel::new(&cfg, 3).unwrap();
        let c = AbnModel::new(&cfg, 4).unwrap();
        let same = a.params.entries().iter().zip(b.params.entries()).all(|(x, y)| x.value == y.value);
        assert!(same);
        let differ = a.params.entries().iter().zip(c.params.entries()).any(|(x, y)| x.value != y.value);
        assert!(differ);
    }

    #[test]
    fn forward_rescales_to_temporal_scale() {
        let cfg = tiny_config(FeatureMode::AgentEnv);
        let m = AbnModel::new(&cfg, 0).unwrap();
        let out = m.forward(&bundle(13, 6)).unwrap();
        assert_eq!(out.p_start.len(), 8);
        assert_eq!(out.p_cc.dim(), (4, 8));
        assert!(m.forward(&bundle(8, 5)).is_err());
    }

    #[test]
    fn env_only_has_no_fusion_parameters() {
        let m = AbnModel::new(&tiny_config(FeatureMode::EnvOnly), 0).unwrap();
        assert!(m.params.entries().iter().all(|e| !e.name.starts_with("fusion.")));
        let m = AbnModel::new(&tiny_config(FeatureMode::AgentOnly), 0).unwrap();
        assert!(m.params.find("fusion.no_agent").is_some());
        assert!(m.params.entries().iter().all(|e| !e.name.starts_with("fusion.env_agent")));
    }
}
