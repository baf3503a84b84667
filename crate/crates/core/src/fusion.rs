//! Agent-aware representation: self-attention pooling of the agents in a
//! snippet, then self-attention fusion of the pooled agent feature with the
//! environment feature.
//!
//! Both attention modules treat their inputs as unordered sets. No
//! positional encoding is applied, so outputs are invariant to row order.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::config::{FeatureMode, ModelConfig};
use crate::data_model::FeatureBundle;
use crate::error::{Error, Result};
use crate::nn::{relu_backward_inplace, relu_inplace, softmax_rows, LayerNorm, LayerNormCache, Linear, ParamId, ParamSet};

/// Multi-head scaled dot-product attention with query/key/value/output affine maps.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head `gamma x gamma` attention weights.
    pub weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl AttentionParams {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide the feature dimension");
        AttentionParams {
            query: Linear::new(params, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(params, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(params, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(params, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Row `i` of the result is `softmax(q_i K^T / sqrt(d_k)) V` per head,
    /// heads concatenated and passed through the output map.
    pub fn attend(&self, p: &ParamSet, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, AttentionCache)> {
        if inputs.nrows() == 0 {
            return Err(Error::Invalid("attention over an empty set".into()));
        }
        if inputs.ncols() != self.dim {
            return Err(Error::shape("attention input", self.dim, inputs.ncols()));
        }
        let q = self.query.forward(p, inputs);
        let k = self.key.forward(p, inputs);
        let v = self.value.forward(p, inputs);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Array2::zeros(inputs.raw_dim());
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let a = softmax_rows(scores);
            concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            weights.push(a);
        }
        let out = self.output.forward(p, concat.view());
        Ok((
            out,
            AttentionCache {
                input: inputs.to_owned(),
                q,
                k,
                v,
                weights,
                concat,
            },
        ))
    }

    pub fn backward(&self, p: &ParamSet, g: &mut ParamSet, cache: &AttentionCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let dconcat = self.output.backward(p, g, cache.concat.view(), dy);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, a) in cache.weights.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_out = dconcat.slice(cols);
            let da = d_out.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&d_out));
            let row_dot = (&da * a).sum_axis(Axis(1));
            let mut ds = da;
            for (mut row, &rd) in ds.rows_mut().into_iter().zip(row_dot.iter()) {
                row -= rd;
            }
            ds *= a;
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let x = cache.input.view();
        let mut dx = self.query.backward(p, g, x, dq.view());
        dx += &self.key.backward(p, g, x, dk.view());
        dx += &self.value.backward(p, g, x, dv.view());
        dx
    }
}

/// One encoder layer. With `block` the attention is wrapped as
/// `LN(x + attn(x))` followed by `LN(z + FFN(z))`; without it the layer is bare attention.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    block: Option<EncoderBlock>,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    norm1: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm2: LayerNorm,
}

pub struct EncoderCache {
    attn: AttentionCache,
    block: Option<BlockCache>,
}

struct BlockCache {
    norm1: LayerNormCache,
    z1: Array2<f64>,
    hidden: Array2<f64>,
    norm2: LayerNormCache,
}

impl EncoderLayer {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.feature_dim;
        let attn = AttentionParams::new(params, &format!("{name}.attn"), c, cfg.heads, rng);
        let block = cfg.encoder_block.then(|| EncoderBlock {
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), c),
            ffn_in: Linear::new(params, &format!("{name}.ffn_in"), c, cfg.ffn_mult * c, rng),
            ffn_out: Linear::new(params, &format!("{name}.ffn_out"), cfg.ffn_mult * c, c, rng),
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), c),
        });
        EncoderLayer { attn, block }
    }

    pub fn forward(&self, p: &ParamSet, x: ArrayView2<f64>) -> Result<(Array2<f64>, EncoderCache)> {
        let (a, attn) = self.attn.attend(p, x)?;
        let Some(b) = &self.block else {
            return Ok((a, EncoderCache { attn, block: None }));
        };
        let r1 = &x + &a;
        let (z1, norm1) = b.norm1.forward(p, r1.view());
        let mut hidden = b.ffn_in.forward(p, z1.view());
        relu_inplace(&mut hidden);
        let f = b.ffn_out.forward(p, hidden.view());
        let r2 = &z1 + &f;
        let (y, norm2) = b.norm2.forward(p, r2.view());
        Ok((
            y,
            EncoderCache {
                attn,
                block: Some(BlockCache {
                    norm1,
                    z1,
                    hidden,
                    norm2,
                }),
            },
        ))
    }

    pub fn backward(&self, p: &ParamSet, g: &mut ParamSet, cache: &EncoderCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let (Some(b), Some(c)) = (&self.block, &cache.block) else {
            return self.attn.backward(p, g, &cache.attn, dy);
        };
        let dr2 = b.norm2.backward(p, g, &c.norm2, dy);
        let mut dhidden = b.ffn_out.backward(p, g, c.hidden.view(), dr2.view());
        relu_backward_inplace(&mut dhidden, &c.hidden);
        let mut dz1 = b.ffn_in.backward(p, g, c.z1.view(), dhidden.view());
        dz1 += &dr2;
        let dr1 = b.norm1.backward(p, g, &c.norm1, dz1.view());
        let mut dx = self.attn.backward(p, g, &cache.attn, dr1.view());
        dx += &dr1;
        dx
    }
}

/// Stack of encoder layers followed by average pooling over the set.
#[derive(Debug, Clone)]
pub struct SelfAttentionModule {
    pub layers: Vec<EncoderLayer>,
}

pub struct ModuleCache {
    layers: Vec<EncoderCache>,
    rows: usize,
}

impl SelfAttentionModule {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(params, &format!("{name}.layer{i}"), cfg, rng))
            .collect();
        SelfAttentionModule { layers }
    }

    pub fn forward(&self, p: &ParamSet, set: ArrayView2<f64>) -> Result<(Array1<f64>, ModuleCache)> {
        let mut x = set.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(p, x.view())?;
            caches.push(c);
            x = y;
        }
        let pooled = x.mean_axis(Axis(0)).expect("non-empty set");
        Ok((
            pooled,
            ModuleCache {
                layers: caches,
                rows: set.nrows(),
            },
        ))
    }

    pub fn backward(&self, p: &ParamSet, g: &mut ParamSet, cache: &ModuleCache, dpooled: ArrayView1<f64>) -> Array2<f64> {
        let row = &dpooled / cache.rows as f64;
        let mut dx = row.broadcast((cache.rows, row.len())).unwrap().to_owned();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            dx = layer.backward(p, g, c, dx.view());
        }
        dx
    }
}

/// The agent-aware representation network.
#[derive(Debug, Clone)]
pub struct FusionNet {
    pub mode: FeatureMode,
    pub dim: usize,
    /// Pools the agents of one snippet.
    pub agent_pool: Option<SelfAttentionModule>,
    /// Fuses the `{environment, agent}` pair.
    pub env_agent: Option<SelfAttentionModule>,
    /// Stands in for the pooled agent feature of snippets without agents.
    pub no_agent: Option<ParamId>,
}

enum PoolCache {
    NoAgent,
    Attended(ModuleCache),
}

struct SnippetCache {
    pool: Option<PoolCache>,
    fuse: Option<ModuleCache>,
}

pub struct FusionCache {
    snippets: Vec<SnippetCache>,
}

impl FusionNet {
    pub fn new<R: Rng>(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.feature_dim;
        let uses_agents = cfg.feature_mode != FeatureMode::EnvOnly;
        let agent_pool = uses_agents.then(|| SelfAttentionModule::new(params, "fusion.agent", cfg, rng));
        let no_agent = uses_agents.then(|| params.add_const("fusion.no_agent", &[c], 0.0));
        let env_agent = (cfg.feature_mode == FeatureMode::AgentEnv)
            .then(|| SelfAttentionModule::new(params, "fusion.env_agent", cfg, rng));
        FusionNet {
            mode: cfg.feature_mode,
            dim: c,
            agent_pool,
            env_agent,
            no_agent,
        }
    }

    fn pool(&self, p: &ParamSet, agents: ArrayView2<f64>) -> Result<(Array1<f64>, PoolCache)> {
        let (module, no_agent) = match (&self.agent_pool, self.no_agent) {
            (Some(m), Some(n)) => (m, n),
            _ => return Err(Error::Invalid("agent pooling is disabled in env_only mode".into())),
        };
        if agents.ncols() != self.dim {
            return Err(Error::shape("agent features", self.dim, agents.ncols()));
        }
        if agents.nrows() == 0 {
            return Ok((p.vector(no_agent).to_owned(), PoolCache::NoAgent));
        }
        let (v, c) = module.forward(p, agents)?;
        Ok((v, PoolCache::Attended(c)))
    }

    /// Attention-pools an `A_t x C` agent set into one vector. An empty set
    /// yields the learned no-agent embedding.
    pub fn pool_agents(&self, p: &ParamSet, agents: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.pool(p, agents).map(|(v, _)| v)
    }

    fn fuse(&self, p: &ParamSet, env: ArrayView1<f64>, agent: ArrayView1<f64>) -> Result<(Array1<f64>, ModuleCache)> {
        let module = self
            .env_agent
            .as_ref()
            .ok_or_else(|| Error::Invalid("environment/agent fusion is only built in agent_env mode".into()))?;
        if env.len() != self.dim || agent.len() != self.dim {
            return Err(Error::shape("fusion inputs", self.dim, format!("{} and {}", env.len(), agent.len())));
        }
        let mut pair = Array2::zeros((2, self.dim));
        pair.row_mut(0).assign(&env);
        pair.row_mut(1).assign(&agent);
        module.forward(p, pair.view())
    }

    /// Attends over the two-element set `{env, agent}` and averages.
    pub fn fuse_snippet(&self, p: &ParamSet, env: ArrayView1<f64>, agent: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.fuse(p, env, agent).map(|(v, _)| v)
    }

    /// Builds the `T x C` snippet feature sequence of a bundle.
    pub fn fuse_sequence(&self, p: &ParamSet, bundle: &FeatureBundle) -> Result<(Array2<f64>, FusionCache)> {
        if bundle.feature_dim() != self.dim {
            return Err(Error::shape("bundle feature dimension", self.dim, bundle.feature_dim()));
        }
        let t = bundle.snippets();
        let global = bundle.global_feats.mapv(f64::from);
        let mut out = Array2::zeros((t, self.dim));
        let mut snippets = Vec::with_capacity(t);
        for i in 0..t {
            let env = global.row(i);
            let cache = match self.mode {
                FeatureMode::EnvOnly => {
                    out.row_mut(i).assign(&env);
                    SnippetCache { pool: None, fuse: None }
                }
                FeatureMode::AgentOnly => {
                    let agents = bundle.agent_feats[i].mapv(f64::from);
                    let (a, pc) = self.pool(p, agents.view())?;
                    out.row_mut(i).assign(&a);
                    SnippetCache {
                        pool: Some(pc),
                        fuse: None,
                    }
                }
                FeatureMode::AgentEnv => {
                    let agents = bundle.agent_feats[i].mapv(f64::from);
                    let (a, pc) = self.pool(p, agents.view())?;
                    let (f, fc) = self.fuse(p, env, a.view())?;
                    out.row_mut(i).assign(&f);
                    SnippetCache {
                        pool: Some(pc),
                        fuse: Some(fc),
                    }
                }
            };
            snippets.push(cache);
        }
        Ok((out, FusionCache { snippets }))
    }

    /// Accumulates parameter gradients from `dL/dF`.
    pub fn backward(&self, p: &ParamSet, g: &mut ParamSet, cache: &FusionCache, d_features: ArrayView2<f64>) {
        for (i, sc) in cache.snippets.iter().enumerate() {
            let mut d_agent = d_features.row(i).to_owned();
            if let (Some(fc), Some(m)) = (&sc.fuse, &self.env_agent) {
                let dpair = m.backward(p, g, fc, d_features.row(i));
                d_agent = dpair.row(1).to_owned();
            }
            match &sc.pool {
                Some(PoolCache::NoAgent) => {
                    let id = self.no_agent.expect("pooling enabled");
                    g.get_mut(id).row_mut(0).scaled_add(1.0, &d_agent);
                }
                Some(PoolCache::Attended(mc)) => {
                    let m = self.agent_pool.as_ref().expect("pooling enabled");
                    m.backward(p, g, mc, d_agent.view());
                }
                None => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(c: usize, heads: usize, block: bool) -> ModelConfig {
        ModelConfig {
            feature_dim: c,
            heads,
            encoder_block: block,
            ..ModelConfig::default()
        }
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_key_attention_is_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        let attn = AttentionParams::new(&mut p, "a", 8, 4, &mut rng);
        let x = rand_mat(1, 8, &mut rng);
        let (y, _) = attn.attend(&p, x.view()).unwrap();
        let expect = attn.output.forward(&p, attn.value.forward(&p, x.view()).view());
        assert_eq!(y, expect);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        let attn = AttentionParams::new(&mut p, "a", 4, 2, &mut rng);
        let row = rand_mat(1, 4, &mut rng);
        let x = row.broadcast((3, 4)).unwrap().to_owned();
        let (y, _) = attn.attend(&p, x.view()).unwrap();
        for r in 1..3 {
            for c in 0..4 {
                assert!((y[[r, c]] - y[[0, c]]).abs() < 1e-15);
            }
        }
    }

    /// Two 2-d inputs, one head, identity q/k, v = 2x, output identity, zero biases.
    /// Scores: x0.x0 = 1, x0.x1 = 0, x1.x1 = 4 (scaled by 1/sqrt(2)).
    #[test]
    fn hand_computed_two_element_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let attn = AttentionParams::new(&mut p, "a", 2, 1, &mut rng);
        let eye = Array2::<f64>::eye(2);
        *p.get_mut(attn.query.weight) = eye.clone();
        *p.get_mut(attn.key.weight) = eye.clone();
        *p.get_mut(attn.value.weight) = &eye * 2.0;
        *p.get_mut(attn.output.weight) = eye;
        for l in [attn.query, attn.key, attn.value, attn.output] {
            p.get_mut(l.bias).fill(0.0);
        }
        let x = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let (y, cache) = attn.attend(&p, x.view()).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        // row 0: scores (r, 0); row 1: scores (0, 4r)
        let w00 = r.exp() / (r.exp() + 1.0);
        let w11 = (4.0 * r).exp() / (1.0 + (4.0 * r).exp());
        let expect = [[2.0 * w00, 4.0 * (1.0 - w00)], [2.0 * (1.0 - w11), 4.0 * w11]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((y[[i, j]] - expect[i][j]).abs() < 1e-14, "{i},{j}");
            }
        }
        assert!((cache.weights[0][[0, 0]] - w00).abs() < 1e-15);
    }

    #[test]
    fn attention_rows_are_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamSet::new();
        let attn = AttentionParams::new(&mut p, "a", 8, 4, &mut rng);
        let x = rand_mat(5, 8, &mut rng) * 3.0;
        let (_, cache) = attn.attend(&p, x.view()).unwrap();
        for a in &cache.weights {
            for row in a.rows() {
                assert!(row.iter().all(|&w| w >= 0.0));
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attend_rejects_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::new();
        let attn = AttentionParams::new(&mut p, "a", 8, 4, &mut rng);
        assert!(attn.attend(&p, rand_mat(2, 6, &mut rng).view()).is_err());
    }

    #[test]
    fn pooling_single_agent_and_empty_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ParamSet::new();
        let net = FusionNet::new(&mut p, &cfg(8, 4, false), &mut rng);
        let agent = rand_mat(1, 8, &mut rng);
        let pooled = net.pool_agents(&p, agent.view()).unwrap();
        let attn = &net.agent_pool.as_ref().unwrap().layers[0].attn;
        let expect = attn.output.forward(&p, attn.value.forward(&p, agent.view()).view());
        assert_eq!(pooled, expect.row(0));

        let id = net.no_agent.unwrap();
        p.get_mut(id).mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let empty = Array2::<f64>::zeros((0, 8));
        assert_eq!(net.pool_agents(&p, empty.view()).unwrap(), p.vector(id));
    }

    #[test]
    fn fusion_of_identical_inputs_and_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamSet::new();
        let net = FusionNet::new(&mut p, &cfg(8, 4, false), &mut rng);
        let v = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let f = net.fuse_snippet(&p, v.view(), v.view()).unwrap();
        let attn = &net.env_agent.as_ref().unwrap().layers[0].attn;
        let row = v.clone().insert_axis(Axis(0));
        let expect = attn.output.forward(&p, attn.value.forward(&p, row.view()).view());
        for j in 0..8 {
            assert!((f[j] - expect[[0, j]]).abs() < 1e-14);
        }

        let mut p = ParamSet::new();
        let net = FusionNet::new(&mut p, &cfg(8, 4, true), &mut rng);
        let a = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let x = net.fuse_snippet(&p, v.view(), a.view()).unwrap();
        let y = net.fuse_snippet(&p, a.view(), v.view()).unwrap();
        for j in 0..8 {
            assert!((x[j] - y[j]).abs() < 1e-12);
        }
        assert!(net.fuse_snippet(&p, v.view(), Array1::zeros(4).view()).is_err());
    }

    #[test]
    fn sequence_rows_match_per_snippet_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = ParamSet::new();
        let net = FusionNet::new(&mut p, &cfg(8, 4, true), &mut rng);
        let global = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0f32..1.0));
        let agents: Vec<Array2<f32>> = (0..5)
            .map(|t| Array2::from_shape_fn((t % 3, 8), |_| rng.gen_range(-1.0f32..1.0)))
            .collect();
        let bundle = FeatureBundle::new("v", global.clone(), agents.clone()).unwrap();
        let (seq, _) = net.fuse_sequence(&p, &bundle).unwrap();
        assert_eq!(seq.dim(), (5, 8));
        for t in 0..5 {
            let a = net.pool_agents(&p, agents[t].mapv(f64::from).view()).unwrap();
            let env = global.row(t).mapv(f64::from);
            let f = net.fuse_snippet(&p, env.view(), a.view()).unwrap();
            assert_eq!(seq.row(t), f);
        }
    }

    #[test]
    fn agentless_bundle_uses_embedding_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamSet::new();
        let net = FusionNet::new(&mut p, &cfg(4, 2, true), &mut rng);
        let global = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0f32..1.0));
        let bundle = FeatureBundle::new("v", global.clone(), vec![Array2::zeros((0, 4)); 3]).unwrap();
        let (seq, _) = net.fuse_sequence(&p, &bundle).unwrap();
        let emb = p.vector(net.no_agent.unwrap()).to_owned();
        for t in 0..3 {
            let env = global.row(t).mapv(f64::from);
            assert_eq!(seq.row(t), net.fuse_snippet(&p, env.view(), emb.view()).unwrap());
        }
    }

    #[test]
    fn env_only_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = ParamSet::new();
        let mut c = cfg(4, 2, true);
        c.feature_mode = FeatureMode::EnvOnly;
        let net = FusionNet::new(&mut p, &c, &mut rng);
        assert!(p.is_empty());
        let global = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0f32..1.0));
        let bundle = FeatureBundle::new("v", global.clone(), vec![Array2::zeros((1, 4)); 3]).unwrap();
        let (seq, _) = net.fuse_sequence(&p, &bundle).unwrap();
        assert_eq!(seq, global.mapv(f64::from));
    }
}
