use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cache::KvCache;
use super::config::{config_hash, LoraConfig, ModelConfig, PROJECTIONS};
use super::rope::RopeTables;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, SegmentFn, Tensor, Var};

const INIT_STD: f32 = 0.02;

/// A named weight. Frozen weights enter graphs as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    attn_norm: usize,
    mlp_norm: usize,
    /// Base matrix for each entry of [`PROJECTIONS`].
    proj: [usize; 6],
    /// `(lora_a, lora_b)` for each adapted projection.
    lora: [Option<(usize, usize)>; 6],
}

/// Decoder-only transformer: token embedding, pre-norm blocks (causal
/// multi-head attention with rotary positions, GELU MLP), final RMS norm and an
/// untied LM head. Optionally a scalar reward head and LoRA adapters.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    lora: Option<LoraConfig>,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    layers: Vec<LayerIdx>,
}

/// Parameters of one forward pass entered into a graph, in parameter order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Inputs to one block, in a fixed order usable as checkpoint inputs.
struct BlockVars {
    attn_norm: Var,
    mlp_norm: Var,
    proj: [Var; 6],
    lora: [Option<(Var, Var)>; 6],
}

impl BlockVars {
    fn flatten(&self) -> Vec<Var> {
        let mut out = vec![self.attn_norm, self.mlp_norm];
        out.extend_from_slice(&self.proj);
        for (a, b) in self.lora.iter().flatten() {
            out.push(*a);
            out.push(*b);
        }
        out
    }

    fn unflatten(vars: &[Var], mask: [bool; 6]) -> (Self, usize) {
        let proj = std::array::from_fn(|i| vars[2 + i]);
        let mut at = 8;
        let lora = std::array::from_fn(|i| {
            mask[i].then(|| {
                at += 2;
                (vars[at - 2], vars[at - 1])
            })
        });
        (Self { attn_norm: vars[0], mlp_norm: vars[1], proj, lora }, at)
    }

    fn lora_mask(&self) -> [bool; 6] {
        std::array::from_fn(|i| self.lora[i].is_some())
    }
}

struct BlockSpec {
    heads: usize,
    seqs: usize,
    offset: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
    lora_scale: f32,
}

fn project(g: &mut Graph, spec: &BlockSpec, x: Var, w: &BlockVars, which: usize) -> Result<Var> {
    let y = g.matmul_nt(x, w.proj[which])?;
    match w.lora[which] {
        None => Ok(y),
        Some((a, b)) => {
            let t = g.matmul_nt(x, a)?;
            let u = g.matmul_nt(t, b)?;
            let u = g.scale(u, spec.lora_scale)?;
            g.add(y, u)
        }
    }
}

/// One pre-norm block. Returns the block output and the rotated keys and
/// values of the new positions (for the cache).
fn block(g: &mut Graph, spec: &BlockSpec, x: Var, w: &BlockVars, past: Option<(Var, Var)>) -> Result<(Var, Var, Var)> {
    let h = g.rmsnorm(x, w.attn_norm)?;
    let q = project(g, spec, h, w, 0)?;
    let k = project(g, spec, h, w, 1)?;
    let v = project(g, spec, h, w, 2)?;
    let q = g.rope(q, spec.heads, &spec.cos, &spec.sin)?;
    let k = g.rope(k, spec.heads, &spec.cos, &spec.sin)?;
    let (k_all, v_all) = match past {
        Some((kp, vp)) => (g.concat(&[kp, k], 0)?, g.concat(&[vp, v], 0)?),
        None => (k, v),
    };
    let a = g.attention(q, k_all, v_all, spec.heads, spec.seqs, spec.offset)?;
    let o = project(g, spec, a, w, 3)?;
    let x = g.add(x, o)?;
    let h = g.rmsnorm(x, w.mlp_norm)?;
    let f = project(g, spec, h, w, 4)?;
    let f = g.gelu(f)?;
    let f = project(g, spec, f, w, 5)?;
    Ok((g.add(x, f)?, k, v))
}

fn proj_name(layer: usize, which: usize) -> String {
    let group = if which < 4 { "attn" } else { "mlp" };
    format!("layers.{layer}.{group}.{}", PROJECTIONS[which])
}

impl Transformer {
    /// Random initialisation: N(0, 0.02) weights, residual output projections
    /// scaled by 1/√(2·n_layers), unit norm gains, zero reward head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init_std(config, seed, INIT_STD)
    }

    pub fn with_init_std(config: ModelConfig, seed: u64, std: f32) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab);
        let resid = std / (2.0 * config.n_layers as f32).sqrt();
        let mut params = Vec::new();
        let mut push = |name: String, value: Tensor| params.push(Param { name, value, frozen: false });
        push("tok_embeddings".into(), Tensor::randn(&[v, d], std, &mut rng));
        for l in 0..config.n_layers {
            push(format!("layers.{l}.attn_norm"), Tensor::full(&[d], 1.0));
            for (i, shape) in [[d, d], [d, d], [d, d], [d, d], [f, d], [d, f]].iter().enumerate() {
                let s = if i == 3 || i == 5 { resid } else { std };
                push(proj_name(l, i), Tensor::randn(shape, s, &mut rng));
            }
            push(format!("layers.{l}.mlp_norm"), Tensor::full(&[d], 1.0));
        }
        push("final_norm".into(), Tensor::full(&[d], 1.0));
        push("lm_head".into(), Tensor::randn(&[v, d], std, &mut rng));
        if config.reward_head {
            push("reward_head".into(), Tensor::zeros(&[1, d]));
        }
        Self::from_params(config, None, params)
    }

    /// Rebuilds a model from named tensors, checking that names and shapes
    /// match the architecture.
    pub fn from_params(config: ModelConfig, lora: Option<LoraConfig>, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        if let Some(l) = &lora {
            l.validate()?;
        }
        let expected = Self::expected_shapes(&config, lora.as_ref());
        if expected.len() != params.len() {
            return Err(Error::Format {
                file: "parameters".into(),
                msg: format!("expected {} tensors, got {}", expected.len(), params.len()),
            });
        }
        let mut index = HashMap::new();
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::Format { file: "parameters".into(), msg: format!("duplicate tensor {}", p.name) });
            }
        }
        for (name, shape) in &expected {
            let Some(&i) = index.get(name) else {
                return Err(Error::Format { file: "parameters".into(), msg: format!("missing tensor {name}") });
            };
            if params[i].value.shape() != shape.as_slice() {
                return Err(Error::Format {
                    file: "parameters".into(),
                    msg: format!("tensor {name} has shape {:?}, expected {shape:?}", params[i].value.shape()),
                });
            }
        }
        let mut model = Self { config, lora, params, index, layers: Vec::new() };
        model.rebuild_layers();
        Ok(model)
    }

    fn expected_shapes(config: &ModelConfig, lora: Option<&LoraConfig>) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab);
        let dims = [(d, d), (d, d), (d, d), (d, d), (f, d), (d, f)];
        let mut out = vec![("tok_embeddings".to_string(), vec![v, d])];
        for l in 0..config.n_layers {
            out.push((format!("layers.{l}.attn_norm"), vec![d]));
            out.push((format!("layers.{l}.mlp_norm"), vec![d]));
            for (i, &(o, n)) in dims.iter().enumerate() {
                out.push((proj_name(l, i), vec![o, n]));
                if let Some(cfg) = lora.filter(|c| c.targets_mask()[i]) {
                    out.push((format!("{}.lora_a", proj_name(l, i)), vec![cfg.rank, n]));
                    out.push((format!("{}.lora_b", proj_name(l, i)), vec![o, cfg.rank]));
                }
            }
        }
        out.push(("final_norm".into(), vec![d]));
        out.push(("lm_head".into(), vec![v, d]));
        if config.reward_head {
            out.push(("reward_head".into(), vec![1, d]));
        }
        out
    }

    fn rebuild_layers(&mut self) {
        let idx = |name: &str| self.index.get(name).copied();
        self.layers = (0..self.config.n_layers)
            .map(|l| LayerIdx {
                attn_norm: idx(&format!("layers.{l}.attn_norm")).expect("param"),
                mlp_norm: idx(&format!("layers.{l}.mlp_norm")).expect("param"),
                proj: std::array::from_fn(|i| idx(&proj_name(l, i)).expect("param")),
                lora: std::array::from_fn(|i| {
                    let base = proj_name(l, i);
                    Some((idx(&format!("{base}.lora_a"))?, idx(&format!("{base}.lora_b"))?))
                }),
            })
            .collect();
    }

    fn reindex(&mut self) {
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        self.rebuild_layers();
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config, self.lora.as_ref())
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Number of scalars that receive gradients.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }

    /// Freezes (or thaws) every parameter whose name satisfies `pred`.
    pub fn set_frozen(&mut self, frozen: bool, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            if pred(&p.name) {
                p.frozen = frozen;
            }
        }
    }

    /// Enters every parameter into `g`: trainable ones as gradient leaves,
    /// frozen ones as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.params.iter().map(|p| g.leaf(p.value.clone(), !p.frozen)).collect();
        Bound { vars }
    }

    fn var(&self, bound: &Bound, name: &str) -> Result<Var> {
        self.param_index(name)
            .map(|i| bound.vars[i])
            .ok_or_else(|| Error::Contract(format!("model has no parameter {name}")))
    }

    fn block_vars(&self, bound: &Bound, l: usize) -> BlockVars {
        let li = &self.layers[l];
        BlockVars {
            attn_norm: bound.vars[li.attn_norm],
            mlp_norm: bound.vars[li.mlp_norm],
            proj: std::array::from_fn(|i| bound.vars[li.proj[i]]),
            lora: std::array::from_fn(|i| li.lora[i].map(|(a, b)| (bound.vars[a], bound.vars[b]))),
        }
    }

    /// Final-normed hidden states `[seqs·T, d_model]` for equal-length sequences.
    ///
    /// With a cache (single sequence only) the tokens continue the cached
    /// prefix and their keys/values are appended. `checkpointing` recomputes
    /// block activations during the backward pass instead of storing them.
    pub fn hidden(
        &self,
        g: &mut Graph,
        bound: &Bound,
        seqs: &[&[u32]],
        mut cache: Option<&mut KvCache>,
        checkpointing: bool,
    ) -> Result<Var> {
        let n = seqs.len();
        let t = seqs.first().map_or(0, |s| s.len());
        if n == 0 || t == 0 {
            return Err(Error::DegenerateInput("forward pass over no tokens".into()));
        }
        if seqs.iter().any(|s| s.len() != t) {
            return Err(Error::Dimension("sequences in a batch must have equal length".into()));
        }
        let offset = cache.as_ref().map_or(0, |c| c.len());
        if cache.is_some() && n != 1 {
            return Err(Error::Contract("a KV cache holds a single sequence".into()));
        }
        let limit = self.config.max_positions();
        if offset + t > limit {
            return Err(Error::Length(format!(
                "{} positions exceed the model limit of {limit} (pi_scale {} × context {})",
                offset + t,
                self.config.pi_scale,
                self.config.context
            )));
        }
        let ids: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = (0..n).flat_map(|_| offset..offset + t).collect();
        let tables = RopeTables::new(&positions, self.config.head_dim(), self.config.rope_base, self.config.pi_scale)?;
        let spec = Rc::new(BlockSpec {
            heads: self.config.n_heads,
            seqs: n,
            offset,
            cos: tables.cos,
            sin: tables.sin,
            lora_scale: self.lora.as_ref().map_or(1.0, |l| l.scale()),
        });
        let table = self.var(bound, "tok_embeddings")?;
        let mut x = g.embedding(table, &ids)?;
        let layers = self.config.n_layers;
        if checkpointing && cache.is_none() {
            let group = (layers as f64).sqrt().ceil() as usize;
            for start in (0..layers).step_by(group) {
                let blocks: Vec<BlockVars> =
                    (start..(start + group).min(layers)).map(|l| self.block_vars(bound, l)).collect();
                let masks: Vec<[bool; 6]> = blocks.iter().map(|b| b.lora_mask()).collect();
                let mut inputs = vec![x];
                for b in &blocks {
                    inputs.extend(b.flatten());
                }
                let spec = spec.clone();
                let segment: SegmentFn = Rc::new(move |g: &mut Graph, vars: &[Var]| {
                    let mut x = vars[0];
                    let mut at = 1;
                    for &mask in &masks {
                        let (w, used) = BlockVars::unflatten(&vars[at..], mask);
                        at += used;
                        x = block(g, &spec, x, &w, None)?.0;
                    }
                    Ok(x)
                });
                x = g.checkpoint(&inputs, segment)?;
            }
        } else {
            for l in 0..layers {
                let w = self.block_vars(bound, l);
                let past = match cache.as_deref() {
                    Some(c) => c.layer(l).map(|(k, v)| (g.constant(k), g.constant(v))),
                    None => None,
                };
                let (out, k, v) = block(g, &spec, x, &w, past)?;
                if let Some(c) = cache.as_deref_mut() {
                    c.append(l, g.value(k).data(), g.value(v).data());
                }
                x = out;
            }
            if let Some(c) = cache {
                c.advance(t);
            }
        }
        let gain = self.var(bound, "final_norm")?;
        g.rmsnorm(x, gain)
    }

    /// LM logits `[rows, vocab]` from hidden states.
    pub fn logits(&self, g: &mut Graph, bound: &Bound, hidden: Var) -> Result<Var> {
        let head = self.var(bound, "lm_head")?;
        g.matmul_nt(hidden, head)
    }

    /// Scalar reward per selected hidden row, shape `[rows.len(), 1]`.
    pub fn reward_scores(&self, g: &mut Graph, bound: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        if !self.config.reward_head {
            return Err(Error::Config("model has no reward head".into()));
        }
        let head = self.var(bound, "reward_head")?;
        let picked = g.gather_rows(hidden, rows)?;
        g.matmul_nt(picked, head)
    }

    /// Inference-only logits for one sequence, `[tokens.len(), vocab]`.
    pub fn forward(&self, tokens: &[u32], cache: Option<&mut KvCache>) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g);
        let h = self.hidden(&mut g, &bound, &[tokens], cache, false)?;
        let logits = self.logits(&mut g, &bound, h)?;
        Ok(g.value(logits).clone())
    }

    /// Inference-only logits for a batch of equal-length sequences.
    pub fn forward_batch(&self, seqs: &[&[u32]]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g);
        let h = self.hidden(&mut g, &bound, seqs, None, false)?;
        let logits = self.logits(&mut g, &bound, h)?;
        Ok(g.value(logits).clone())
    }

    fn bind_constant(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.constant(p.value.clone())).collect() }
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.n_layers, self.config.d_model)
    }

    /// Attaches low-rank adapters to the configured projections and freezes
    /// everything else. `A` is N(0, 0.02²) and `B` is zero, so outputs are unchanged.
    pub fn attach_lora(&mut self, cfg: LoraConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        if self.lora.is_some() {
            return Err(Error::State("LoRA adapters are already attached".into()));
        }
        let (d, f) = (self.config.d_model, self.config.d_ff);
        let dims = [(d, d), (d, d), (d, d), (d, d), (f, d), (d, f)];
        if let Some(i) = dims.iter().position(|&(o, n)| cfg.rank > o.min(n)) {
            return Err(Error::Config(format!(
                "LoRA rank {} exceeds the dimensions of {} {:?}",
                cfg.rank, PROJECTIONS[i], dims[i]
            )));
        }
        for p in &mut self.params {
            p.frozen = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = cfg.targets_mask();
        for l in 0..self.config.n_layers {
            for (i, &(o, n)) in dims.iter().enumerate() {
                if !mask[i] {
                    continue;
                }
                let base = proj_name(l, i);
                self.params.push(Param {
                    name: format!("{base}.lora_a"),
                    value: Tensor::randn(&[cfg.rank, n], INIT_STD, &mut rng),
                    frozen: false,
                });
                self.params.push(Param {
                    name: format!("{base}.lora_b"),
                    value: Tensor::zeros(&[o, cfg.rank]),
                    frozen: false,
                });
            }
        }
        self.lora = Some(cfg);
        self.reindex();
        Ok(())
    }

    /// Folds `W + (α/r)·B·A` into the base weights, removes the adapters and
    /// thaws all parameters.
    pub fn merge_lora(&mut self) -> Result<()> {
        let Some(cfg) = self.lora.take() else {
            return Err(Error::State("no LoRA adapters to merge".into()));
        };
        let scale = cfg.scale();
        for l in 0..self.layers.len() {
            for i in 0..6 {
                let Some((a, b)) = self.layers[l].lora[i] else {
                    continue;
                };
                let w = self.layers[l].proj[i];
                let (o, n) = (self.params[w].value.shape()[0], self.params[w].value.shape()[1]);
                let delta = kernels::matmul(self.params[b].value.data(), self.params[a].value.data(), o, cfg.rank, n);
                for (wv, dv) in self.params[w].value.data_mut().iter_mut().zip(&delta) {
                    *wv += scale * dv;
                }
            }
        }
        self.params.retain(|p| !p.name.contains(".lora_"));
        for p in &mut self.params {
            p.frozen = false;
        }
        self.reindex();
        Ok(())
    }

    /// Adds a zero-initialised reward head if the model has none.
    pub fn with_reward_head(mut self) -> Self {
        if !self.config.reward_head {
            let d = self.config.d_model;
            self.params.push(Param { name: "reward_head".into(), value: Tensor::zeros(&[1, d]), frozen: false });
            self.config.reward_head = true;
            self.reindex();
        }
        self
    }

    /// Grows the token embedding and LM head to `new_vocab` rows, initialising
    /// each new row to the mean of the existing rows.
    pub fn resize_embeddings(&mut self, new_vocab: usize) -> Result<()> {
        let old = self.config.vocab;
        if new_vocab < old {
            return Err(Error::Config(format!("cannot shrink vocabulary from {old} to {new_vocab}")));
        }
        let d = self.config.d_model;
        for name in ["tok_embeddings", "lm_head"] {
            let i = self.index[name];
            let t = &self.params[i].value;
            let mut mean = vec![0f64; d];
            for r in 0..old {
                for (m, &x) in mean.iter_mut().zip(t.row(r)) {
                    *m += x as f64;
                }
            }
            let mean: Vec<f32> = mean.iter().map(|m| (m / old as f64) as f32).collect();
            let mut data = t.data().to_vec();
            for _ in old..new_vocab {
                data.extend_from_slice(&mean);
            }
            self.params[i].value = Tensor::new(vec![new_vocab, d], data)?;
        }
        self.config.vocab = new_vocab;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(vocab: usize) -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, vocab, context: 16, ..ModelConfig::tiny(vocab) }
    }

    fn loss_and_grads(model: &Transformer, tokens: &[u32], checkpointing: bool) -> (f32, Vec<Option<Vec<f32>>>) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let (inp, tgt) = (&tokens[..tokens.len() - 1], &tokens[1..]);
        let h = model.hidden(&mut g, &bound, &[inp], None, checkpointing).unwrap();
        let logits = model.logits(&mut g, &bound, h).unwrap();
        let loss = g.cross_entropy(logits, tgt, &vec![true; tgt.len()]).unwrap();
        g.backward(loss).unwrap();
        let grads = bound.vars().iter().map(|&v| g.grad(v).map(|x| x.to_vec())).collect();
        (g.value(loss).data()[0], grads)
    }

    #[test]
    fn cached_decoding_matches_full_forward_bitwise() {
        let model = Transformer::with_init_std(small(20), 1, 0.3).unwrap();
        let tokens: Vec<u32> = vec![3, 7, 1, 19, 4, 4, 0, 11, 2];
        let full = model.forward(&tokens, None).unwrap();
        let mut cache = model.new_cache();
        let mut rows = model.forward(&tokens[..4], Some(&mut cache)).unwrap().into_data();
        for &t in &tokens[4..] {
            rows.extend(model.forward(&[t], Some(&mut cache)).unwrap().into_data());
        }
        assert_eq!(cache.len(), tokens.len());
        assert!(Tensor::new(vec![tokens.len(), 20], rows).unwrap().bitwise_eq(&full));
    }

    #[test]
    fn truncated_cache_resumes_exactly() {
        let model = Transformer::with_init_std(small(20), 2, 0.3).unwrap();
        let mut cache = model.new_cache();
        model.forward(&[1, 2, 3, 4, 5], Some(&mut cache)).unwrap();
        cache.truncate(3);
        let resumed = model.forward(&[9], Some(&mut cache)).unwrap();
        let full = model.forward(&[1, 2, 3, 9], None).unwrap();
        assert_eq!(resumed.data(), full.row(3));
    }

    #[test]
    fn causality() {
        let model = Transformer::with_init_std(small(20), 3, 0.3).unwrap();
        let a = model.forward(&[5, 6, 7, 8, 9], None).unwrap();
        let b = model.forward(&[5, 6, 7, 1, 2], None).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn batch_rows_match_single_sequences() {
        let model = Transformer::with_init_std(small(20), 4, 0.3).unwrap();
        let (s1, s2): (&[u32], &[u32]) = (&[1, 2, 3], &[4, 5, 6]);
        let batch = model.forward_batch(&[s1, s2]).unwrap();
        let one = model.forward(s2, None).unwrap();
        assert_eq!(&batch.data()[3 * 20..], one.data());
    }

    #[test]
    fn checkpointing_gives_identical_gradients() {
        for layers in [1, 2, 3] {
            let model = Transformer::with_init_std(ModelConfig { n_layers: layers, ..small(20) }, 5, 0.2).unwrap();
            let tokens = [1u32, 5, 9, 2, 2, 7, 3];
            let plain = loss_and_grads(&model, &tokens, false);
            let ckpt = loss_and_grads(&model, &tokens, true);
            assert_eq!(plain.0.to_bits(), ckpt.0.to_bits());
            for (a, b) in plain.1.iter().zip(&ckpt.1) {
                let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn context_limit_follows_interpolation() {
        let base = small(20);
        let model = Transformer::new(base.clone(), 0).unwrap();
        assert!(matches!(model.forward(&[1; 17], None), Err(Error::Length(_))));
        let stretched = Transformer::new(ModelConfig { pi_scale: 2.0, ..base }, 0).unwrap();
        stretched.forward(&[1; 32], None).unwrap();
        assert!(matches!(stretched.forward(&[1; 33], None), Err(Error::Length(_))));
    }

    #[test]
    fn out_of_range_token_is_an_index_error() {
        let model = Transformer::new(small(20), 0).unwrap();
        assert!(matches!(model.forward(&[20], None), Err(Error::Index(_))));
    }

    #[test]
    fn lora_zero_init_merge_and_freeze() {
        let mut model = Transformer::with_init_std(small(20), 6, 0.3).unwrap();
        let tokens = [3u32, 1, 4, 1, 5, 9];
        let before = model.forward(&tokens, None).unwrap();
        let cfg = LoraConfig { rank: 4, alpha: 8.0, targets: vec!["wq".into(), "wv".into(), "w_out".into()] };
        model.attach_lora(cfg, 7).unwrap();
        assert!(model.forward(&tokens, None).unwrap().bitwise_eq(&before));
        // Σ r·(d_in + d_out) over adapted matrices.
        assert_eq!(model.trainable_count(), 2 * (4 * (16 + 16) + 4 * (16 + 16) + 4 * (32 + 16)));

        let (_, grads) = loss_and_grads(&model, &tokens, false);
        for (p, g) in model.params().iter().zip(&grads) {
            assert_eq!(g.is_some(), p.name.contains(".lora_"), "{}", p.name);
        }

        for p in model.params_mut().iter_mut().filter(|p| p.name.ends_with("lora_b")) {
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                *x = ((i * 37 % 11) as f32 - 5.0) * 0.05;
            }
        }
        let adapted = model.forward(&tokens, None).unwrap();
        assert!(!adapted.bitwise_eq(&before));
        model.merge_lora().unwrap();
        assert!(model.params().iter().all(|p| !p.frozen && !p.name.contains("lora")));
        assert!(model.forward(&tokens, None).unwrap().max_abs_diff(&adapted) < 1e-5);
        assert!(matches!(model.merge_lora(), Err(Error::State(_))));
    }

    #[test]
    fn lora_rank_too_large() {
        let mut model = Transformer::new(small(20), 0).unwrap();
        let cfg = LoraConfig { rank: 17, ..Default::default() };
        assert!(matches!(model.attach_lora(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn resized_rows_are_the_mean() {
        let mut model = Transformer::with_init_std(small(20), 8, 0.3).unwrap();
        let old = model.param("tok_embeddings").unwrap().value.clone();
        model.resize_embeddings(23).unwrap();
        let new = &model.param("tok_embeddings").unwrap().value;
        assert_eq!(new.shape(), &[23, 16]);
        assert_eq!(&new.data()[..old.numel()], old.data());
        for c in 0..16 {
            let mean = (0..20).map(|r| old.row(r)[c] as f64).sum::<f64>() / 20.0;
            for r in 20..23 {
                assert!((new.row(r)[c] as f64 - mean).abs() < 1e-6);
            }
        }
        assert_eq!(model.forward(&[22, 0], None).unwrap().shape(), &[2, 23]);
    }

    #[test]
    fn reward_head_starts_at_zero() {
        let model = Transformer::new(ModelConfig { reward_head: true, ..small(20) }, 0).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let h = model.hidden(&mut g, &bound, &[&[1, 2, 3]], None, false).unwrap();
        let r = model.reward_scores(&mut g, &bound, h, &[2]).unwrap();
        assert_eq!(g.value(r).data(), &[0.0]);
    }
}
