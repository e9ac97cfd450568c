use std::collections::HashMap;

use rand::Rng;

use super::{ModelConfig, TokenMap, TokenizerError};
use crate::codebook::EmbeddingTable;
use crate::numerics::{ConvParams, Graph, NodeId, Tensor};
use crate::quantizer::{quantize_global, quantize_local, Projector};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self, TokenizerError> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(TokenizerError::Config(format!("duplicate parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Parameter names and shapes for a configuration, in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.channels();
    let mut out = Vec::new();
    let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, o: usize, i: usize, k: usize| {
        out.push((format!("{name}.w"), vec![o, i, k, k]));
        out.push((format!("{name}.b"), vec![o]));
    };
    let linear = |out: &mut Vec<(String, Vec<usize>)>, name: String, o: usize, i: usize| {
        out.push((format!("{name}.w"), vec![o, i]));
        out.push((format!("{name}.b"), vec![o]));
    };
    let attention = |out: &mut Vec<(String, Vec<usize>)>, name: &str, ch: usize, ctx: usize| {
        linear(out, format!("{name}.q"), ch, ch);
        linear(out, format!("{name}.k"), ch, ctx);
        linear(out, format!("{name}.v"), ch, ctx);
        linear(out, format!("{name}.o"), ch, ch);
    };

    conv(&mut out, "enc.conv_in".into(), c[0], 3, 3);
    let mut cin = c[0];
    for (i, &cout) in c.iter().enumerate() {
        conv(&mut out, format!("enc.res{i}.conv1"), cout, cin, 3);
        conv(&mut out, format!("enc.res{i}.conv2"), cout, cout, 3);
        if cin != cout {
            conv(&mut out, format!("enc.res{i}.skip"), cout, cin, 1);
        }
        if i < 3 {
            conv(&mut out, format!("enc.down{i}"), cout, cout, 4);
        }
        cin = cout;
    }
    attention(&mut out, "enc.attn", c[3], c[3]);
    conv(&mut out, "enc.conv_out".into(), cfg.d_l, c[3], 3);

    out.push(("proj.w".into(), vec![cfg.d_l, cfg.local_dim]));
    out.push(("proj.b".into(), vec![cfg.d_l]));

    conv(&mut out, "dec.conv_in".into(), c[3], cfg.d_l, 3);
    attention(&mut out, "dec.xattn", c[3], cfg.global_dim);
    attention(&mut out, "dec.attn", c[3], c[3]);
    let mut cin = c[3];
    for (i, &cout) in c.iter().rev().enumerate() {
        conv(&mut out, format!("dec.res{i}.conv1"), cout, cin, 3);
        conv(&mut out, format!("dec.res{i}.conv2"), cout, cout, 3);
        if cin != cout {
            conv(&mut out, format!("dec.res{i}.skip"), cout, cin, 1);
        }
        if i < 3 {
            // transposed conv weight is [in, out, k, k]
            out.push((format!("dec.up{i}.w"), vec![cout, cout, 4, 4]));
            out.push((format!("dec.up{i}.b"), vec![cout]));
        }
        cin = cout;
    }
    conv(&mut out, "dec.conv_out".into(), 3, c[0], 3);
    out
}

/// Graph nodes bound to a [`ParamStore`].
struct Scope {
    nodes: HashMap<String, NodeId>,
}

impl Scope {
    fn bind(g: &mut Graph, store: &ParamStore, trainable: bool) -> (Self, Vec<NodeId>) {
        let mut nodes = HashMap::with_capacity(store.len());
        let mut order = Vec::with_capacity(store.len());
        for (name, t) in store.iter() {
            let id = g.leaf(t.clone(), trainable);
            nodes.insert(name.to_string(), id);
            order.push(id);
        }
        (Self { nodes }, order)
    }

    fn get(&self, name: &str) -> NodeId {
        self.nodes[name]
    }

    fn has(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }
}

type R<T> = Result<T, TokenizerError>;

fn conv(g: &mut Graph, s: &Scope, name: &str, x: NodeId, stride: usize, pad: usize) -> R<NodeId> {
    let (w, b) = (s.get(&format!("{name}.w")), s.get(&format!("{name}.b")));
    Ok(g.conv2d(x, w, Some(b), ConvParams::new(stride, pad))?)
}

fn linear(g: &mut Graph, s: &Scope, name: &str, x: NodeId) -> R<NodeId> {
    let (w, b) = (s.get(&format!("{name}.w")), s.get(&format!("{name}.b")));
    Ok(g.linear(x, w, Some(b))?)
}

fn res_block(g: &mut Graph, s: &Scope, name: &str, x: NodeId) -> R<NodeId> {
    let h = g.silu(x)?;
    let h = conv(g, s, &format!("{name}.conv1"), h, 1, 1)?;
    let h = g.silu(h)?;
    let h = conv(g, s, &format!("{name}.conv2"), h, 1, 1)?;
    let skip_name = format!("{name}.skip");
    let skip = if s.has(&format!("{skip_name}.w")) {
        conv(g, s, &skip_name, x, 1, 0)?
    } else {
        x
    };
    Ok(g.add(h, skip)?)
}

/// `[b, c, h, w] -> [b, h*w, c]`
fn to_rows(g: &mut Graph, x: NodeId) -> R<NodeId> {
    let [b, c, h, w] = dims4(g.value(x))?;
    let r = g.reshape(x, &[b, c, h * w])?;
    Ok(g.transpose12(r)?)
}

/// `[b, h*w, c] -> [b, c, h, w]`
fn from_rows(g: &mut Graph, x: NodeId, h: usize, w: usize) -> R<NodeId> {
    let t = g.transpose12(x)?;
    let (b, c) = (g.value(t).shape()[0], g.value(t).shape()[1]);
    Ok(g.reshape(t, &[b, c, h, w])?)
}

fn dims4(t: &Tensor) -> R<[usize; 4]> {
    t.shape()
        .try_into()
        .map_err(|_| TokenizerError::Shape(format!("expected [batch, channels, h, w], got {:?}", t.shape())))
}

/// Residual attention block over rows `x: [b, l, c]` attending to
/// `ctx: [b, lk, ck]`.
fn attention(g: &mut Graph, s: &Scope, name: &str, x: NodeId, ctx: NodeId) -> R<NodeId> {
    let q = linear(g, s, &format!("{name}.q"), x)?;
    let k = linear(g, s, &format!("{name}.k"), ctx)?;
    let v = linear(g, s, &format!("{name}.v"), ctx)?;
    let a = g.scaled_dot_attention(q, k, v)?;
    let o = linear(g, s, &format!("{name}.o"), a)?;
    Ok(g.add(x, o)?)
}

/// How the decoder input is formed from the encoder features.
#[derive(Clone, Debug, PartialEq)]
pub enum ForwardMode {
    /// Nearest-neighbour assignment with the straight-through estimator.
    Live,
    /// Assignment frozen to `ids`, decoder input `F + offset`, and the
    /// stop-gradient operands replaced by the constants `sg_features` and
    /// `sg_quantized`. The loss is then an ordinary smooth function whose
    /// true derivative at the anchor equals the `Live` gradient there, so
    /// finite differences apply.
    Surrogate {
        ids: Vec<u32>,
        offset: Tensor,
        sg_features: Tensor,
        sg_quantized: Tensor,
    },
}

/// Loss graph handles from [`TokenizerModel::vq_forward`].
pub struct VqForward {
    pub loss: NodeId,
    pub recon: NodeId,
    pub codebook: NodeId,
    pub commit: NodeId,
    /// Encoder features as rows `[b*h*w, d_l]`.
    pub features: NodeId,
    /// Projected codebook rows picked for each feature row.
    pub quantized: NodeId,
    pub reconstruction: NodeId,
    /// Parameter nodes in [`ParamStore`] order.
    pub params: Vec<NodeId>,
    pub ids: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
}

impl VqForward {
    pub fn terms(&self, g: &Graph) -> LossTerms {
        LossTerms {
            total: g.value(self.loss).item(),
            recon: g.value(self.recon).item(),
            codebook: g.value(self.codebook).item(),
            commit: g.value(self.commit).item(),
        }
    }
}

/// Encoder, projector and decoder weights together with the two frozen
/// codebooks they are trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    local: EmbeddingTable,
    global: EmbeddingTable,
}

impl TokenizerModel {
    /// Fresh weights: uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        local: EmbeddingTable,
        global: EmbeddingTable,
        rng: &mut R,
    ) -> Result<Self, TokenizerError> {
        let entries = layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = if name.starts_with("dec.up") {
                        shape[0] * shape[2] * shape[3]
                    } else {
                        shape[1..].iter().product()
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::uniform(&shape, -bound, bound, rng)
                };
                (name, t)
            })
            .collect();
        Self::from_parts(config, ParamStore::new(entries)?, local, global)
    }

    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        local: EmbeddingTable,
        global: EmbeddingTable,
    ) -> Result<Self, TokenizerError> {
        config.validate()?;
        let want = layout(&config);
        if want.len() != params.len() {
            return Err(TokenizerError::Config(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                params.len()
            )));
        }
        for ((name, shape), (have, t)) in want.iter().zip(params.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(TokenizerError::Config(format!(
                    "parameter {have} {:?} does not match layout entry {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        if local.dim() != config.local_dim {
            return Err(TokenizerError::Config(format!(
                "local codebook dim {} but config says {}",
                local.dim(),
                config.local_dim
            )));
        }
        if global.dim() != config.global_dim {
            return Err(TokenizerError::Config(format!(
                "global codebook dim {} but config says {}",
                global.dim(),
                config.global_dim
            )));
        }
        if config.k_g > global.rows() {
            return Err(TokenizerError::Config(format!(
                "k_g {} exceeds global codebook size {}",
                config.k_g,
                global.rows()
            )));
        }
        Ok(Self {
            config,
            params,
            local,
            global,
        })
    }

    pub fn local_codebook(&self) -> &EmbeddingTable {
        &self.local
    }

    pub fn global_codebook(&self) -> &EmbeddingTable {
        &self.global
    }

    pub fn projector(&self) -> Projector {
        Projector {
            weight: self.params.get("proj.w").expect("layout").clone(),
            bias: self.params.get("proj.b").expect("layout").clone(),
        }
    }

    /// The local codebook mapped into feature space by the current projector.
    pub fn projected_local(&self) -> Result<EmbeddingTable, TokenizerError> {
        Ok(self.projector().project(&self.local)?)
    }

    fn encoder(&self, g: &mut Graph, s: &Scope, x: NodeId) -> R<NodeId> {
        let mut h = conv(g, s, "enc.conv_in", x, 1, 1)?;
        for i in 0..4 {
            h = res_block(g, s, &format!("enc.res{i}"), h)?;
            if i < 3 {
                h = conv(g, s, &format!("enc.down{i}"), h, 2, 1)?;
            }
        }
        let [_, _, hh, ww] = dims4(g.value(h))?;
        let rows = to_rows(g, h)?;
        let rows = attention(g, s, "enc.attn", rows, rows)?;
        let h = from_rows(g, rows, hh, ww)?;
        let h = g.silu(h)?;
        conv(g, s, "enc.conv_out", h, 1, 1)
    }

    /// `local: [b, h*w, d_l]`, `global: [b, k_g, global_dim]`.
    fn decoder(&self, g: &mut Graph, s: &Scope, local: NodeId, global: NodeId, hh: usize, ww: usize) -> R<NodeId> {
        let x = from_rows(g, local, hh, ww)?;
        let h = conv(g, s, "dec.conv_in", x, 1, 1)?;
        let rows = to_rows(g, h)?;
        let rows = attention(g, s, "dec.xattn", rows, global)?;
        let rows = attention(g, s, "dec.attn", rows, rows)?;
        let mut h = from_rows(g, rows, hh, ww)?;
        for i in 0..4 {
            h = res_block(g, s, &format!("dec.res{i}"), h)?;
            if i < 3 {
                let (w, b) = (s.get(&format!("dec.up{i}.w")), s.get(&format!("dec.up{i}.b")));
                h = g.conv_transpose2d(h, w, Some(b), ConvParams::new(2, 1))?;
            }
        }
        let h = g.silu(h)?;
        conv(g, s, "dec.conv_out", h, 1, 1)
    }

    fn check_images(&self, images: &Tensor) -> R<(usize, usize, usize)> {
        let [b, c, h, w] = dims4(images)?;
        if c != 3 {
            return Err(TokenizerError::Shape(format!("expected 3 channels, got {c}")));
        }
        let (gh, gw) = self.config.grid_for(h, w)?;
        Ok((b, gh, gw))
    }

    /// Encoder features for a batch `[b, 3, H, W]`, as `[b, H/8, W/8, d_l]`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor, TokenizerError> {
        let (b, gh, gw) = self.check_images(images)?;
        let mut g = Graph::new();
        let (s, _) = Scope::bind(&mut g, &self.params, false);
        let x = g.constant(images.clone());
        let f = self.encoder(&mut g, &s, x)?;
        let rows = to_rows(&mut g, f)?;
        Ok(g.value(rows).reshape(&[b, gh, gw, self.config.d_l])?)
    }

    /// Global ids for one global feature vector.
    pub fn global_tokens(&self, feature: &[f64]) -> Result<Vec<u32>, TokenizerError> {
        let f = Tensor::new(vec![feature.len()], feature.to_vec())?;
        if feature.len() != self.config.global_dim {
            return Err(TokenizerError::Shape(format!(
                "global feature has {} values, expected {}",
                feature.len(),
                self.config.global_dim
            )));
        }
        Ok(quantize_global(&f, &self.global, self.config.k_g)?.token_ids)
    }

    /// Token maps for a batch `[b, 3, H, W]` with one global feature vector
    /// per image.
    pub fn tokenize(&self, images: &Tensor, features: &[Vec<f64>]) -> Result<Vec<TokenMap>, TokenizerError> {
        let (b, gh, gw) = self.check_images(images)?;
        if features.len() != b {
            return Err(TokenizerError::Shape(format!(
                "{} global features for {b} images",
                features.len()
            )));
        }
        let f = self.encode(images)?;
        let table = self.projected_local()?;
        let local = quantize_local(&f, &table)?;
        let per = gh * gw;
        features
            .iter()
            .enumerate()
            .map(|(i, feat)| {
                TokenMap::new(
                    self.global_tokens(feat)?,
                    gh,
                    gw,
                    local.token_ids[i * per..(i + 1) * per].to_vec(),
                )
            })
            .collect()
    }

    fn global_rows(&self, ids: &[u32]) -> Vec<f64> {
        ids.iter()
            .flat_map(|&i| self.global.row(i as usize).iter().copied())
            .collect()
    }

    /// Stacked global embeddings `[b, k_g, global_dim]` for global id lists.
    pub fn global_embeddings(&self, ids: &[Vec<u32>]) -> Result<Tensor, TokenizerError> {
        let k = ids.first().map_or(0, Vec::len);
        if k == 0 || ids.iter().any(|v| v.len() != k) {
            return Err(TokenizerError::Shape(
                "global id lists must be non-empty and equally long".into(),
            ));
        }
        for v in ids {
            if let Some(&id) = v.iter().find(|&&i| i as usize >= self.global.rows()) {
                return Err(TokenizerError::IdOutOfRange {
                    kind: "global",
                    id,
                    size: self.global.rows(),
                });
            }
        }
        let data = ids.iter().flat_map(|v| self.global_rows(v)).collect();
        Ok(Tensor::new(vec![ids.len(), k, self.config.global_dim], data)?)
    }

    /// Reconstructs images `[b, 3, 8h, 8w]` from token maps sharing one grid.
    pub fn detokenize(&self, maps: &[TokenMap]) -> Result<Tensor, TokenizerError> {
        let first = maps
            .first()
            .ok_or_else(|| TokenizerError::Shape("no token maps".into()))?;
        let (gh, gw) = (first.height, first.width);
        let table = self.projected_local()?;
        let mut rows = Vec::with_capacity(maps.len() * gh * gw * self.config.d_l);
        for m in maps {
            if (m.height, m.width) != (gh, gw) {
                return Err(TokenizerError::Shape("token maps in a batch must share a grid".into()));
            }
            m.check_ranges(self.global.rows(), self.local.rows())?;
            for &id in &m.local_ids {
                rows.extend_from_slice(table.row(id as usize));
            }
        }
        let globals: Vec<Vec<u32>> = maps.iter().map(|m| m.global_ids.clone()).collect();
        let fg = self.global_embeddings(&globals)?;
        let mut g = Graph::new();
        let (s, _) = Scope::bind(&mut g, &self.params, false);
        let local = g.constant(Tensor::new(vec![maps.len(), gh * gw, self.config.d_l], rows)?);
        let fg = g.constant(fg);
        let out = self.decoder(&mut g, &s, local, fg, gh, gw)?;
        Ok(g.value(out).clone())
    }

    /// Builds the VQ objective for a batch:
    /// `mse(X, X^) + rownorm(sg(F) - F^) + beta * rownorm(sg(F^) - F)`,
    /// where `rownorm` is the mean Euclidean norm over feature rows and
    /// `F^` is the projected codebook rows chosen for `F`.
    pub fn vq_forward(
        &self,
        g: &mut Graph,
        images: &Tensor,
        global: &Tensor,
        beta: f64,
        mode: &ForwardMode,
    ) -> Result<VqForward, TokenizerError> {
        let (b, gh, gw) = self.check_images(images)?;
        let d = self.config.d_l;
        let n = b * gh * gw;
        let (s, params) = Scope::bind(g, &self.params, true);
        let x = g.constant(images.clone());
        let f = self.encoder(g, &s, x)?;
        let f_rows = to_rows(g, f)?;
        let features = g.reshape(f_rows, &[n, d])?;

        let ids = match mode {
            ForwardMode::Live => {
                let table = self.projected_local()?;
                quantize_local(g.value(features), &table)?.token_ids
            }
            ForwardMode::Surrogate { ids, .. } => {
                if ids.len() != n {
                    return Err(TokenizerError::Shape(format!(
                        "{} frozen ids for {n} features",
                        ids.len()
                    )));
                }
                ids.clone()
            }
        };
        let raw = g.constant(self.local.to_tensor());
        let picked: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let gathered = g.gather_rows(raw, &picked)?;
        let quantized = g.linear(gathered, s.get("proj.w"), Some(s.get("proj.b")))?;

        let dec_in = match mode {
            ForwardMode::Live => {
                let value = g.value(quantized).clone();
                g.straight_through(features, value)?
            }
            ForwardMode::Surrogate { offset, .. } => {
                let o = g.constant(offset.clone());
                g.add(features, o)?
            }
        };
        let dec_in = g.reshape(dec_in, &[b, gh * gw, d])?;
        let fg = g.constant(global.clone());
        let reconstruction = self.decoder(g, &s, dec_in, fg, gh, gw)?;
        let target = g.constant(images.clone());
        let recon = g.mse(reconstruction, target)?;

        let (sg_f, sg_q) = match mode {
            ForwardMode::Live => (g.stop_gradient(features), g.stop_gradient(quantized)),
            ForwardMode::Surrogate {
                sg_features,
                sg_quantized,
                ..
            } => (g.constant(sg_features.clone()), g.constant(sg_quantized.clone())),
        };
        let diff = g.sub(sg_f, quantized)?;
        let codebook = g.row_norm_mean(diff)?;
        let diff = g.sub(sg_q, features)?;
        let commit = g.row_norm_mean(diff)?;
        let weighted = g.scale(commit, beta)?;
        let partial = g.add(recon, codebook)?;
        let loss = g.add(partial, weighted)?;
        Ok(VqForward {
            loss,
            recon,
            codebook,
            commit,
            features,
            quantized,
            reconstruction,
            params,
            ids,
        })
    }

    /// The surrogate mode anchored at the current weights.
    pub fn surrogate_at(&self, images: &Tensor, global: &Tensor, beta: f64) -> Result<ForwardMode, TokenizerError> {
        let mut g = Graph::new();
        let fwd = self.vq_forward(&mut g, images, global, beta, &ForwardMode::Live)?;
        let sg_features = g.value(fwd.features).clone();
        let sg_quantized = g.value(fwd.quantized).clone();
        let mut offset = sg_quantized.clone();
        for (o, f) in offset.data_mut().iter_mut().zip(sg_features.data()) {
            *o -= f;
        }
        Ok(ForwardMode::Surrogate {
            ids: fwd.ids,
            offset,
            sg_features,
            sg_quantized,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TokenizerModel {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig {
            image_size: 16,
            width_divisor: 32,
            d_l: 4,
            k_g: 2,
            local_dim: 3,
            global_dim: 5,
        };
        let local = EmbeddingTable::from_tensor(&Tensor::uniform(&[10, 3], -1.0, 1.0, &mut r)).unwrap();
        let global = EmbeddingTable::from_tensor(&Tensor::uniform(&[6, 5], -1.0, 1.0, &mut r)).unwrap();
        TokenizerModel::init(cfg, local, global, &mut r).unwrap()
    }

    #[test]
    fn layout_is_consistent() {
        let m = tiny();
        let names = m.params.names();
        assert!(names.contains(&"enc.res1.skip.w".to_string()));
        assert!(!names.contains(&"enc.res0.skip.w".to_string()));
        assert_eq!(m.params.get("dec.up0.w").unwrap().shape(), &[16, 16, 4, 4]);
        assert_eq!(m.params.get("dec.xattn.k.w").unwrap().shape(), &[16, 5]);
        assert_eq!(m.params.get("proj.w").unwrap().shape(), &[4, 3]);
    }

    #[test]
    fn encode_and_detokenize_shapes() {
        let m = tiny();
        let x = Tensor::full(&[2, 3, 16, 16], 0.5);
        assert_eq!(m.encode(&x).unwrap().shape(), &[2, 2, 2, 4]);
        let maps = m.tokenize(&x, &[vec![0.1; 5], vec![0.2; 5]]).unwrap();
        assert_eq!(maps[0].k_l(), 4);
        assert_eq!(maps[0].k_g(), 2);
        assert_eq!(m.detokenize(&maps).unwrap().shape(), &[2, 3, 16, 16]);
    }

    #[test]
    fn from_parts_rejects_wrong_layout() {
        let m = tiny();
        let mut entries: Vec<(String, Tensor)> = m.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        entries.pop();
        let store = ParamStore::new(entries).unwrap();
        assert!(TokenizerModel::from_parts(m.config.clone(), store, m.local.clone(), m.global.clone()).is_err());
    }
}
