//! Shared encoder, normalized-prototype identity head, and per-group
//! attribute heads in prediction or suppression wiring.
//!
//! Every head consumes the same embedding tensor per batch. Prediction heads
//! apply an affine map to the embedding directly; suppression heads route it
//! through a gradient reversal layer first, so their forward values are
//! identical to a prediction head with the same parameters and only the
//! gradient reaching the encoder flips sign. The reversal factor is fixed at
//! 1; suppression strength is controlled solely by the adversarial loss
//! weight.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, TensorId};
use crate::error::{Error, Result};
use crate::rng;

/// Fully-connected encoder configuration. The activation is a rectifier on
/// every hidden layer; the embedding layer itself is affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 128,
            hidden_dims: vec![256, 128],
            embedding_dim: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::config(
                "hidden_dims",
                "must be non-empty with positive dimensions",
            ));
        }
        if self.embedding_dim < 8 {
            return Err(Error::config("embedding_dim", "must be at least 8"));
        }
        Ok(())
    }
}

/// One affine layer: `x · weight + bias`, weight `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Parameter,
    pub bias: Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<Layer>,
}

/// Identity prototypes, one row per identity. Logits are cosines between
/// row-normalized embeddings and row-normalized prototypes, so every logit
/// lies in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityHead {
    pub prototypes: Parameter,
    pub num_identities: usize,
}

/// Whether an attribute head trains the encoder to predict its group or to
/// forget it. A group binds to at most one head, so the predict and
/// suppress sets are disjoint by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Predict,
    Suppress,
}

/// Single affine layer mapping the embedding to one logit per attribute in
/// the bound group.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeHead {
    pub group_name: String,
    pub weight: Parameter,
    pub bias: Parameter,
    pub mode: HeadMode,
}

impl AttributeHead {
    pub fn group_size(&self) -> usize {
        self.bias.numel()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    pub encoder: Encoder,
    pub identity_head: IdentityHead,
    pub attribute_heads: Vec<AttributeHead>,
}

/// Tape leaves for one binding of the model parameters, in `params()` order.
#[derive(Debug, Clone)]
pub struct ModelBinding {
    pub layer_ids: Vec<(TensorId, TensorId)>,
    pub proto_id: TensorId,
    pub head_ids: Vec<(TensorId, TensorId)>,
}

impl ModelBinding {
    /// Flat id list aligned with [`MultiTaskModel::params`].
    pub fn ids(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for &(w, b) in &self.layer_ids {
            out.push(w);
            out.push(b);
        }
        out.push(self.proto_id);
        for &(w, b) in &self.head_ids {
            out.push(w);
            out.push(b);
        }
        out
    }
}

fn init_uniform(rng: &mut impl Rng, fan_in: usize, numel: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..numel).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, "encoder-init");
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(config.embedding_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (li, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight = Parameter::new(
                format!("encoder.{li}.weight"),
                vec![fan_in, fan_out],
                init_uniform(&mut rng, fan_in, fan_in * fan_out),
            )?;
            let bias = Parameter::new(
                format!("encoder.{li}.bias"),
                vec![fan_out],
                init_uniform(&mut rng, fan_in, fan_out),
            )?;
            layers.push(Layer { weight, bias });
        }
        Ok(Encoder { config, layers })
    }
}

impl IdentityHead {
    pub fn new(num_identities: usize, embedding_dim: usize, seed: u64) -> Result<Self> {
        if num_identities == 0 {
            return Err(Error::config("num_identities", "must be positive"));
        }
        let mut rng = rng::stream(seed, "prototype-init");
        let prototypes = Parameter::new(
            "identity.prototypes",
            vec![num_identities, embedding_dim],
            init_uniform(&mut rng, embedding_dim, num_identities * embedding_dim),
        )?;
        Ok(IdentityHead {
            prototypes,
            num_identities,
        })
    }
}

impl MultiTaskModel {
    /// Build encoder, identity head, and one head per `(group, size, mode)`.
    ///
    /// Head parameters are seeded per group name, independent of mode and of
    /// which other groups are present, so differently-wired experiments from
    /// the same seed start from identical parameters.
    pub fn new(
        encoder_config: EncoderConfig,
        num_identities: usize,
        groups: &[(String, usize, HeadMode)],
    ) -> Result<Self> {
        let seed = encoder_config.seed;
        let embedding_dim = encoder_config.embedding_dim;
        let encoder = Encoder::new(encoder_config)?;
        let identity_head = IdentityHead::new(num_identities, embedding_dim, seed)?;
        let mut seen = BTreeMap::new();
        let mut attribute_heads = Vec::with_capacity(groups.len());
        for (name, size, mode) in groups {
            if *size == 0 {
                return Err(Error::config("group", format!("group `{name}` is empty")));
            }
            if seen.insert(name.clone(), *mode).is_some() {
                return Err(Error::config(
                    "group",
                    format!("group `{name}` bound to more than one head"),
                ));
            }
            let mut rng = rng::stream(seed, &format!("head-init:{name}"));
            let weight = Parameter::new(
                format!("head.{name}.weight"),
                vec![embedding_dim, *size],
                init_uniform(&mut rng, embedding_dim, embedding_dim * size),
            )?;
            let bias = Parameter::new(
                format!("head.{name}.bias"),
                vec![*size],
                init_uniform(&mut rng, embedding_dim, *size),
            )?;
            attribute_heads.push(AttributeHead {
                group_name: name.clone(),
                weight,
                bias,
                mode: *mode,
            });
        }
        Ok(MultiTaskModel {
            encoder,
            identity_head,
            attribute_heads,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.config.embedding_dim
    }

    /// All parameters in a stable order: encoder layers, prototypes, heads.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for layer in &self.encoder.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.identity_head.prototypes);
        for head in &self.attribute_heads {
            out.push(&head.weight);
            out.push(&head.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for layer in &mut self.encoder.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.identity_head.prototypes);
        for head in &mut self.attribute_heads {
            out.push(&mut head.weight);
            out.push(&mut head.bias);
        }
        out
    }

    /// Encoder parameters only (the set the reversal layer acts on).
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.encoder
            .layers
            .iter()
            .flat_map(|l| [l.weight.name.clone(), l.bias.name.clone()])
            .collect()
    }

    /// Bind all parameters as fresh `requires_grad` leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<ModelBinding> {
        let mut layer_ids = Vec::with_capacity(self.encoder.layers.len());
        for layer in &self.encoder.layers {
            layer_ids.push((tape.param(&layer.weight)?, tape.param(&layer.bias)?));
        }
        let proto_id = tape.param(&self.identity_head.prototypes)?;
        let mut head_ids = Vec::with_capacity(self.attribute_heads.len());
        for head in &self.attribute_heads {
            head_ids.push((tape.param(&head.weight)?, tape.param(&head.bias)?));
        }
        Ok(ModelBinding {
            layer_ids,
            proto_id,
            head_ids,
        })
    }

    /// `z = f(x)`: affine layers with a rectifier after each hidden layer.
    pub fn encode(&self, tape: &mut Tape, binding: &ModelBinding, x: TensorId) -> Result<TensorId> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.encoder.config.input_dim {
            return Err(Error::InvalidShape {
                op: "encode",
                shape,
                reason: format!("expected [batch, {}]", self.encoder.config.input_dim),
            });
        }
        let last = self.encoder.layers.len() - 1;
        let mut h = x;
        for (li, &(w, b)) in binding.layer_ids.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if li < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Cosine logits between row-normalized embeddings and prototypes.
    pub fn identity_logits(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        z: TensorId,
    ) -> Result<TensorId> {
        let zn = tape.l2_normalize_rows(z)?;
        let pn = tape.l2_normalize_rows(binding.proto_id)?;
        tape.matmul_bt(zn, pn)
    }

    fn head_index(&self, group: &str) -> Result<usize> {
        self.attribute_heads
            .iter()
            .position(|h| h.group_name == group)
            .ok_or_else(|| Error::eval(format!("no attribute head bound to group `{group}`")))
    }

    /// Group logits. Suppress-mode heads read the embedding through a
    /// gradient reversal layer; forward values are identical to predict mode
    /// for the same parameters.
    pub fn attribute_logits(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        z: TensorId,
        group: &str,
    ) -> Result<TensorId> {
        let hi = self.head_index(group)?;
        let head = &self.attribute_heads[hi];
        let (w, b) = binding.head_ids[hi];
        let input = match head.mode {
            HeadMode::Predict => z,
            HeadMode::Suppress => tape.grl(z, 1.0)?,
        };
        let logits = tape.matmul(input, w)?;
        tape.add(logits, b)
    }

    /// Plain SGD: `p ← p − lr·∇p` for every bound parameter with a gradient.
    pub fn sgd_step(&mut self, tape: &Tape, binding: &ModelBinding, lr: f64) {
        let ids = binding.ids();
        for (param, id) in self.params_mut().into_iter().zip(ids) {
            if let Some(grad) = tape.grad(id) {
                for (v, g) in param.values.iter_mut().zip(grad) {
                    *v -= lr * g;
                }
            }
        }
    }

    /// Frozen forward pass: embed rows of `features` without recording
    /// gradients. Rows are processed as one batch.
    pub fn embed_batch(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let dim = self.encoder.config.input_dim;
        let mut flat = Vec::with_capacity(features.len() * dim);
        for row in features {
            if row.len() != dim {
                return Err(Error::InvalidShape {
                    op: "embed_batch",
                    shape: vec![row.len()],
                    reason: format!("expected feature dim {dim}"),
                });
            }
            flat.extend_from_slice(row);
        }
        let mut tape = Tape::new();
        let x = tape.constant(flat, vec![features.len(), dim])?;
        let mut layer_ids = Vec::new();
        for layer in &self.encoder.layers {
            layer_ids.push((
                tape.constant(layer.weight.values.clone(), layer.weight.shape.clone())?,
                tape.constant(layer.bias.values.clone(), layer.bias.shape.clone())?,
            ));
        }
        let binding = ModelBinding {
            layer_ids,
            proto_id: TensorId(0),
            head_ids: Vec::new(),
        };
        let z = self.encode(&mut tape, &binding, x)?;
        let e = self.embedding_dim();
        let zv = tape.values(z);
        Ok((0..features.len())
            .map(|i| zv[i * e..(i + 1) * e].to_vec())
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: versioned binary container, little-endian throughout.
// Layout: magic, version u32, meta JSON (u64 length + bytes), parameter
// count u64, then per record: name length u64, name bytes, shape rank u64,
// dims u64 each, values f64 each.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"ATFCKPT\0";
const CKPT_VERSION: u32 = 1;

/// Structural metadata stored in the checkpoint header; enough to rebuild
/// the model before loading parameter records over it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub num_identities: usize,
    pub heads: Vec<(String, usize, HeadMode)>,
    #[serde(default)]
    pub run_id: Option<String>,
}

impl MultiTaskModel {
    fn meta(&self, run_id: Option<String>) -> CheckpointMeta {
        CheckpointMeta {
            encoder: self.encoder.config.clone(),
            num_identities: self.identity_head.num_identities,
            heads: self
                .attribute_heads
                .iter()
                .map(|h| (h.group_name.clone(), h.group_size(), h.mode))
                .collect(),
            run_id,
        }
    }

    pub fn save(&self, path: &Path, run_id: Option<String>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta(run_id))?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        let params = self.params();
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            w.write_all(&(p.name.len() as u64).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.shape.len() as u64).to_le_bytes())?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &p.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let pstr = path.display().to_string();
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, &pstr, "magic")?;
        if &magic != CKPT_MAGIC {
            return Err(Error::format(&pstr, "bad magic bytes (not a checkpoint)"));
        }
        let version = read_u32(&mut r, &pstr, "version")?;
        if version != CKPT_VERSION {
            return Err(Error::format(
                &pstr,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let meta_len = read_u64(&mut r, &pstr, "meta length")? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta_buf, &pstr, "meta")?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)?;

        let mut model = MultiTaskModel::new(meta.encoder.clone(), meta.num_identities, &meta.heads)?;

        let count = read_u64(&mut r, &pstr, "parameter count")? as usize;
        let expected = model.params().len();
        if count != expected {
            return Err(Error::format(
                &pstr,
                format!("checkpoint has {count} parameters, structure needs {expected}"),
            ));
        }
        for param in model.params_mut() {
            let name_len = read_u64(&mut r, &pstr, "name length")? as usize;
            let mut name_buf = vec![0u8; name_len];
            read_exact(&mut r, &mut name_buf, &pstr, "name")?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::format(&pstr, "parameter name is not UTF-8"))?;
            if name != param.name {
                return Err(Error::format(
                    &pstr,
                    format!("parameter `{name}` does not match expected `{}`", param.name),
                ));
            }
            let rank = read_u64(&mut r, &pstr, "shape rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r, &pstr, "shape dim")? as usize);
            }
            if shape != param.shape {
                return Err(Error::format(
                    &pstr,
                    format!("shape {shape:?} for `{name}`, expected {:?}", param.shape),
                ));
            }
            let mut buf = [0u8; 8];
            for v in param.values.iter_mut() {
                read_exact(&mut r, &mut buf, &pstr, "values")?;
                *v = f64::from_le_bytes(buf);
            }
            if !param.values.iter().all(|v| v.is_finite()) {
                return Err(Error::format(&pstr, format!("non-finite values in `{name}`")));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::format(&pstr, "trailing bytes after last record"));
        }
        Ok((model, meta))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, path: &str, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &str, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path, what)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn tiny_config(seed: u64) -> EncoderConfig {
        EncoderConfig {
            input_dim: 6,
            hidden_dims: vec![5],
            embedding_dim: 8,
            seed,
        }
    }

    fn tiny_model(seed: u64) -> MultiTaskModel {
        MultiTaskModel::new(
            tiny_config(seed),
            4,
            &[
                ("Hair".to_string(), 3, HeadMode::Predict),
                ("Accessories".to_string(), 2, HeadMode::Suppress),
            ],
        )
        .unwrap()
    }

    #[test]
    fn construction_is_deterministic() {
        assert_eq!(tiny_model(7), tiny_model(7));
        assert_ne!(tiny_model(7), tiny_model(8));
    }

    #[test]
    fn encode_identity_initialized_layer_is_affine() {
        // Hidden layer = identity with zero bias, positive inputs keep the
        // rectifier inactive, so encode must equal the final affine map.
        let mut model = MultiTaskModel::new(
            EncoderConfig {
                input_dim: 3,
                hidden_dims: vec![3],
                embedding_dim: 8,
                seed: 0,
            },
            2,
            &[],
        )
        .unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        model.encoder.layers[0].weight.values = eye;
        model.encoder.layers[0].bias.values = vec![0.0; 3];

        let x = vec![1.0, 2.0, 3.0];
        let z = model.embed_batch(&[x.clone()]).unwrap();
        let w = &model.encoder.layers[1].weight;
        let b = &model.encoder.layers[1].bias;
        for j in 0..8 {
            let expect: f64 = (0..3).map(|i| x[i] * w.values[i * 8 + j]).sum::<f64>() + b.values[j];
            assert!((z[0][j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_batch_rows_are_independent() {
        let model = tiny_model(3);
        let a = vec![0.5, -1.0, 0.25, 2.0, -0.5, 1.0];
        let b = vec![1.5, 0.0, -0.75, 0.5, 1.25, -2.0];
        let batch = model.embed_batch(&[a.clone(), b.clone()]).unwrap();
        let single_a = model.embed_batch(&[a]).unwrap();
        let single_b = model.embed_batch(&[b]).unwrap();
        assert_eq!(batch[0], single_a[0]);
        assert_eq!(batch[1], single_b[0]);
    }

    #[test]
    fn identity_logits_cosine_geometry() {
        let mut model = MultiTaskModel::new(tiny_config(1), 2, &[]).unwrap();
        // Prototype 0 along e0, prototype 1 along e1.
        let mut protos = vec![0.0; 2 * 8];
        protos[0] = 2.0;
        protos[8 + 1] = 0.5;
        model.identity_head.prototypes.values = protos;

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape).unwrap();
        // Embedding along e0: cos to proto0 = 1, proto1 = 0.
        let mut zrow = vec![0.0; 8];
        zrow[0] = 3.0;
        let z = tape.leaf(zrow, vec![1, 8], false).unwrap();
        let logits = model.identity_logits(&mut tape, &binding, z).unwrap();
        assert!((tape.values(logits)[0] - 1.0).abs() < 1e-12);
        assert!(tape.values(logits)[1].abs() < 1e-12);
    }

    #[test]
    fn identity_logits_scale_invariant() {
        let model = tiny_model(11);
        let zrow: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let scaled: Vec<f64> = zrow.iter().map(|v| v * 7.3).collect();

        let mut t1 = Tape::new();
        let b1 = model.bind(&mut t1).unwrap();
        let z1 = t1.leaf(zrow, vec![1, 8], false).unwrap();
        let l1 = model.identity_logits(&mut t1, &b1, z1).unwrap();

        let mut t2 = Tape::new();
        let b2 = model.bind(&mut t2).unwrap();
        let z2 = t2.leaf(scaled, vec![1, 8], false).unwrap();
        let l2 = model.identity_logits(&mut t2, &b2, z2).unwrap();

        for (a, b) in t1.values(l1).iter().zip(t2.values(l2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_logits_rejects_near_zero_embedding() {
        let model = tiny_model(1);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape).unwrap();
        let z = tape.leaf(vec![1e-9; 8], vec![1, 8], false).unwrap();
        assert!(model.identity_logits(&mut tape, &binding, z).is_err());
    }

    #[test]
    fn attribute_logits_forward_identical_across_modes() {
        let mut predict = tiny_model(5);
        let mut suppress = tiny_model(5);
        for h in &mut predict.attribute_heads {
            h.mode = HeadMode::Predict;
        }
        for h in &mut suppress.attribute_heads {
            h.mode = HeadMode::Suppress;
        }
        let x = vec![0.2, -0.4, 1.0, 0.7, -1.1, 0.05];

        let run = |model: &MultiTaskModel| -> Vec<f64> {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape).unwrap();
            let xt = tape.leaf(x.clone(), vec![1, 6], false).unwrap();
            let z = model.encode(&mut tape, &binding, xt).unwrap();
            let l = model
                .attribute_logits(&mut tape, &binding, z, "Hair")
                .unwrap();
            tape.values(l).to_vec()
        };
        assert_eq!(run(&predict), run(&suppress));
    }

    #[test]
    fn attribute_logits_zero_weight_gives_bias() {
        let mut model = tiny_model(5);
        model.attribute_heads[0].weight.values = vec![0.0; 8 * 3];
        model.attribute_heads[0].bias.values = vec![0.25, -1.5, 3.0];
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape).unwrap();
        let z = tape
            .leaf((0..16).map(|i| i as f64 * 0.1).collect(), vec![2, 8], false)
            .unwrap();
        let l = model
            .attribute_logits(&mut tape, &binding, z, "Hair")
            .unwrap();
        assert_eq!(tape.values(l), &[0.25, -1.5, 3.0, 0.25, -1.5, 3.0]);
    }

    #[test]
    fn attribute_logits_unknown_group_errors() {
        let model = tiny_model(5);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape).unwrap();
        let z = tape.leaf(vec![0.1; 8], vec![1, 8], false).unwrap();
        assert!(model
            .attribute_logits(&mut tape, &binding, z, "Nose")
            .is_err());
    }

    #[test]
    fn suppress_mode_flips_encoder_gradients_exactly() {
        // Twin models, identical parameters, one head predict vs suppress.
        let make = |mode: HeadMode| {
            MultiTaskModel::new(tiny_config(5), 4, &[("Hair".to_string(), 3, mode)]).unwrap()
        };
        let x = vec![0.2, -0.4, 1.0, 0.7, -1.1, 0.05, 0.9, 0.3, -0.2, 0.6, -0.8, 0.15];
        let targets = vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mask = vec![true; 6];

        let grads = |mode: HeadMode| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
            let model = make(mode);
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape).unwrap();
            let xt = tape.leaf(x.clone(), vec![2, 6], false).unwrap();
            let z = model.encode(&mut tape, &binding, xt).unwrap();
            let logits = model
                .attribute_logits(&mut tape, &binding, z, "Hair")
                .unwrap();
            let loss = tape.bce_with_logits_sum(logits, &targets, &mask).unwrap();
            tape.backward(loss).unwrap();
            let enc: Vec<Vec<f64>> = binding
                .layer_ids
                .iter()
                .flat_map(|&(w, b)| [tape.grad(w).unwrap().to_vec(), tape.grad(b).unwrap().to_vec()])
                .collect();
            let heads: Vec<Vec<f64>> = binding
                .head_ids
                .iter()
                .flat_map(|&(w, b)| [tape.grad(w).unwrap().to_vec(), tape.grad(b).unwrap().to_vec()])
                .collect();
            (enc, heads)
        };

        let (enc_p, head_p) = grads(HeadMode::Predict);
        let (enc_s, head_s) = grads(HeadMode::Suppress);
        // Encoder gradients flip sign exactly; head gradients are identical.
        for (gp, gs) in enc_p.iter().zip(&enc_s) {
            for (a, b) in gp.iter().zip(gs) {
                assert_eq!(*a, -*b);
            }
        }
        assert_eq!(head_p, head_s);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(99);
        model.save(&path, Some("run-1".to_string())).unwrap();
        let (loaded, meta) = MultiTaskModel::load(&path).unwrap();
        assert_eq!(model, loaded);
        assert_eq!(meta.run_id.as_deref(), Some("run-1"));

        // Second save of the loaded model is byte-identical.
        let path2 = dir.path().join("model2.ckpt");
        loaded.save(&path2, Some("run-1".to_string())).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(1);
        model.save(&path, None).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        let err = MultiTaskModel::load(&bad).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let full = std::fs::read(&path).unwrap();
        let trunc = dir.path().join("trunc.ckpt");
        std::fs::write(&trunc, &full[..full.len() - 9]).unwrap();
        let err = MultiTaskModel::load(&trunc).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn duplicate_group_binding_rejected() {
        let err = MultiTaskModel::new(
            tiny_config(0),
            2,
            &[
                ("Hair".to_string(), 3, HeadMode::Predict),
                ("Hair".to_string(), 3, HeadMode::Suppress),
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("Hair"));
    }
}
