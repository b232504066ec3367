//! Model bundle: architecture config, weights, and tokenizer.
//!
//! A model lives in a directory of four files:
//!
//! * `config.json`   — architecture numbers (layer/head/width counts, eps, rope base)
//! * `manifest.json` — tensor name -> { byte offset, shape, dtype } into `weights.bin`
//! * `weights.bin`   — raw little-endian `f32` values, concatenated
//! * `vocab.json`    — token string -> id (ids dense in `0..vocab_size`)
//!
//! Weights are promoted to `f64` on load; all downstream arithmetic is `f64`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Matrix;

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub norm_eps: f64,
    pub rope_base: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config(
                "layer/width/head counts must be nonzero".into(),
            ));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config("d_head must be even for rotary pairs".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be nonzero".into()));
        }
        if self.norm_eps.is_nan() || self.norm_eps < 0.0 {
            return Err(Error::Config("norm_eps must be >= 0".into()));
        }
        if self.rope_base.is_nan() || self.rope_base <= 0.0 {
            return Err(Error::Config("rope_base must be > 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// vocabulary / tokenizer
// ---------------------------------------------------------------------------

/// Greedy longest-match tokenizer over an explicit string vocabulary.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    max_token_bytes: usize,
}

impl Vocab {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, u32)>) -> Result<Self> {
        let map: HashMap<String, u32> = pairs.into_iter().collect();
        let n = map.len();
        let mut id_to_token = vec![String::new(); n];
        let mut seen = vec![false; n];
        for (tok, &id) in &map {
            let idx = id as usize;
            if idx >= n {
                return Err(Error::Data(format!(
                    "vocab id {id} out of range for {n} entries (ids must be dense)"
                )));
            }
            if seen[idx] {
                return Err(Error::Data(format!("duplicate vocab id {id}")));
            }
            if tok.is_empty() {
                return Err(Error::Data("empty string in vocabulary".into()));
            }
            seen[idx] = true;
            id_to_token[idx] = tok.clone();
        }
        let max_token_bytes = id_to_token.iter().map(|t| t.len()).max().unwrap_or(0);
        Ok(Vocab {
            token_to_id: map,
            id_to_token,
            max_token_bytes,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.id_to_token
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Validation(format!("token id {id} out of range")))
    }

    /// Greedy longest-match encoding. A span with no matching vocabulary
    /// entry is an error naming the offending text.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let mut matched = None;
            let top = self.max_token_bytes.min(bytes.len() - i);
            for len in (1..=top).rev() {
                if !text.is_char_boundary(i + len) {
                    continue;
                }
                if let Some(&id) = self.token_to_id.get(&text[i..i + len]) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    let end = (i + 24).min(bytes.len());
                    let mut end = end;
                    while !text.is_char_boundary(end) {
                        end -= 1;
                    }
                    return Err(Error::Tokenization(text[i..end].to_string()));
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            s.push_str(self.token(id)?);
        }
        Ok(s)
    }

    fn to_map(&self) -> BTreeMap<String, u32> {
        self.token_to_id
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// bundle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm_gain: Vec<f64>,
    /// (n_heads * d_head, d_model); head h occupies rows h*d_head..(h+1)*d_head.
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// (d_model, n_heads * d_head)
    pub w_o: Matrix,
    pub mlp_norm_gain: Vec<f64>,
    /// (d_mlp, d_model)
    pub w_in: Matrix,
    /// (d_model, d_mlp)
    pub w_out: Matrix,
}

/// Immutable model: config + weights + tokenizer. Shared read-only across
/// worker threads.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub vocab: Vocab,
    /// (vocab_size, d_model)
    pub embedding: Matrix,
    /// (d_model, vocab_size)
    pub unembedding: Matrix,
    pub final_norm_gain: Vec<f64>,
    pub layers: Vec<LayerWeights>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    offset: u64,
    shape: Vec<usize>,
    dtype: String,
}

impl ModelBundle {
    /// Check weight shapes against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let qk = c.n_heads * c.d_head;
        let expect = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::Shape(format!(
                    "{name}: expected {rows}x{cols}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(())
        };
        expect("embedding", &self.embedding, c.vocab_size, c.d_model)?;
        expect("unembedding", &self.unembedding, c.d_model, c.vocab_size)?;
        if self.final_norm_gain.len() != c.d_model {
            return Err(Error::Shape("final_norm.gain length != d_model".into()));
        }
        if self.layers.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                c.n_layers,
                self.layers.len()
            )));
        }
        if self.vocab.len() != c.vocab_size {
            return Err(Error::Shape(format!(
                "vocab has {} entries, config says {}",
                self.vocab.len(),
                c.vocab_size
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            expect(&format!("layers.{i}.attn.w_q"), &l.w_q, qk, c.d_model)?;
            expect(&format!("layers.{i}.attn.w_k"), &l.w_k, qk, c.d_model)?;
            expect(&format!("layers.{i}.attn.w_v"), &l.w_v, qk, c.d_model)?;
            expect(&format!("layers.{i}.attn.w_o"), &l.w_o, c.d_model, qk)?;
            expect(&format!("layers.{i}.mlp.w_in"), &l.w_in, c.d_mlp, c.d_model)?;
            expect(
                &format!("layers.{i}.mlp.w_out"),
                &l.w_out,
                c.d_model,
                c.d_mlp,
            )?;
            if l.attn_norm_gain.len() != c.d_model || l.mlp_norm_gain.len() != c.d_model {
                return Err(Error::Shape(format!(
                    "layers.{i}: norm gain length != d_model"
                )));
            }
        }
        Ok(())
    }

    /// Canonical (name, shape) list for a config; manifest must match exactly.
    fn tensor_plan(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let qk = c.n_heads * c.d_head;
        let mut plan = vec![
            ("embedding".to_string(), vec![c.vocab_size, c.d_model]),
            ("unembedding".to_string(), vec![c.d_model, c.vocab_size]),
            ("final_norm.gain".to_string(), vec![c.d_model]),
        ];
        for i in 0..c.n_layers {
            plan.push((format!("layers.{i}.attn_norm.gain"), vec![c.d_model]));
            plan.push((format!("layers.{i}.attn.w_q"), vec![qk, c.d_model]));
            plan.push((format!("layers.{i}.attn.w_k"), vec![qk, c.d_model]));
            plan.push((format!("layers.{i}.attn.w_v"), vec![qk, c.d_model]));
            plan.push((format!("layers.{i}.attn.w_o"), vec![c.d_model, qk]));
            plan.push((format!("layers.{i}.mlp_norm.gain"), vec![c.d_model]));
            plan.push((format!("layers.{i}.mlp.w_in"), vec![c.d_mlp, c.d_model]));
            plan.push((format!("layers.{i}.mlp.w_out"), vec![c.d_model, c.d_mlp]));
        }
        plan
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<u8>> {
            std::fs::read(dir.join(name))
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.join(name).display())))
        };
        let config: ModelConfig = serde_json::from_slice(&read("config.json")?)
            .map_err(|e| Error::Data(format!("config.json: {e}")))?;
        config.validate()?;
        let manifest: BTreeMap<String, ManifestEntry> =
            serde_json::from_slice(&read("manifest.json")?)
                .map_err(|e| Error::Data(format!("manifest.json: {e}")))?;
        let vocab_map: BTreeMap<String, u32> = serde_json::from_slice(&read("vocab.json")?)
            .map_err(|e| Error::Data(format!("vocab.json: {e}")))?;
        let vocab = Vocab::from_pairs(vocab_map)?;
        let blob = read("weights.bin")?;

        let plan = Self::tensor_plan(&config);
        for name in manifest.keys() {
            if !plan.iter().any(|(n, _)| n == name) {
                return Err(Error::Data(format!(
                    "manifest names unexpected tensor {name:?}"
                )));
            }
        }
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let entry = manifest
                .get(name)
                .ok_or_else(|| Error::Data(format!("manifest is missing tensor {name:?}")))?;
            if entry.dtype != "f32" {
                return Err(Error::Data(format!(
                    "tensor {name:?}: unsupported dtype {:?}",
                    entry.dtype
                )));
            }
            if entry.shape != shape {
                return Err(Error::Data(format!(
                    "tensor {name:?}: declared shape {:?}, config requires {:?}",
                    entry.shape, shape
                )));
            }
            let count: usize = shape.iter().product();
            let start = entry.offset as usize;
            let end = start + count * 4;
            if end > blob.len() {
                return Err(Error::Data(format!(
                    "tensor {name:?}: byte range {start}..{end} exceeds weights.bin ({} bytes)",
                    blob.len()
                )));
            }
            let mut out = Vec::with_capacity(count);
            for chunk in blob[start..end].chunks_exact(4) {
                out.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
            }
            Ok(out)
        };

        let mat = |data: Vec<f64>, shape: &[usize]| Matrix::new(shape[0], shape[1], data);
        let emb_shape = [config.vocab_size, config.d_model];
        let unemb_shape = [config.d_model, config.vocab_size];
        let embedding = mat(fetch("embedding", &emb_shape)?, &emb_shape)?;
        let unembedding = mat(fetch("unembedding", &unemb_shape)?, &unemb_shape)?;
        let final_norm_gain = fetch("final_norm.gain", &[config.d_model])?;

        let qk = config.n_heads * config.d_head;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let g = |suffix: &str| format!("layers.{i}.{suffix}");
            layers.push(LayerWeights {
                attn_norm_gain: fetch(&g("attn_norm.gain"), &[config.d_model])?,
                w_q: mat(
                    fetch(&g("attn.w_q"), &[qk, config.d_model])?,
                    &[qk, config.d_model],
                )?,
                w_k: mat(
                    fetch(&g("attn.w_k"), &[qk, config.d_model])?,
                    &[qk, config.d_model],
                )?,
                w_v: mat(
                    fetch(&g("attn.w_v"), &[qk, config.d_model])?,
                    &[qk, config.d_model],
                )?,
                w_o: mat(
                    fetch(&g("attn.w_o"), &[config.d_model, qk])?,
                    &[config.d_model, qk],
                )?,
                mlp_norm_gain: fetch(&g("mlp_norm.gain"), &[config.d_model])?,
                w_in: mat(
                    fetch(&g("mlp.w_in"), &[config.d_mlp, config.d_model])?,
                    &[config.d_mlp, config.d_model],
                )?,
                w_out: mat(
                    fetch(&g("mlp.w_out"), &[config.d_model, config.d_mlp])?,
                    &[config.d_model, config.d_mlp],
                )?,
            });
        }

        let bundle = ModelBundle {
            config,
            vocab,
            embedding,
            unembedding,
            final_norm_gain,
            layers,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Write the four-file directory format. Tensors are stored in canonical
    /// order, so identical bundles produce identical bytes.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        let plan = Self::tensor_plan(&self.config);
        let mut manifest: BTreeMap<String, ManifestEntry> = BTreeMap::new();
        let mut blob: Vec<u8> = Vec::new();
        for (name, shape) in &plan {
            let data = self.tensor_data(name)?;
            let count: usize = shape.iter().product();
            if data.len() != count {
                return Err(Error::Shape(format!(
                    "tensor {name:?} has {} values, shape {:?} requires {count}",
                    data.len(),
                    shape
                )));
            }
            manifest.insert(
                name.clone(),
                ManifestEntry {
                    offset: blob.len() as u64,
                    shape: shape.clone(),
                    dtype: "f32".into(),
                },
            );
            for v in data {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        std::fs::write(dir.join("weights.bin"), &blob)?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        std::fs::write(
            dir.join("config.json"),
            serde_json::to_vec_pretty(&self.config)?,
        )?;
        std::fs::write(
            dir.join("vocab.json"),
            serde_json::to_vec_pretty(&self.vocab.to_map())?,
        )?;
        Ok(())
    }

    fn tensor_data(&self, name: &str) -> Result<Vec<f64>> {
        if name == "embedding" {
            return Ok(self.embedding.data().to_vec());
        }
        if name == "unembedding" {
            return Ok(self.unembedding.data().to_vec());
        }
        if name == "final_norm.gain" {
            return Ok(self.final_norm_gain.clone());
        }
        let rest = name
            .strip_prefix("layers.")
            .ok_or_else(|| Error::Data(format!("unknown tensor {name:?}")))?;
        let (idx, suffix) = rest
            .split_once('.')
            .ok_or_else(|| Error::Data(format!("unknown tensor {name:?}")))?;
        let i: usize = idx
            .parse()
            .map_err(|_| Error::Data(format!("unknown tensor {name:?}")))?;
        let l = self
            .layers
            .get(i)
            .ok_or_else(|| Error::Data(format!("layer {i} out of range")))?;
        Ok(match suffix {
            "attn_norm.gain" => l.attn_norm_gain.clone(),
            "attn.w_q" => l.w_q.data().to_vec(),
            "attn.w_k" => l.w_k.data().to_vec(),
            "attn.w_v" => l.w_v.data().to_vec(),
            "attn.w_o" => l.w_o.data().to_vec(),
            "mlp_norm.gain" => l.mlp_norm_gain.clone(),
            "mlp.w_in" => l.w_in.data().to_vec(),
            "mlp.w_out" => l.w_out.data().to_vec(),
            _ => return Err(Error::Data(format!("unknown tensor {name:?}"))),
        })
    }
}

// ---------------------------------------------------------------------------
// seeded random models (fuzzing, benches)
// ---------------------------------------------------------------------------

/// Fully random model with O(1)-scale activations; weights drawn from a
/// seeded ChaCha stream so fuzz suites are reproducible. Vocabulary entries
/// are synthetic words `t0`, `t1`, ...
pub fn random_model(
    seed: u64,
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    d_mlp: usize,
    vocab_size: usize,
) -> ModelBundle {
    use rand::Rng;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    let config = ModelConfig {
        n_layers,
        d_model,
        n_heads,
        d_head: d_model / n_heads,
        d_mlp,
        vocab_size,
        norm_eps: 1e-6,
        rope_base: 10000.0,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |rows: usize, cols: usize, sd: f64| {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * sd
            })
            .collect();
        Matrix::new(rows, cols, data).expect("random matrix is finite")
    };
    let proj_sd = 1.0 / (d_model as f64).sqrt();
    let qk = config.n_heads * config.d_head;
    let embedding = normal(vocab_size, d_model, 1.0);
    let unembedding = normal(d_model, vocab_size, proj_sd);
    let layers = (0..n_layers)
        .map(|_| LayerWeights {
            attn_norm_gain: vec![1.0; d_model],
            w_q: normal(qk, d_model, proj_sd),
            w_k: normal(qk, d_model, proj_sd),
            w_v: normal(qk, d_model, proj_sd),
            w_o: normal(d_model, qk, proj_sd),
            mlp_norm_gain: vec![1.0; d_model],
            w_in: normal(d_mlp, d_model, proj_sd),
            w_out: normal(d_model, d_mlp, 1.0 / (d_mlp as f64).sqrt()),
        })
        .collect();
    let vocab = Vocab::from_pairs((0..vocab_size).map(|i| (format!("t{i}"), i as u32)))
        .expect("synthetic vocab is dense");
    ModelBundle {
        config,
        vocab,
        embedding,
        unembedding,
        final_norm_gain: vec![1.0; d_model],
        layers,
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocab() -> Vocab {
        let toks = ["a", "ab", "abc", " ", "\n", ":", "Chance", "Chances"];
        Vocab::from_pairs(
            toks.iter()
                .enumerate()
                .map(|(i, t)| (t.to_string(), i as u32)),
        )
        .unwrap()
    }

    #[test]
    fn encode_prefers_longest_match() {
        let v = tiny_vocab();
        let ids = v.encode("abcab a").unwrap();
        let toks: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["abc", "ab", " ", "a"]);
        let ids = v.encode("Chances").unwrap();
        assert_eq!(v.token(ids[0]).unwrap(), "Chances");
        assert_eq!(ids.len(), 1);
    }

    #[test]
    fn encode_unknown_span_names_substring() {
        let v = tiny_vocab();
        match v.encode("ab zzz") {
            Err(Error::Tokenization(s)) => assert!(s.starts_with("zzz"), "got {s:?}"),
            other => panic!("expected tokenization error, got {other:?}"),
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let v = tiny_vocab();
        let text = "abc:\nab Chances a";
        let ids = v.encode(text).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), text);
    }

    #[test]
    fn vocab_rejects_sparse_ids() {
        let r = Vocab::from_pairs(vec![("a".to_string(), 0), ("b".to_string(), 2)]);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    fn tiny_bundle() -> ModelBundle {
        let config = ModelConfig {
            n_layers: 2,
            d_model: 4,
            n_heads: 2,
            d_head: 2,
            d_mlp: 6,
            vocab_size: 3,
            norm_eps: 1e-6,
            rope_base: 10000.0,
        };
        let vocab = Vocab::from_pairs(vec![
            ("a".to_string(), 0),
            ("b".to_string(), 1),
            ("c".to_string(), 2),
        ])
        .unwrap();
        let fill = |rows: usize, cols: usize, scale: f64| {
            Matrix::new(
                rows,
                cols,
                (0..rows * cols)
                    .map(|i| ((i % 7) as f64 - 3.0) * scale)
                    .collect(),
            )
            .unwrap()
        };
        let layer = |s: f64| LayerWeights {
            attn_norm_gain: vec![1.0; 4],
            w_q: fill(4, 4, s),
            w_k: fill(4, 4, s * 0.5),
            w_v: fill(4, 4, s * 0.25),
            w_o: fill(4, 4, s * 0.125),
            mlp_norm_gain: vec![1.0; 4],
            w_in: fill(6, 4, s),
            w_out: fill(4, 6, s),
        };
        ModelBundle {
            config,
            vocab,
            embedding: fill(3, 4, 0.5),
            unembedding: fill(4, 3, 0.5),
            final_norm_gain: vec![1.0; 4],
            layers: vec![layer(0.25), layer(0.5)],
        }
    }

    #[test]
    fn save_load_roundtrip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle();
        bundle.save(dir.path()).unwrap();
        let loaded = ModelBundle::load(dir.path()).unwrap();
        assert_eq!(loaded.config, bundle.config);
        assert_eq!(loaded.embedding.data(), bundle.embedding.data());
        assert_eq!(loaded.layers[1].w_out.data(), bundle.layers[1].w_out.data());

        // a second save must produce byte-identical files
        let first = std::fs::read(dir.path().join("weights.bin")).unwrap();
        loaded.save(dir.path()).unwrap();
        let second = std::fs::read(dir.path().join("weights.bin")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn load_rejects_missing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        tiny_bundle().save(dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let mut manifest: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(&std::fs::read(&manifest_path).unwrap()).unwrap();
        manifest.remove("layers.0.attn.w_q");
        std::fs::write(&manifest_path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        match ModelBundle::load(dir.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("layers.0.attn.w_q"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_wrong_shape() {
        let dir = tempfile::tempdir().unwrap();
        tiny_bundle().save(dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let mut manifest: BTreeMap<String, ManifestEntry> =
            serde_json::from_slice(&std::fs::read(&manifest_path).unwrap()).unwrap();
        manifest.get_mut("embedding").unwrap().shape = vec![4, 3];
        std::fs::write(&manifest_path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        match ModelBundle::load(dir.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("declared shape"), "{msg}"),
            other => panic!("expected shape complaint, got {other:?}"),
        }
    }
}
