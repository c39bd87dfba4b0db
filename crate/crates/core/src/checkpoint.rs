//! Checkpoint directories: a JSON `meta` document and a flat little-endian
//! `f32` payload named `params`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{DoubleAttentionModel, ModelDims, ModelKind, SingleAttentionModel};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::vocab::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta";
pub const PARAMS_FILE: &str = "params";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: ModelKind,
    pub dims: ModelDims,
    /// Parameter blocks in payload order.
    pub blocks: Vec<BlockMeta>,
    /// Corpus tokens in id order, reserved entries excluded.
    pub src_vocab: Vec<String>,
    pub tgt_vocab: Vec<String>,
    pub seed: u64,
    pub steps: usize,
    pub hyperparameters: BTreeMap<String, String>,
    /// Digest of the stage-one checkpoint a stage-two model was built from.
    pub provenance: Option<String>,
}

#[derive(Clone, Debug)]
pub enum AnyModel<T> {
    Single(SingleAttentionModel<T>),
    Double(DoubleAttentionModel<T>),
}

impl<T: Real> AnyModel<T> {
    pub fn params(&self) -> &ParamStore<T> {
        match self {
            AnyModel::Single(m) => &m.params,
            AnyModel::Double(m) => &m.params,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Single(_) => ModelKind::Single,
            AnyModel::Double(_) => ModelKind::Double,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub model: AnyModel<T>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

/// Fields of the metadata document that are not derived from the model.
#[derive(Clone, Debug, Default)]
pub struct SaveInfo {
    pub seed: u64,
    pub steps: usize,
    pub hyperparameters: BTreeMap<String, String>,
    pub provenance: Option<String>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn payload<T: Real>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.total_size() * 4);
    for b in params.blocks() {
        for &x in b.value.data() {
            out.extend_from_slice(&x.as_f32().to_le_bytes());
        }
    }
    out
}

/// Writes `dir/meta` and `dir/params`, creating `dir` if needed. Values
/// are stored as `f32` whatever the working precision.
pub fn save<T: Real>(
    dir: &Path,
    model: &AnyModel<T>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    info: &SaveInfo,
) -> Result<CheckpointMeta> {
    let params = model.params();
    let dims = match model {
        AnyModel::Single(m) => m.dims.clone(),
        AnyModel::Double(m) => m.dims.clone(),
    };
    if dims.src_vocab != src_vocab.len() || dims.tgt_vocab != tgt_vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "model expects {}/{} ids, vocabularies have {}/{}",
            dims.src_vocab,
            dims.tgt_vocab,
            src_vocab.len(),
            tgt_vocab.len()
        )));
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind: model.kind(),
        dims,
        blocks: params
            .blocks()
            .iter()
            .map(|b| BlockMeta {
                name: b.name.clone(),
                shape: b.value.shape().to_vec(),
                frozen: b.frozen,
            })
            .collect(),
        src_vocab: src_vocab.corpus_tokens().to_vec(),
        tgt_vocab: tgt_vocab.corpus_tokens().to_vec(),
        seed: info.seed,
        steps: info.steps,
        hyperparameters: info.hyperparameters.clone(),
        provenance: info.provenance.clone(),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = serde_json::to_string_pretty(&meta).map_err(|e| ckpt_err(e.to_string()))?;
    text.push('\n');
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, payload(params)).map_err(|e| Error::io(&params_path, e))?;
    Ok(meta)
}

/// SHA-256 over the metadata bytes followed by the payload bytes.
pub fn digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [META_FILE, PARAMS_FILE] {
        let path = dir.join(name);
        h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn fill<T: Real>(store: &mut ParamStore<T>, meta: &CheckpointMeta, bytes: &[u8]) -> Result<()> {
    if store.len() != meta.blocks.len() {
        return Err(ckpt_err(format!(
            "{} model has {} blocks, metadata declares {}",
            meta.kind.as_str(),
            store.len(),
            meta.blocks.len()
        )));
    }
    let declared: usize = meta.blocks.iter().map(|b| b.shape.iter().product::<usize>()).sum();
    if bytes.len() != declared * 4 {
        return Err(ckpt_err(format!(
            "payload holds {} bytes, metadata declares {} values",
            bytes.len(),
            declared
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| T::of_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let ids: Vec<_> = store.ids().collect();
    for (id, bm) in ids.into_iter().zip(&meta.blocks) {
        let block = store.block(id);
        if block.name != bm.name || block.value.shape() != bm.shape.as_slice() {
            return Err(ckpt_err(format!(
                "block {} {:?} does not match declared {} {:?}",
                block.name,
                block.value.shape(),
                bm.name,
                bm.shape
            )));
        }
        let n = bm.shape.iter().product();
        let data: Vec<T> = values.by_ref().take(n).collect();
        store.set(id, Tensor::new(bm.shape.clone(), data)?)?;
        store.set_frozen(id, bm.frozen);
    }
    Ok(())
}

pub fn load<T: Real>(dir: &Path) -> Result<Checkpoint<T>> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| ckpt_err(format!("{}: {e}", meta_path.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(ckpt_err(format!("unsupported format version {}", meta.format_version)));
    }
    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    let src_vocab = Vocabulary::from_list(meta.src_vocab.clone())?;
    let tgt_vocab = Vocabulary::from_list(meta.tgt_vocab.clone())?;
    if src_vocab.len() != meta.dims.src_vocab || tgt_vocab.len() != meta.dims.tgt_vocab {
        return Err(Error::VocabMismatch(
            "stored vocabularies disagree with the model widths".into(),
        ));
    }
    // The layout comes from a fresh model; its values are all overwritten.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = match meta.kind {
        ModelKind::Single => {
            let mut m = SingleAttentionModel::new(meta.dims.clone(), &mut rng)?;
            fill(&mut m.params, &meta, &bytes)?;
            AnyModel::Single(m)
        }
        ModelKind::Double => {
            let mut m = DoubleAttentionModel::new(meta.dims.clone(), &mut rng)?;
            fill(&mut m.params, &meta, &bytes)?;
            AnyModel::Double(m)
        }
    };
    Ok(Checkpoint {
        meta,
        model,
        src_vocab,
        tgt_vocab,
    })
}

impl<T: Real> Checkpoint<T> {
    pub fn into_single(self) -> Result<(SingleAttentionModel<T>, CheckpointMeta, Vocabulary, Vocabulary)> {
        match self.model {
            AnyModel::Single(m) => Ok((m, self.meta, self.src_vocab, self.tgt_vocab)),
            AnyModel::Double(_) => Err(ckpt_err("expected a stage-one (single) checkpoint, found double")),
        }
    }

    pub fn into_double(self) -> Result<(DoubleAttentionModel<T>, CheckpointMeta, Vocabulary, Vocabulary)> {
        match self.model {
            AnyModel::Double(m) => Ok((m, self.meta, self.src_vocab, self.tgt_vocab)),
            AnyModel::Single(_) => Err(ckpt_err("expected a stage-two (double) checkpoint, found single")),
        }
    }
}
