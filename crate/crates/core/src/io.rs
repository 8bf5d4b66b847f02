//! Binary containers for score matrices and parameter checkpoints.
//!
//! Both formats start with 8 magic bytes and a little-endian `u32` format
//! version. Checkpoints then hold a length-prefixed JSON header (kind,
//! configuration, tensor names and shapes) followed by the raw little-endian
//! `f32` tensor data in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::encoder::{EncoderConfig, EntityRepCache, StarConfig, StarModel};
use crate::error::{Error, Result};
use crate::kg::{Direction, EntityId, RelationId, Triple};
use crate::scoring::CrossEncoder;
use crate::tensor::{Matrix, Real};
use crate::tokenizer::Vocabulary;

const SCORE_MAGIC: &[u8; 8] = b"STARSCR\0";
const CKPT_MAGIC: &[u8; 8] = b"STARKGC\0";
const FORMAT_VERSION: u32 = 1;

/// Dense per-query scores over every entity, one block per query.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub label: String,
    pub num_entities: usize,
    pub blocks: Vec<ScoreBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBlock {
    pub query_index: u32,
    pub direction: Direction,
    pub triple: Triple,
    pub scores: Vec<f32>,
}

impl ScoreMatrix {
    /// Checks that `other` covers the same queries over the same entities.
    pub fn check_aligned(&self, other: &ScoreMatrix) -> Result<()> {
        if self.num_entities != other.num_entities {
            return Err(Error::MatrixMismatch(format!(
                "{} vs {} entities",
                self.num_entities, other.num_entities
            )));
        }
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::MatrixMismatch(format!(
                "{} vs {} queries",
                self.blocks.len(),
                other.blocks.len()
            )));
        }
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            if (a.query_index, a.direction, a.triple) != (b.query_index, b.direction, b.triple) {
                return Err(Error::MatrixMismatch(format!(
                    "query {} differs",
                    a.query_index
                )));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(SCORE_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_bytes(w, self.label.as_bytes())?;
        w.write_all(&(self.num_entities as u32).to_le_bytes())?;
        w.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        for b in &self.blocks {
            w.write_all(&b.query_index.to_le_bytes())?;
            w.write_all(&[b.direction.code()])?;
            for x in [
                b.triple.head.0,
                b.triple.rel.0,
                b.triple.tail.0,
                b.scores.len() as u32,
            ] {
                w.write_all(&x.to_le_bytes())?;
            }
            for s in &b.scores {
                w.write_all(&s.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, SCORE_MAGIC)?;
        let label = String::from_utf8(read_bytes(r)?)
            .map_err(|_| Error::Format("label is not UTF-8".into()))?;
        let num_entities = read_u32(r)? as usize;
        let n_blocks = read_u32(r)? as usize;
        let mut blocks = Vec::with_capacity(n_blocks.min(1 << 20));
        for _ in 0..n_blocks {
            let query_index = read_u32(r)?;
            let mut dir = [0u8];
            r.read_exact(&mut dir).map_err(truncated)?;
            let direction = Direction::from_code(dir[0])
                .ok_or_else(|| Error::Format(format!("bad direction code {}", dir[0])))?;
            let triple = Triple::new(
                EntityId(read_u32(r)?),
                RelationId(read_u32(r)?),
                EntityId(read_u32(r)?),
            );
            let count = read_u32(r)? as usize;
            if count != num_entities {
                return Err(Error::Format(format!(
                    "block of {count} scores, expected {num_entities}"
                )));
            }
            let scores = read_f32s(r, count)?;
            blocks.push(ScoreBlock {
                query_index,
                direction,
                triple,
                scores,
            });
        }
        Ok(ScoreMatrix {
            label,
            num_entities,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        create_parent(path)?;
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

/// A parameter container: a kind tag, free-form JSON metadata and tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub store: ParamStore<f32>,
}

impl Container {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .store
                .names()
                .iter()
                .zip(self.store.tensors())
                .map(|(n, t)| TensorMeta {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let io = |e| Error::Format(format!("write failed: {e}"));
        w.write_all(CKPT_MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        write_bytes(w, &json).map_err(io)?;
        for t in self.store.tensors() {
            for x in t.data() {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, CKPT_MAGIC)?;
        let header: Header = serde_json::from_slice(&read_bytes(r)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut store = ParamStore::new();
        for t in &header.tensors {
            let data = read_f32s(r, t.rows * t.cols)?;
            store.add(t.name.clone(), Matrix::from_vec(t.rows, t.cols, data));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        create_parent(path)?;
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected a `{kind}` file, found `{}`",
                self.kind
            )))
        }
    }

    pub fn meta_as<M: for<'de> Deserialize<'de>>(&self) -> Result<M> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| Error::Format(format!("{} metadata: {e}", self.kind)))
    }
}

#[derive(Serialize, Deserialize)]
struct StarMeta {
    config: StarConfig,
    vocab: Vec<String>,
}

pub fn star_to_container<T: Real>(model: &StarModel<T>) -> Container {
    let meta = StarMeta {
        config: model.config().clone(),
        vocab: model.vocab().tokens().to_vec(),
    };
    Container {
        kind: "star".into(),
        meta: serde_json::to_value(meta).expect("config serializes"),
        store: model.store().cast(),
    }
}

pub fn star_from_container<T: Real>(c: &Container) -> Result<StarModel<T>> {
    c.expect_kind("star")?;
    let meta: StarMeta = c.meta_as()?;
    StarModel::with_store(
        meta.config,
        Vocabulary::from_tokens(meta.vocab),
        c.store.cast(),
    )
}

pub fn save_star<T: Real>(model: &StarModel<T>, path: &Path) -> Result<()> {
    star_to_container(model).save(path)
}

pub fn load_star<T: Real>(path: &Path) -> Result<StarModel<T>> {
    star_from_container(&Container::load(path)?)
}

#[derive(Serialize, Deserialize)]
struct CrossMeta {
    config: EncoderConfig,
    vocab: Vec<String>,
}

pub fn cross_to_container<T: Real>(model: &CrossEncoder<T>) -> Container {
    let meta = CrossMeta {
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
    };
    Container {
        kind: "cross".into(),
        meta: serde_json::to_value(meta).expect("config serializes"),
        store: model.store.cast(),
    }
}

pub fn cross_from_container<T: Real>(c: &Container) -> Result<CrossEncoder<T>> {
    c.expect_kind("cross")?;
    let meta: CrossMeta = c.meta_as()?;
    CrossEncoder::with_store(
        meta.config,
        Vocabulary::from_tokens(meta.vocab),
        c.store.cast(),
    )
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    params_checksum: String,
}

/// Saves an entity cache tagged with the checksum of the model it came from.
pub fn save_entity_cache<T: Real>(
    cache: &EntityRepCache<T>,
    model: &StarModel<T>,
    path: &Path,
) -> Result<()> {
    let mut store = ParamStore::new();
    store.add("entity_reps", cache.reps().cast());
    Container {
        kind: "entity_cache".into(),
        meta: serde_json::to_value(CacheMeta {
            params_checksum: model.store().checksum(),
        })
        .expect("metadata serializes"),
        store,
    }
    .save(path)
}

/// Loads a cache saved by [`save_entity_cache`]; it must come from `model`'s
/// current parameters.
pub fn load_entity_cache<T: Real>(model: &StarModel<T>, path: &Path) -> Result<EntityRepCache<T>> {
    let c = Container::load(path)?;
    c.expect_kind("entity_cache")?;
    let meta: CacheMeta = c.meta_as()?;
    if meta.params_checksum != model.store().checksum() {
        return Err(Error::Format(
            "entity cache was built from different parameters".into(),
        ));
    }
    let reps = c
        .store
        .tensors()
        .first()
        .ok_or_else(|| Error::Format("entity cache holds no tensor".into()))?;
    Ok(EntityRepCache::from_parts(reps.cast(), model.version()))
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated file: {e}"))
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(truncated)?;
    if &m != magic {
        return Err(Error::Format("unrecognized magic bytes".into()));
    }
    let v = read_u32(r)?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {v}")));
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}
