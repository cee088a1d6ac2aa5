//! Dataset directories: `config.json`, per-view chunk files in the tensor
//! wire format, and `manifest.json` listing the chunks.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{render, step_world, Result, WorldConfig, WorldError, WorldState};
use crate::tensor::{read_tensor, write_tensor, Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub index: usize,
    pub start_t: usize,
    pub len: usize,
    /// view id → file name
    pub files: BTreeMap<usize, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub steps: usize,
    pub chunk_len: usize,
    pub chunks: Vec<ChunkEntry>,
}

/// Steps the world `steps` times and writes one frame per view per step,
/// chunked into tensors of shape `[len, H, W]`.
pub fn generate_dataset(cfg: &WorldConfig, steps: usize, chunk_len: usize, dir: &Path) -> Result<()> {
    if chunk_len == 0 {
        return Err(WorldError::BadConfig("chunk_len must be ≥ 1".into()));
    }
    fs::create_dir_all(dir)?;
    let config_json = serde_json::to_string_pretty(cfg)
        .map_err(|e| WorldError::Dataset(format!("config encode: {e}")))?;
    fs::write(dir.join("config.json"), config_json)?;

    let (mut state, mut rng) = WorldState::from_config(cfg)?;
    let mut manifest = Manifest { steps, chunk_len, chunks: Vec::new() };
    let mut start_t = 0;
    let mut chunk_index = 0;
    let mut buffers: BTreeMap<usize, Vec<Scalar>> =
        cfg.views.iter().map(|v| (v.id, Vec::new())).collect();
    let mut buffered = 0usize;

    let flush = |buffers: &mut BTreeMap<usize, Vec<Scalar>>,
                     buffered: usize,
                     start_t: usize,
                     chunk_index: usize,
                     manifest: &mut Manifest|
     -> Result<()> {
        let mut files = BTreeMap::new();
        for view in &cfg.views {
            let (w, h) = view.size;
            let name = format!("view{}_chunk{}.bin", view.id, chunk_index);
            let tensor = Tensor::new(
                vec![buffered, h, w],
                std::mem::take(buffers.get_mut(&view.id).unwrap()),
            )?;
            let mut out = BufWriter::new(File::create(dir.join(&name))?);
            write_tensor(&mut out, &format!("view{}/chunk{}", view.id, chunk_index), &tensor)?;
            files.insert(view.id, name);
        }
        manifest.chunks.push(ChunkEntry { index: chunk_index, start_t, len: buffered, files });
        Ok(())
    };

    for step in 0..steps {
        for view in &cfg.views {
            let frame = render(&state, view);
            buffers.get_mut(&view.id).unwrap().extend_from_slice(frame.grid.data());
        }
        buffered += 1;
        if buffered == chunk_len || step + 1 == steps {
            flush(&mut buffers, buffered, start_t, chunk_index, &mut manifest)?;
            start_t += buffered;
            chunk_index += 1;
            buffered = 0;
        }
        step_world(&mut state, &mut rng)?;
    }
    if steps == 0 {
        // Still write an empty manifest so the directory is well-formed.
    }
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| WorldError::Dataset(format!("manifest encode: {e}")))?;
    fs::write(dir.join("manifest.json"), manifest_json)?;
    Ok(())
}

/// A fully loaded dataset: per-view frame sequences plus the config that
/// produced them. Desk-scale datasets fit in memory comfortably.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: WorldConfig,
    pub steps: usize,
    frames: BTreeMap<usize, Vec<Tensor>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let config: WorldConfig =
            serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)
                .map_err(|e| WorldError::Dataset(format!("config decode: {e}")))?;
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
                .map_err(|e| WorldError::Dataset(format!("manifest decode: {e}")))?;
        let mut frames: BTreeMap<usize, Vec<Tensor>> =
            config.views.iter().map(|v| (v.id, Vec::new())).collect();
        for chunk in &manifest.chunks {
            for view in &config.views {
                let name = chunk.files.get(&view.id).ok_or_else(|| {
                    WorldError::Dataset(format!("chunk {} missing view {}", chunk.index, view.id))
                })?;
                let mut reader = BufReader::new(File::open(dir.join(name))?);
                let (_, tensor) = read_tensor(&mut reader)?
                    .ok_or_else(|| WorldError::Dataset(format!("{name} is empty")))?;
                let (w, h) = view.size;
                if tensor.shape() != [chunk.len, h, w] {
                    return Err(WorldError::Dataset(format!(
                        "{name}: expected shape [{},{h},{w}], got {:?}",
                        chunk.len,
                        tensor.shape()
                    )));
                }
                let per = h * w;
                let store = frames.get_mut(&view.id).unwrap();
                for i in 0..chunk.len {
                    store.push(Tensor::new(
                        vec![h, w],
                        tensor.data()[i * per..(i + 1) * per].to_vec(),
                    )?);
                }
            }
        }
        let steps = manifest.steps;
        for (id, seq) in &frames {
            if seq.len() != steps {
                return Err(WorldError::Dataset(format!(
                    "view {id}: {} frames loaded, manifest says {steps}",
                    seq.len()
                )));
            }
        }
        Ok(Dataset { config, steps, frames })
    }

    /// Renders the whole dataset in memory without touching disk.
    pub fn generate_in_memory(cfg: &WorldConfig, steps: usize) -> Result<Self> {
        let (mut state, mut rng) = WorldState::from_config(cfg)?;
        let mut frames: BTreeMap<usize, Vec<Tensor>> =
            cfg.views.iter().map(|v| (v.id, Vec::new())).collect();
        for _ in 0..steps {
            for view in &cfg.views {
                frames.get_mut(&view.id).unwrap().push(render(&state, view).grid);
            }
            step_world(&mut state, &mut rng)?;
        }
        Ok(Dataset { config: cfg.clone(), steps, frames })
    }

    pub fn frame(&self, view: usize, t: usize) -> &Tensor {
        &self.frames[&view][t]
    }

    pub fn view_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.frames.keys().copied()
    }

    /// Restriction to the step range `[from, to)`, re-indexed from zero.
    pub fn slice(&self, from: usize, to: usize) -> Dataset {
        let frames = self
            .frames
            .iter()
            .map(|(&id, seq)| (id, seq[from..to].to_vec()))
            .collect();
        Dataset { config: self.config.clone(), steps: to - from, frames }
    }
}
