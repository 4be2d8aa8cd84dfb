//! Checkpoint container: a JSON header (format version, config, network
//! specs, per-sequence part metadata, named-tensor directory, Adam step
//! counters) followed by a little-endian f64 payload. Round trips are
//! bit-exact.

use super::adam::AdamState;
use super::{OptimError, RunConfig};
use crate::fields::{FieldSpecs, FieldWeights};
use crate::geometry::LocalFrame;
use crate::math::Mat3;
use crate::parts::{LocalPart, PartAnchor, PartSet};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"L4DCHKPT";
pub const FORMAT_VERSION: u32 = 1;

/// A part set plus the optimizer state of its code tensors.
#[derive(Clone, Debug)]
pub struct StoredSequence {
    pub name: String,
    pub parts: PartSet,
    pub adam_m: AdamState,
    pub adam_s: AdamState,
    pub adam_t: AdamState,
}

impl StoredSequence {
    pub fn new(name: String, parts: PartSet) -> StoredSequence {
        let n = parts.code_m.len();
        StoredSequence {
            name,
            parts,
            adam_m: AdamState::new(n),
            adam_s: AdamState::new(n),
            adam_t: AdamState::new(n),
        }
    }
}

/// Full optimization state: weights, their Adam moments, and the tracked
/// part sets (with codes) of every sequence seen so far.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub specs: FieldSpecs,
    pub weights: FieldWeights,
    pub adam_motion: AdamState,
    pub adam_shape: AdamState,
    pub adam_texture: AdamState,
    pub sequences: Vec<StoredSequence>,
    pub step: u64,
}

impl Checkpoint {
    pub fn sequence(&self, name: &str) -> Option<&StoredSequence> {
        self.sequences.iter().find(|s| s.name == name)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct SeqHeader {
    name: String,
    radius: f64,
    code_dim: usize,
    k: usize,
    times: Vec<f64>,
    anchors: Vec<PartAnchor>,
    adam_steps: [u64; 3],
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    specs: FieldSpecs,
    step: u64,
    adam_steps: [u64; 3],
    sequences: Vec<SeqHeader>,
    tensors: Vec<TensorEntry>,
}

struct TensorWriter {
    dir: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl TensorWriter {
    fn new() -> TensorWriter {
        TensorWriter {
            dir: Vec::new(),
            data: Vec::new(),
        }
    }

    fn push(&mut self, name: String, values: &[f64]) {
        self.dir.push(TensorEntry {
            name,
            offset: self.data.len(),
            len: values.len(),
        });
        self.data.extend_from_slice(values);
    }
}

struct TensorReader {
    map: std::collections::HashMap<String, (usize, usize)>,
    data: Vec<f64>,
}

impl TensorReader {
    fn get(&self, name: &str) -> Result<Vec<f64>, OptimError> {
        let &(off, len) = self
            .map
            .get(name)
            .ok_or_else(|| OptimError::Checkpoint(format!("missing tensor {name}")))?;
        Ok(self.data[off..off + len].to_vec())
    }
}

fn frames_to_flat(parts: &[LocalPart]) -> Vec<f64> {
    let mut out = Vec::new();
    for p in parts {
        for f in &p.frames {
            for row in &f.rotation.m {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&f.center);
        }
    }
    out
}

fn frames_from_flat(flat: &[f64], k: usize, l: usize) -> Result<Vec<Vec<Vec<f64>>>, OptimError> {
    if flat.len() != k * l * 12 {
        return Err(OptimError::Checkpoint("frame tensor size mismatch".into()));
    }
    Ok(flat
        .chunks_exact(l * 12)
        .map(|part| part.chunks_exact(12).map(|f| f.to_vec()).collect())
        .collect())
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), OptimError> {
    let mut tw = TensorWriter::new();
    tw.push("weights.motion".into(), &ck.weights.motion);
    tw.push("weights.shape".into(), &ck.weights.shape);
    tw.push("weights.texture".into(), &ck.weights.texture);
    for (name, st) in [
        ("motion", &ck.adam_motion),
        ("shape", &ck.adam_shape),
        ("texture", &ck.adam_texture),
    ] {
        tw.push(format!("adam.{name}.m"), &st.m);
        tw.push(format!("adam.{name}.v"), &st.v);
    }
    let mut seq_headers = Vec::new();
    for (i, seq) in ck.sequences.iter().enumerate() {
        let p = &seq.parts;
        seq_headers.push(SeqHeader {
            name: seq.name.clone(),
            radius: p.radius,
            code_dim: p.code_dim,
            k: p.k(),
            times: p.times.clone(),
            anchors: p.parts.iter().map(|q| q.anchor).collect(),
            adam_steps: [seq.adam_m.step, seq.adam_s.step, seq.adam_t.step],
        });
        tw.push(format!("seq{i}.frames"), &frames_to_flat(&p.parts));
        tw.push(format!("seq{i}.code_m"), &p.code_m);
        tw.push(format!("seq{i}.code_s"), &p.code_s);
        tw.push(format!("seq{i}.code_t"), &p.code_t);
        for (tag, st) in [("m", &seq.adam_m), ("s", &seq.adam_s), ("t", &seq.adam_t)] {
            tw.push(format!("seq{i}.adam_{tag}.m"), &st.m);
            tw.push(format!("seq{i}.adam_{tag}.v"), &st.v);
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        config: ck.config.clone(),
        specs: ck.specs.clone(),
        step: ck.step,
        adam_steps: [ck.adam_motion.step, ck.adam_shape.step, ck.adam_texture.step],
        sequences: seq_headers,
        tensors: tw.dir,
    };
    let header_bytes = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for v in &tw.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, OptimError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(OptimError::Checkpoint("bad checkpoint magic".into()));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let hlen = u64::from_le_bytes(len8) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let header: Header =
        serde_json::from_slice(&hbytes).map_err(|e| OptimError::Checkpoint(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(OptimError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    let mut data = Vec::with_capacity(total);
    let mut buf = [0u8; 8];
    for _ in 0..total {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let reader = TensorReader {
        map: header
            .tensors
            .iter()
            .map(|t| (t.name.clone(), (t.offset, t.len)))
            .collect(),
        data,
    };
    let weights = FieldWeights {
        motion: reader.get("weights.motion")?,
        shape: reader.get("weights.shape")?,
        texture: reader.get("weights.texture")?,
    };
    let adam = |name: &str, step: u64| -> Result<AdamState, OptimError> {
        Ok(AdamState {
            m: reader.get(&format!("adam.{name}.m"))?,
            v: reader.get(&format!("adam.{name}.v"))?,
            step,
        })
    };
    let mut sequences = Vec::new();
    for (i, sh) in header.sequences.iter().enumerate() {
        let frames_flat = reader.get(&format!("seq{i}.frames"))?;
        let frames = frames_from_flat(&frames_flat, sh.k, sh.times.len())?;
        let parts_vec: Vec<LocalPart> = sh
            .anchors
            .iter()
            .zip(frames)
            .map(|(anchor, fr)| LocalPart {
                anchor: *anchor,
                frames: fr
                    .into_iter()
                    .map(|f| LocalFrame {
                        rotation: Mat3 {
                            m: [
                                [f[0], f[1], f[2]],
                                [f[3], f[4], f[5]],
                                [f[6], f[7], f[8]],
                            ],
                        },
                        center: [f[9], f[10], f[11]],
                    })
                    .collect(),
            })
            .collect();
        let parts = PartSet {
            radius: sh.radius,
            parts: parts_vec,
            times: sh.times.clone(),
            code_dim: sh.code_dim,
            code_m: reader.get(&format!("seq{i}.code_m"))?,
            code_s: reader.get(&format!("seq{i}.code_s"))?,
            code_t: reader.get(&format!("seq{i}.code_t"))?,
        };
        let code_adam = |tag: &str, step: u64| -> Result<AdamState, OptimError> {
            Ok(AdamState {
                m: reader.get(&format!("seq{i}.adam_{tag}.m"))?,
                v: reader.get(&format!("seq{i}.adam_{tag}.v"))?,
                step,
            })
        };
        sequences.push(StoredSequence {
            name: sh.name.clone(),
            parts,
            adam_m: code_adam("m", sh.adam_steps[0])?,
            adam_s: code_adam("s", sh.adam_steps[1])?,
            adam_t: code_adam("t", sh.adam_steps[2])?,
        });
    }
    Ok(Checkpoint {
        config: header.config,
        specs: header.specs,
        weights,
        adam_motion: adam("motion", header.adam_steps[0])?,
        adam_shape: adam("shape", header.adam_steps[1])?,
        adam_texture: adam("texture", header.adam_steps[2])?,
        sequences,
        step: header.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::FieldModel;
    use crate::geometry::TriMesh;
    use crate::parts::build_part_set;

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let config = RunConfig::desk();
        let specs = config.field_specs();
        let model = FieldModel::new(specs.clone(), 3);
        let sphere = TriMesh::uv_sphere([0.0; 3], 0.1, 10, 12);
        let seq = vec![sphere.clone(), sphere];
        let mut parts = build_part_set(&seq, &[0.0, 1.0], 0.05, config.code_dim, 5).unwrap();
        parts.init_codes(0.01, 9);
        let mut stored = StoredSequence::new("a".into(), parts);
        stored.adam_m.step = 7;
        stored.adam_m.m[3] = 0.25;
        let ck = Checkpoint {
            config,
            specs,
            adam_motion: AdamState::new(model.motion.n_params),
            adam_shape: AdamState::new(model.shape.n_params),
            adam_texture: AdamState::new(model.texture.n_params),
            weights: model.weights.clone(),
            sequences: vec![stored],
            step: 42,
        };
        let dir = std::env::temp_dir().join("local4d_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.l4d");
        write_checkpoint(&ck, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.weights, ck.weights);
        assert_eq!(back.adam_motion, ck.adam_motion);
        let (a, b) = (&back.sequences[0], &ck.sequences[0]);
        assert_eq!(a.parts.code_m, b.parts.code_m);
        assert_eq!(a.adam_m, b.adam_m);
        assert_eq!(a.parts.parts.len(), b.parts.parts.len());
        for (pa, pb) in a.parts.parts.iter().zip(&b.parts.parts) {
            assert_eq!(pa.anchor, pb.anchor);
            for (fa, fb) in pa.frames.iter().zip(&pb.frames) {
                assert_eq!(fa.rotation.m, fb.rotation.m);
                assert_eq!(fa.center, fb.center);
            }
        }
        // write the reloaded checkpoint again: files must be identical bytes
        let path2 = dir.join("t2.l4d");
        write_checkpoint(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
