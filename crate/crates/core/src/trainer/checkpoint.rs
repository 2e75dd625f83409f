//! Single-file binary checkpoint: magic `IRL1`, a length-prefixed JSON meta
//! block, then every tensor as name/rows/cols plus f32 LE payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::encoders::{ParameterSet, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::momentum::TeacherState;

use super::adam::OptimizerState;
use super::TrainConfig;

const CHECKPOINT_MAGIC: &[u8; 4] = b"IRL1";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    best_validation_metric: f64,
    adam_step: u64,
    teacher_beta: f64,
    config: TrainConfig,
}

/// Best-epoch training state. Tensors are stored (and held here) at f32
/// precision so save -> load -> save is byte-identical.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub teacher: TeacherState,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub best_validation_metric: f64,
    pub config: TrainConfig,
}

impl Checkpoint {
    /// Quantize live training state into a checkpoint.
    pub fn from_state(
        params: &ParameterSet,
        teacher: &TeacherState,
        optimizer: &OptimizerState,
        epoch: usize,
        best_validation_metric: f64,
        config: &TrainConfig,
    ) -> Checkpoint {
        Checkpoint {
            params: params.quantized(),
            teacher: TeacherState { shadow: teacher.shadow.quantized(), beta: teacher.beta },
            optimizer: OptimizerState {
                first_moment: optimizer.first_moment.quantized(),
                second_moment: optimizer.second_moment.quantized(),
                step: optimizer.step,
            },
            epoch,
            best_validation_metric,
            config: config.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            epoch: self.epoch,
            best_validation_metric: self.best_validation_metric,
            adam_step: self.optimizer.step,
            teacher_beta: self.teacher.beta,
            config: self.config.clone(),
        };
        let meta_bytes =
            serde_json::to_vec(&meta).map_err(|e| Error::Data(format!("checkpoint meta: {e}")))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta_bytes);
        for (prefix, set) in [
            ("param", &self.params),
            ("teacher", &self.teacher.shadow),
            ("adam_m", &self.optimizer.first_moment),
            ("adam_v", &self.optimizer.second_moment),
        ] {
            for (name, tensor) in set.tensors() {
                write_tensor(&mut buf, &format!("{prefix}.{name}"), tensor);
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() < 8 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::Data(format!("{}: not an IRL1 checkpoint", path.display())));
        }
        let meta_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + meta_len {
            return Err(Error::Data(format!("{}: truncated checkpoint meta", path.display())));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[8..8 + meta_len])
            .map_err(|e| Error::Data(format!("{}: bad checkpoint meta: {e}", path.display())))?;

        let mut cursor = 8 + meta_len;
        let mut read_set = |prefix: &str| -> Result<ParameterSet> {
            let mut tensors = Vec::new();
            for name in TENSOR_NAMES {
                let (tensor_name, mat, next) = read_tensor(&bytes, cursor, path)?;
                let expected = format!("{prefix}.{name}");
                if tensor_name != expected {
                    return Err(Error::Data(format!(
                        "{}: expected tensor {expected}, found {tensor_name}",
                        path.display()
                    )));
                }
                tensors.push(mat);
                cursor = next;
            }
            let mut it = tensors.into_iter();
            Ok(ParameterSet {
                user_emb: it.next().unwrap(),
                item_emb: it.next().unwrap(),
                user_prototypes: it.next().unwrap(),
                item_prototypes: it.next().unwrap(),
                text_w1: it.next().unwrap(),
                text_b1: it.next().unwrap(),
                text_w2: it.next().unwrap(),
                text_b2: it.next().unwrap(),
            })
        };
        let params = read_set("param")?;
        let shadow = read_set("teacher")?;
        let first_moment = read_set("adam_m")?;
        let second_moment = read_set("adam_v")?;
        if cursor != bytes.len() {
            return Err(Error::Data(format!("{}: trailing bytes in checkpoint", path.display())));
        }
        Ok(Checkpoint {
            params,
            teacher: TeacherState { shadow, beta: meta.teacher_beta },
            optimizer: OptimizerState { first_moment, second_moment, step: meta.adam_step },
            epoch: meta.epoch,
            best_validation_metric: meta.best_validation_metric,
            config: meta.config,
        })
    }
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, tensor: &Mat) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
    for &v in tensor.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_tensor(bytes: &[u8], mut cursor: usize, path: &Path) -> Result<(String, Mat, usize)> {
    let fail = || Error::Data(format!("{}: truncated tensor block", path.display()));
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(fail());
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    let name_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
        .map_err(|_| Error::Data(format!("{}: tensor name is not UTF-8", path.display())))?;
    let rows = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let payload = take(&mut cursor, rows * cols * 4)?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((name, Mat::from_vec(rows, cols, data), cursor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = stream_rng(5, Stream::Init);
        let mut params = ParameterSet::zeros(3, 4, 4, 2, 5, 4);
        for (_, t) in params.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let teacher = crate::momentum::init_teacher(&params, 0.999);
        let mut optimizer = OptimizerState::new(&params);
        optimizer.step = 17;
        optimizer.first_moment.user_emb.set(0, 0, 0.125);
        Checkpoint::from_state(&params, &teacher, &optimizer, 9, 0.4375, &TrainConfig::default())
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ckpt = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.irl");
        let p2 = dir.path().join("b.irl");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.epoch, 9);
        assert_eq!(loaded.optimizer.step, 17);
        assert!((loaded.best_validation_metric - 0.4375).abs() < 1e-12);
        assert_eq!(loaded.params, ckpt.params);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let ckpt = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.irl");
        ckpt.save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(Checkpoint::load(&p).is_err());

        bytes[0] = b'I';
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
