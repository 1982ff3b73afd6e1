//! Checkpoint persistence. A checkpoint is a directory, not an opaque blob:
//!
//! ```text
//! ckpt/
//!   manifest.json    - configuration, vocab hash, array inventory
//!   vocab.json       - ordered token list
//!   embedding.bin    - table
//!   rounding.bin     - rounding-head parameters
//!   denoiser.bin     - denoiser parameters
//!   controller.bin   - controller parameters (present once trained)
//! ```
//!
//! Binary files hold the listed arrays back to back, each as
//! `rows: u64 LE, cols: u64 LE, rows*cols f64 LE`. Given a fixed seed the
//! whole directory is bitwise reproducible.

use crate::controller::{ControllerModel, LossAverages};
use crate::corpus::{Language, Vocab};
use crate::diffusion::{make_schedule, DenoiserConfig, DenoiserModel, NoiseSchedule, ScheduleKind};
use crate::embedding::{EmbeddingTable, RoundingHead};
use crate::sampler::Models;
use crate::{Error, Result, SeedRng};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainMeta {
    pub iterations: usize,
    pub seed: u64,
    pub semantic_loss_avg: f64,
    pub initial_avg: f64,
    pub final_avg: f64,
}

impl Default for TrainMeta {
    fn default() -> Self {
        TrainMeta {
            iterations: 0,
            seed: 0,
            semantic_loss_avg: 0.0,
            initial_avg: 0.0,
            final_avg: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControllerMeta {
    pub hidden: usize,
    pub r_size: u32,
    pub loss_avgs: LossAverages,
    pub arrays: Vec<ArrayMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub language: Language,
    pub schedule_kind: ScheduleKind,
    pub t_max: usize,
    pub dim: usize,
    pub vocab_size: u32,
    pub vocab_hash: String,
    pub denoiser: DenoiserConfig,
    pub rounding_hidden: usize,
    pub train: TrainMeta,
    pub embedding_arrays: Vec<ArrayMeta>,
    pub rounding_arrays: Vec<ArrayMeta>,
    pub denoiser_arrays: Vec<ArrayMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerMeta>,
}

/// Everything needed to sample: the trained pieces plus metadata.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub language: Language,
    pub vocab: Vocab,
    pub schedule: NoiseSchedule,
    pub table: EmbeddingTable,
    pub rounding: RoundingHead,
    pub rounding_hidden: usize,
    pub denoiser: DenoiserModel,
    pub controller: Option<ControllerModel>,
    pub train_meta: TrainMeta,
}

impl ModelBundle {
    pub fn models(&self) -> Models<'_> {
        Models {
            denoiser: &self.denoiser,
            table: &self.table,
            rounding: &self.rounding,
            schedule: &self.schedule,
            vocab: &self.vocab,
            controller: self.controller.as_ref(),
            semantic_loss_avg: if self.train_meta.semantic_loss_avg > 0.0 {
                Some(self.train_meta.semantic_loss_avg)
            } else {
                None
            },
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let embedding_named = named(&self.table.params(), &["table"]);
        let rounding_named = named(&self.rounding.params(), &mlp_names(""));
        let denoiser_names = denoiser_param_names(&self.denoiser.config);
        let denoiser_named = named_owned(&self.denoiser.params(), &denoiser_names);

        write_arrays(&dir.join("embedding.bin"), &embedding_named)?;
        write_arrays(&dir.join("rounding.bin"), &rounding_named)?;
        write_arrays(&dir.join("denoiser.bin"), &denoiser_named)?;

        let controller_meta = match &self.controller {
            Some(c) => Some(self.save_controller_arrays(dir, c)?),
            None => None,
        };

        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            language: self.language,
            schedule_kind: self.schedule.kind,
            t_max: self.schedule.t_max,
            dim: self.table.dim(),
            vocab_size: self.vocab.len(),
            vocab_hash: self.vocab.hash(),
            denoiser: self.denoiser.config,
            rounding_hidden: self.rounding_hidden,
            train: self.train_meta.clone(),
            embedding_arrays: metas(&embedding_named),
            rounding_arrays: metas(&rounding_named),
            denoiser_arrays: metas(&denoiser_named),
            controller: controller_meta,
        };
        let mut f = std::fs::File::create(dir.join("manifest.json"))?;
        writeln!(f, "{}", serde_json::to_string_pretty(&manifest)?)?;

        let mut vf = std::fs::File::create(dir.join("vocab.json"))?;
        writeln!(vf, "{}", serde_json::to_string(&self.vocab.tokens())?)?;
        Ok(())
    }

    fn save_controller_arrays(&self, dir: &Path, c: &ControllerModel) -> Result<ControllerMeta> {
        let names = controller_param_names(c);
        let named = named_owned(&c.params(), &names);
        write_arrays(&dir.join("controller.bin"), &named)?;
        Ok(ControllerMeta {
            hidden: c.format_head.hidden.w.ncols(),
            r_size: c.r_size,
            loss_avgs: c.loss_avgs,
            arrays: metas(&named),
        })
    }

    /// Attach (or replace) the controller entry of an existing checkpoint.
    pub fn save_controller(&mut self, dir: &Path, controller: ControllerModel) -> Result<()> {
        self.controller = Some(controller);
        self.save(dir)
    }

    pub fn load(dir: &Path) -> Result<ModelBundle> {
        let manifest_path = dir.join("manifest.json");
        let data = std::fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest = serde_json::from_str(&data)
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let vocab_tokens: Vec<String> =
            serde_json::from_str(&std::fs::read_to_string(dir.join("vocab.json"))?)
                .map_err(|e| Error::Checkpoint(format!("bad vocab.json: {e}")))?;
        let vocab = Vocab::from_tokens(&vocab_tokens)?;
        if vocab.hash() != manifest.vocab_hash {
            return Err(Error::Checkpoint(
                "vocab.json does not match the manifest hash".into(),
            ));
        }
        let schedule = make_schedule(manifest.t_max, manifest.schedule_kind)?;

        use rand::SeedableRng;
        let mut init_rng = SeedRng::seed_from_u64(0);
        let mut table = EmbeddingTable::new(&mut init_rng, vocab.len() as usize, manifest.dim);
        load_into(
            &dir.join("embedding.bin"),
            &manifest.embedding_arrays,
            &mut table.params_mut(),
        )?;
        let mut rounding = RoundingHead::new(
            &mut init_rng,
            manifest.dim,
            manifest.rounding_hidden,
            vocab.len() as usize,
        );
        load_into(
            &dir.join("rounding.bin"),
            &manifest.rounding_arrays,
            &mut rounding.params_mut(),
        )?;
        let mut denoiser = DenoiserModel::new(&mut init_rng, manifest.denoiser);
        load_into(
            &dir.join("denoiser.bin"),
            &manifest.denoiser_arrays,
            &mut denoiser.params_mut(),
        )?;
        let controller = match &manifest.controller {
            Some(meta) => {
                let mut c = ControllerModel::new(
                    &mut init_rng,
                    manifest.language,
                    manifest.dim,
                    meta.hidden,
                    meta.r_size,
                );
                c.loss_avgs = meta.loss_avgs;
                load_into(
                    &dir.join("controller.bin"),
                    &meta.arrays,
                    &mut c.params_mut(),
                )?;
                Some(c)
            }
            None => None,
        };
        Ok(ModelBundle {
            language: manifest.language,
            vocab,
            schedule,
            table,
            rounding,
            rounding_hidden: manifest.rounding_hidden,
            denoiser,
            controller,
            train_meta: manifest.train,
        })
    }
}

fn named<'a>(params: &[&'a Array2<f64>], names: &[&str]) -> Vec<(String, &'a Array2<f64>)> {
    assert_eq!(params.len(), names.len());
    names
        .iter()
        .zip(params.iter())
        .map(|(n, p)| (n.to_string(), *p))
        .collect()
}

fn named_owned<'a>(
    params: &[&'a Array2<f64>],
    names: &[String],
) -> Vec<(String, &'a Array2<f64>)> {
    assert_eq!(params.len(), names.len(), "param/name count mismatch");
    names
        .iter()
        .zip(params.iter())
        .map(|(n, p)| (n.clone(), *p))
        .collect()
}

fn metas(named: &[(String, &Array2<f64>)]) -> Vec<ArrayMeta> {
    named
        .iter()
        .map(|(n, a)| ArrayMeta {
            name: n.clone(),
            rows: a.nrows(),
            cols: a.ncols(),
        })
        .collect()
}

fn mlp_names(prefix: &str) -> Vec<&'static str> {
    let _ = prefix;
    vec!["hidden.w", "hidden.b", "out.w", "out.b"]
}

fn denoiser_param_names(cfg: &DenoiserConfig) -> Vec<String> {
    let mut names = vec!["w_in.w".to_string(), "w_in.b".to_string()];
    for i in 0..cfg.blocks {
        for part in [
            "ln1_g", "ln1_b", "wq.w", "wq.b", "wk.w", "wk.b", "wv.w", "wv.b", "wo.w", "wo.b",
            "ln2_g", "ln2_b", "ff1.w", "ff1.b", "ff2.w", "ff2.b",
        ] {
            names.push(format!("block{i}.{part}"));
        }
    }
    names.push("ln_f_g".into());
    names.push("ln_f_b".into());
    names.push("w_out.w".into());
    names.push("w_out.b".into());
    names
}

fn controller_param_names(c: &ControllerModel) -> Vec<String> {
    let mut names: Vec<String> = ["hidden.w", "hidden.b", "out.w", "out.b"]
        .iter()
        .map(|s| format!("format.{s}"))
        .collect();
    names.extend(
        ["hidden.w", "hidden.b", "out.w", "out.b"]
            .iter()
            .map(|s| format!("rhyme.{s}")),
    );
    if c.tone_head.is_some() {
        names.extend(
            ["hidden.w", "hidden.b", "out.w", "out.b"]
                .iter()
                .map(|s| format!("tone.{s}")),
        );
    }
    names
}

fn write_arrays(path: &Path, arrays: &[(String, &Array2<f64>)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (_, a) in arrays {
        f.write_all(&(a.nrows() as u64).to_le_bytes())?;
        f.write_all(&(a.ncols() as u64).to_le_bytes())?;
        for &v in a.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn load_into(path: &Path, metas: &[ArrayMeta], params: &mut [&mut Array2<f64>]) -> Result<()> {
    if metas.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{} lists {} arrays, model expects {}",
            path.display(),
            metas.len(),
            params.len()
        )));
    }
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?);
    for (meta, param) in metas.iter().zip(params.iter_mut()) {
        let mut dims = [0u8; 16];
        f.read_exact(&mut dims)?;
        let rows = u64::from_le_bytes(dims[..8].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(dims[8..].try_into().unwrap()) as usize;
        if (rows, cols) != (meta.rows, meta.cols) || (rows, cols) != param.dim() {
            return Err(Error::Checkpoint(format!(
                "array {} has shape {rows}x{cols}, expected {}x{} ({}x{} in model)",
                meta.name,
                meta.rows,
                meta.cols,
                param.dim().0,
                param.dim().1
            )));
        }
        let mut buf = vec![0u8; rows * cols * 8];
        f.read_exact(&mut buf)?;
        for (i, chunk) in buf.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "non-finite value in array {}",
                    meta.name
                )));
            }
            param[(i / cols, i % cols)] = v;
        }
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} has {} trailing bytes",
            path.display(),
            rest.len()
        )));
    }
    Ok(())
}

/// Digest of every file in a checkpoint directory; used by determinism tests.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut hasher = Sha256::new();
    for path in entries {
        hasher.update(path.file_name().unwrap().to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update(std::fs::read(&path)?);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_bundle(seed: u64, with_controller: bool) -> ModelBundle {
        let mut rng = SeedRng::seed_from_u64(seed);
        let mut vocab = Vocab::new();
        for i in 0..8 {
            vocab.intern(&format!("w{i}"));
        }
        let dcfg = DenoiserConfig {
            dim: 4,
            hidden: 8,
            blocks: 1,
            ffn: 16,
        };
        let controller = with_controller.then(|| {
            ControllerModel::new(&mut rng, Language::Sonnet, 4, 6, 5)
        });
        ModelBundle {
            language: Language::Sonnet,
            vocab: vocab.clone(),
            schedule: make_schedule(10, ScheduleKind::Sqrt).unwrap(),
            table: EmbeddingTable::new(&mut rng, vocab.len() as usize, 4),
            rounding: RoundingHead::new(&mut rng, 4, 6, vocab.len() as usize),
            rounding_hidden: 6,
            denoiser: DenoiserModel::new(&mut rng, dcfg),
            controller,
            train_meta: TrainMeta {
                iterations: 3,
                seed,
                semantic_loss_avg: 1.5,
                initial_avg: 2.0,
                final_avg: 1.0,
            },
        }
    }

    #[test]
    fn save_load_round_trips_all_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle(3, true);
        bundle.save(dir.path()).unwrap();
        let loaded = ModelBundle::load(dir.path()).unwrap();
        assert_eq!(bundle.vocab.hash(), loaded.vocab.hash());
        for (a, b) in bundle
            .denoiser
            .params()
            .iter()
            .zip(loaded.denoiser.params())
        {
            assert_eq!(*a, b);
        }
        assert_eq!(bundle.table.matrix, loaded.table.matrix);
        let (ca, cb) = (
            bundle.controller.as_ref().unwrap(),
            loaded.controller.as_ref().unwrap(),
        );
        for (a, b) in ca.params().iter().zip(cb.params()) {
            assert_eq!(*a, b);
        }
        assert_eq!(loaded.train_meta.semantic_loss_avg, 1.5);
    }

    #[test]
    fn identical_bundles_produce_identical_digests() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        tiny_bundle(7, false).save(d1.path()).unwrap();
        tiny_bundle(7, false).save(d2.path()).unwrap();
        assert_eq!(
            checkpoint_digest(d1.path()).unwrap(),
            checkpoint_digest(d2.path()).unwrap()
        );
        let d3 = tempfile::tempdir().unwrap();
        tiny_bundle(8, false).save(d3.path()).unwrap();
        assert_ne!(
            checkpoint_digest(d1.path()).unwrap(),
            checkpoint_digest(d3.path()).unwrap()
        );
    }

    #[test]
    fn manifest_lists_inspectable_entries() {
        let dir = tempfile::tempdir().unwrap();
        tiny_bundle(3, true).save(dir.path()).unwrap();
        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert!(manifest.denoiser_arrays.iter().any(|a| a.name == "w_in.w"));
        assert!(manifest
            .controller
            .as_ref()
            .unwrap()
            .arrays
            .iter()
            .any(|a| a.name == "rhyme.out.w"));
        assert_eq!(manifest.embedding_arrays[0].name, "table");
    }

    #[test]
    fn corrupt_shapes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_bundle(3, false).save(dir.path()).unwrap();
        // truncate the denoiser file
        let path = dir.path().join("denoiser.bin");
        let data = std::fs::read(&path).unwrap();
        std::fs::write(&path, &data[..data.len() / 2]).unwrap();
        assert!(ModelBundle::load(dir.path()).is_err());
    }
}
