//! Checkpoint persistence. Binary layout: magic `FGTB`, u32 version, a
//! length-prefixed JSON blob (config echo, step counters, RNG state), then
//! a table of tensor records `{u32 name_len, name, u8 rank, u32 dims[rank],
//! little-endian f32 payload}`. Save -> load -> save is byte identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::{Adam, Moments};
use crate::pipeline::{Discriminators, Generator};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FGTB";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Clone, Debug)]
struct Meta {
    config: RunConfig,
    step: u64,
    adam_g_step: u64,
    adam_d_step: u64,
    rng_seed: u64,
    /// u128 word position of the ChaCha stream, as a decimal string.
    rng_word_pos: String,
}

/// Everything training needs to continue from a point in the trajectory.
pub struct TrainState {
    pub config: RunConfig,
    pub generator: Generator<f32>,
    pub discs: Discriminators<f32>,
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl TrainState {
    /// Fresh state: parameters drawn from the seed's init stream.
    pub fn new(config: RunConfig) -> Result<TrainState> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = config.net();
        let mut generator = Generator::new(&net, &mut rng);
        generator.warp_skips = config.warp_skips;
        let discs = Discriminators::new(&net, &mut rng);
        let adam_g = Adam::new(config.optimizer);
        let adam_d = Adam::new(config.optimizer);
        Ok(TrainState {
            config,
            generator,
            discs,
            adam_g,
            adam_d,
            rng,
            step: 0,
        })
    }

    fn collect_records(&mut self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut records = Vec::new();
        let mut names = Vec::new();
        {
            let push = &mut |p: &mut crate::nn::Parameter<f32>| {
                names.push(p.name.clone());
                records.push((p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
            };
            self.generator.visit_params(push);
            self.discs.visit_params(push);
        }
        for name in &names {
            let moments = self
                .adam_g
                .moments
                .get(name)
                .or_else(|| self.adam_d.moments.get(name));
            if let Some(m) = moments {
                records.push((format!("adam.m/{name}"), m.m.shape().to_vec(), m.m.data().to_vec()));
                records.push((format!("adam.v/{name}"), m.v.shape().to_vec(), m.v.data().to_vec()));
            }
        }
        records
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let meta = Meta {
            config: self.config.clone(),
            step: self.step,
            adam_g_step: self.adam_g.step,
            adam_d_step: self.adam_d.step,
            rng_seed: self.config.seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, shape, data) in self.collect_records() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for d in &shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&out)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainState> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("truncated checkpoint".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("bad magic, not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let json_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta: Meta = serde_json::from_slice(take(&mut pos, json_len)?)?;

        let mut table: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        while pos < bytes.len() {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("record name is not utf-8".into()))?;
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut pos, n * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if table.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate record {name}")));
            }
        }

        let mut state = TrainState::new(meta.config.clone())?;
        state.step = meta.step;
        state.adam_g.step = meta.adam_g_step;
        state.adam_d.step = meta.adam_d_step;
        let word_pos: u128 = meta
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Format("bad rng word position".into()))?;
        state.rng = ChaCha8Rng::seed_from_u64(meta.rng_seed);
        state.rng.set_word_pos(word_pos);

        // restore parameters
        let mut missing: Vec<String> = Vec::new();
        let mut gen_names: Vec<String> = Vec::new();
        {
            let restore = &mut |p: &mut crate::nn::Parameter<f32>| {
                gen_names.push(p.name.clone());
                match table.get(&p.name) {
                    Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
                    Some(_) | None => missing.push(p.name.clone()),
                }
            };
            state.generator.visit_params(restore);
        }
        let gen_set: std::collections::BTreeSet<String> = gen_names.into_iter().collect();
        {
            let restore = &mut |p: &mut crate::nn::Parameter<f32>| {
                match table.get(&p.name) {
                    Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
                    Some(_) | None => missing.push(p.name.clone()),
                }
            };
            state.discs.visit_params(restore);
        }
        if !missing.is_empty() {
            return Err(Error::Format(format!(
                "checkpoint is missing or mismatches parameters: {missing:?}"
            )));
        }

        // restore optimizer moments, routed to the optimizer owning the name
        for (name, t) in &table {
            if let Some(param) = name.strip_prefix("adam.m/") {
                let v_name = format!("adam.v/{param}");
                let v = table
                    .get(&v_name)
                    .ok_or_else(|| Error::Format(format!("missing {v_name}")))?;
                let target = if gen_set.contains(param) {
                    &mut state.adam_g
                } else {
                    &mut state.adam_d
                };
                target.moments.insert(
                    param.to_string(),
                    Moments {
                        m: t.clone(),
                        v: v.clone(),
                    },
                );
            }
        }
        Ok(state)
    }
}
