use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::NdArray;

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-init_scale, init_scale)`.
    Uniform,
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`, for the relu conv stack.
    FanIn(usize),
    Zero,
}

/// Name, shape and initializer of every learnable array, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>, Init)>> {
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));

    let mut channels = crate::features::WINDOW_FRAMES;
    for (i, l) in cfg.conv.iter().enumerate() {
        let fan_in = channels * l.kernel * l.kernel;
        add(format!("watch.conv{i}.w"), vec![l.filters, channels, l.kernel, l.kernel], Init::FanIn(fan_in));
        add(format!("watch.conv{i}.b"), vec![l.filters], Init::Zero);
        channels = l.filters;
    }
    let flat = cfg.conv_flat_dim()?;
    add("watch.fc.w".into(), vec![flat, cfg.visual_dim], Init::FanIn(flat));
    add("watch.fc.b".into(), vec![1, cfg.visual_dim], Init::Zero);

    let mut lstm = |prefix: &str, layers: usize, input: usize, hidden: usize| {
        for l in 0..layers {
            let inp = if l == 0 { input } else { hidden };
            add(format!("{prefix}.lstm{l}.wx"), vec![inp, 4 * hidden], Init::Uniform);
            add(format!("{prefix}.lstm{l}.wh"), vec![hidden, 4 * hidden], Init::Uniform);
            add(format!("{prefix}.lstm{l}.b"), vec![1, 4 * hidden], Init::Zero);
            if cfg.peephole {
                add(format!("{prefix}.lstm{l}.peep"), vec![1, 3 * hidden], Init::Uniform);
            }
        }
    };
    lstm("watch", cfg.watch_layers, cfg.visual_dim, cfg.watch_hidden);
    lstm("listen", cfg.listen_layers, cfg.audio_dim(), cfg.listen_hidden);
    lstm("spell", cfg.spell_layers, cfg.spell_input_dim(), cfg.spell_hidden());

    add("spell.embed".into(), vec![cfg.vocab_size, cfg.embed_dim], Init::Uniform);
    for (name, enc) in [("video", cfg.watch_hidden), ("audio", cfg.listen_hidden)] {
        add(format!("attend.{name}.w_dec"), vec![cfg.spell_hidden(), cfg.attention_dim], Init::Uniform);
        add(format!("attend.{name}.v_enc"), vec![enc, cfg.attention_dim], Init::Uniform);
        add(format!("attend.{name}.w"), vec![cfg.attention_dim, 1], Init::Uniform);
        add(format!("attend.{name}.b"), vec![1, cfg.attention_dim], Init::Zero);
    }
    let mlp_in = cfg.spell_hidden() + cfg.watch_hidden + cfg.listen_hidden;
    add("output.w1".into(), vec![mlp_in, cfg.mlp_hidden], Init::Uniform);
    add("output.b1".into(), vec![1, cfg.mlp_hidden], Init::Zero);
    add("output.w2".into(), vec![cfg.mlp_hidden, cfg.vocab_size], Init::Uniform);
    add("output.b2".into(), vec![1, cfg.vocab_size], Init::Zero);
    Ok(specs)
}

/// All learnable arrays by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, NdArray>,
}

impl ParamStore {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.init_scale;
        let mut params = BTreeMap::new();
        for (name, shape, init) in param_specs(cfg)? {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform => (0..n).map(|_| rng.gen_range(-s..=s)).collect(),
                Init::FanIn(fan_in) => {
                    let b = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-b..=b)).collect()
                }
                Init::Zero => vec![0.0; n],
            };
            params.insert(name, NdArray::new(shape, data)?);
        }
        Ok(ParamStore { params })
    }

    pub fn from_map(params: BTreeMap<String, NdArray>) -> Self {
        ParamStore { params }
    }

    /// Checks that names and shapes match what `cfg` requires.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg)?;
        if specs.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter arrays, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for (name, shape, _) in specs {
            match self.params.get(&name) {
                Some(p) if p.shape() == shape.as_slice() => {}
                Some(p) => {
                    return Err(Error::shape(format!("param '{name}'"), format!("expected {shape:?}, found {:?}", p.shape())))
                }
                None => return Err(Error::Config(format!("missing parameter '{name}'"))),
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&NdArray> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdArray> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, value: NdArray) {
        self.params.insert(name.to_string(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NdArray)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut NdArray)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(NdArray::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_respects_scale_and_zero_biases() {
        let cfg = ModelConfig::tiny(46, 16, 16);
        let p = ParamStore::init(&cfg, 1).unwrap();
        p.check_against(&cfg).unwrap();
        for (name, _, init) in param_specs(&cfg).unwrap() {
            let v = p.get(&name).unwrap().data();
            match init {
                Init::Zero => assert!(v.iter().all(|&x| x == 0.0), "{name}"),
                Init::Uniform => assert!(v.iter().all(|x| x.abs() <= 0.08), "{name}"),
                Init::FanIn(n) => {
                    let bound = (6.0 / n as f64).sqrt();
                    assert!(v.iter().all(|x| x.abs() <= bound), "{name}");
                    assert!(v.iter().any(|x| x.abs() > 0.08), "{name}");
                }
            }
        }
        assert!(matches!(param_specs(&cfg).unwrap()[0].2, Init::FanIn(45)));
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::micro(6);
        assert_eq!(ParamStore::init(&cfg, 4).unwrap(), ParamStore::init(&cfg, 4).unwrap());
        assert_ne!(ParamStore::init(&cfg, 4).unwrap(), ParamStore::init(&cfg, 5).unwrap());
    }
}
