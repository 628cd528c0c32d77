//! Subject classifier with feature taps, attention generator, checkpoints.

pub mod nn;

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use nn::{Conv2d, Grads, InstanceNorm, Layer, Linear, Mode, Network, Params, SelfAttention, Stage, Tape};

pub const NUM_CLASSES: usize = 2;
/// Number of classifier blocks whose outputs are exposed as features.
pub const NUM_TAPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: [usize; 3],
    pub hidden: usize,
    pub conv_dropout: f64,
    pub head_dropout: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            in_channels: 64,
            image_size: 64,
            widths: [16, 32, 64],
            hidden: 64,
            conv_dropout: 0.25,
            head_dropout: 0.5,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden == 0 || self.widths.contains(&0) {
            return Err(invalid!("classifier widths and channels must be positive"));
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(invalid!("classifier image size {} must be a positive multiple of 8", self.image_size));
        }
        for p in [self.conv_dropout, self.head_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(invalid!("dropout rate {p} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Output of one classifier pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub logits: [f64; NUM_CLASSES],
    pub probs: [f64; NUM_CLASSES],
    /// Outputs of blocks 1..=3.
    pub features: Vec<Array3<f64>>,
}

impl ForwardResult {
    fn from_outputs(mut outputs: Vec<Array3<f64>>) -> Self {
        let head = outputs.pop().expect("head stage");
        let logits = [head[[0, 0, 0]], head[[1, 0, 0]]];
        let mut probs = logits;
        nn::softmax_inplace(&mut probs);
        ForwardResult { logits, probs, features: outputs }
    }

    pub fn predicted(&self) -> u8 {
        u8::from(self.probs[1] > self.probs[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub net: Network,
}

impl Classifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Params::default();
        let seed = config.seed;
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            let name = format!("block{}", i + 1);
            stages.push(Stage {
                name: name.clone(),
                layers: vec![
                    Layer::Conv(Conv2d::new(&mut params, &format!("{name}.conv"), cin, w, 3, 1, 1, seed)),
                    Layer::Elu,
                    Layer::MaxPool2,
                    Layer::Dropout(config.conv_dropout),
                ],
            });
            cin = w;
        }
        let side = config.image_size / 8;
        let flat = cin * side * side;
        stages.push(Stage {
            name: "head".into(),
            layers: vec![
                Layer::Linear(Linear::new(&mut params, "head.fc1", flat, config.hidden, seed)),
                Layer::Elu,
                Layer::Dropout(config.head_dropout),
                Layer::Linear(Linear::new(&mut params, "head.fc2", config.hidden, NUM_CLASSES, seed)),
            ],
        });
        Ok(Classifier { config, net: Network { params, stages } })
    }

    pub fn param_count(&self) -> usize {
        self.net.params.count()
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let s = self.config.image_size;
        if x.dim() != (self.config.in_channels, s, s) {
            return Err(shape_err!("classifier expects {:?}, got {:?}", (self.config.in_channels, s, s), x.dim()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array3<f64>, mode: &mut Mode) -> Result<ForwardResult> {
        self.check_input(x)?;
        Ok(ForwardResult::from_outputs(self.net.forward(x, mode)))
    }

    pub fn forward_tape(&self, x: &Array3<f64>, mode: &mut Mode) -> Result<(ForwardResult, Tape)> {
        self.check_input(x)?;
        let tape = self.net.forward_tape(x, mode);
        Ok((ForwardResult::from_outputs(tape.outputs.clone()), tape))
    }

    /// Input gradient given gradients on the logits and on any feature tap.
    pub fn backward(
        &self,
        tape: &Tape,
        d_logits: Option<[f64; NUM_CLASSES]>,
        d_features: [Option<Array3<f64>>; NUM_TAPS],
        grads: Option<&mut Grads>,
    ) -> Result<Array3<f64>> {
        let mut stage_grads: Vec<Option<Array3<f64>>> = d_features.into_iter().collect();
        stage_grads.push(d_logits.map(|d| Array3::from_shape_vec((NUM_CLASSES, 1, 1), d.to_vec()).expect("logit shape")));
        self.net.backward(tape, &stage_grads, grads)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &Architecture::Classifier(self.config.clone()), &self.net.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        match load_checkpoint(dir)? {
            (Architecture::Classifier(cfg), params) => {
                let mut c = Classifier::new(cfg)?;
                install(&mut c.net.params, params)?;
                Ok(c)
            }
            _ => Err(Error::Store(format!("{} is not a classifier checkpoint", dir.display()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub image_size: usize,
    pub encoder_widths: [usize; 3],
    pub decoder_widths: [usize; 3],
    pub dropout: f64,
    /// Adds a self-attention module after every block.
    pub attention: bool,
    /// Adds the input to the output (`G(x) = x + f(x)`).
    pub residual: bool,
    /// Multiplier on the init bound of the final 1×1 conv.
    pub output_init_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            channels: 64,
            image_size: 64,
            encoder_widths: [32, 64, 128],
            decoder_widths: [64, 32, 32],
            dropout: 0.1,
            attention: true,
            residual: false,
            output_init_scale: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(invalid!("generator widths and channels must be positive"));
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(invalid!("generator image size {} must be a positive multiple of 8", self.image_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout rate {} outside [0, 1)", self.dropout));
        }
        if !(self.output_init_scale >= 0.0) {
            return Err(invalid!("output init scale must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub net: Network,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut params = Params::default();
        let mut stages = Vec::new();
        let mut cin = config.channels;
        let blocks = config.encoder_widths.iter().map(|&w| ("enc", w)).chain(config.decoder_widths.iter().map(|&w| ("dec", w)));
        for (i, (kind, w)) in blocks.enumerate() {
            let name = format!("{kind}{}", i % 3 + 1);
            let mut layers = Vec::new();
            if kind == "enc" {
                layers.push(Layer::Conv(Conv2d::new(&mut params, &format!("{name}.conv"), cin, w, 3, 2, 1, seed)));
            } else {
                layers.push(Layer::Upsample2);
                layers.push(Layer::Conv(Conv2d::new(&mut params, &format!("{name}.conv"), cin, w, 3, 1, 1, seed)));
            }
            layers.push(Layer::InstanceNorm(InstanceNorm::new(&mut params, &format!("{name}.norm"), w)));
            layers.push(Layer::Elu);
            layers.push(Layer::Dropout(config.dropout));
            if config.attention {
                layers.push(Layer::Attention(SelfAttention::new(&mut params, &format!("{name}.attn"), w, seed)));
            }
            stages.push(Stage { name, layers });
            cin = w;
        }
        let out = Conv2d::with_scale(&mut params, "out.conv", cin, config.channels, 1, 1, 0, seed, config.output_init_scale);
        stages.push(Stage { name: "out".into(), layers: vec![Layer::Conv(out)] });
        Ok(Generator { config, net: Network { params, stages } })
    }

    pub fn param_count(&self) -> usize {
        self.net.params.count()
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let s = self.config.image_size;
        if x.dim() != (self.config.channels, s, s) {
            return Err(shape_err!("generator expects {:?}, got {:?}", (self.config.channels, s, s), x.dim()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array3<f64>, mode: &mut Mode) -> Result<Array3<f64>> {
        self.check_input(x)?;
        let mut y = self.net.forward(x, mode).pop().expect("output stage");
        if self.config.residual {
            y += x;
        }
        Ok(y)
    }

    pub fn forward_tape(&self, x: &Array3<f64>, mode: &mut Mode) -> Result<(Array3<f64>, Tape)> {
        self.check_input(x)?;
        let tape = self.net.forward_tape(x, mode);
        let mut y = tape.outputs.last().expect("output stage").clone();
        if self.config.residual {
            y += x;
        }
        Ok((y, tape))
    }

    pub fn backward(&self, tape: &Tape, dy: &Array3<f64>, grads: Option<&mut Grads>) -> Result<Array3<f64>> {
        let mut stage_grads = vec![None; self.net.stages.len()];
        *stage_grads.last_mut().expect("output stage") = Some(dy.clone());
        let mut dx = self.net.backward(tape, &stage_grads, grads)?;
        if self.config.residual {
            dx += dy;
        }
        Ok(dx)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &Architecture::Generator(self.config.clone()), &self.net.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        match load_checkpoint(dir)? {
            (Architecture::Generator(cfg), params) => {
                let mut g = Generator::new(cfg)?;
                install(&mut g.net.params, params)?;
                Ok(g)
            }
            _ => Err(Error::Store(format!("{} is not a generator checkpoint", dir.display()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Classifier(ClassifierConfig),
    Generator(GeneratorConfig),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchFile {
    version: u32,
    architecture: Architecture,
    param_count: usize,
}

pub const ARCH_FILE: &str = "arch.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const WEIGHTS_MAGIC: &[u8; 4] = b"CSWB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `arch.json` and `weights.bin` (little-endian: magic, version,
/// block count, per-block name/shape/offset index, then f32 payload).
pub fn save_checkpoint(dir: &Path, arch: &Architecture, params: &Params) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arch_file = ArchFile {
        version: CHECKPOINT_VERSION,
        architecture: arch.clone(),
        param_count: params.count(),
    };
    let path = dir.join(ARCH_FILE);
    fs::write(&path, serde_json::to_string_pretty(&arch_file)?).map_err(|e| Error::io(&path, e))?;

    let mut buf = Vec::with_capacity(params.count() * 4 + 1024);
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.blocks.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for b in &params.blocks {
        buf.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(b.name.as_bytes());
        buf.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += b.values.len() as u64;
    }
    for b in &params.blocks {
        for &v in &b.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let path = dir.join(WEIGHTS_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| Error::Store("truncated weights file".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<(Architecture, Params)> {
    let path = dir.join(ARCH_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let arch: ArchFile = serde_json::from_str(&text)?;
    if arch.version != CHECKPOINT_VERSION {
        return Err(Error::Store(format!("unsupported checkpoint version {}", arch.version)));
    }
    let path = dir.join(WEIGHTS_FILE);
    let mut data = Vec::new();
    fs::File::open(&path).and_then(|mut f| f.read_to_end(&mut data)).map_err(|e| Error::io(&path, e))?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if cur.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Store(format!("{} is not a weights file", path.display())));
    }
    if cur.u32()? != CHECKPOINT_VERSION {
        return Err(Error::Store("unsupported weights version".into()));
    }
    let n = cur.u32()? as usize;
    let mut index = Vec::with_capacity(n);
    for _ in 0..n {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| Error::Store("block name is not UTF-8".into()))?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = cur.u64()? as usize;
        index.push((name, shape, offset));
    }
    let payload = &data[cur.pos..];
    let mut params = Params::default();
    for (name, shape, offset) in index {
        let count: usize = shape.iter().product();
        let bytes = payload
            .get(offset * 4..(offset + count) * 4)
            .ok_or_else(|| Error::Store(format!("block {name} runs past the payload")))?;
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        params.blocks.push(nn::ParamBlock { name, shape, values });
    }
    if params.count() != arch.param_count {
        return Err(Error::Store(format!("weights hold {} values, architecture says {}", params.count(), arch.param_count)));
    }
    Ok((arch.architecture, params))
}

fn install(dst: &mut Params, src: Params) -> Result<()> {
    if dst.blocks.len() != src.blocks.len() {
        return Err(Error::Store(format!("checkpoint has {} blocks, architecture needs {}", src.blocks.len(), dst.blocks.len())));
    }
    for (d, s) in dst.blocks.iter_mut().zip(src.blocks) {
        if d.name != s.name || d.shape != s.shape {
            return Err(Error::Store(format!("checkpoint block {} {:?} does not match {} {:?}", s.name, s.shape, d.name, d.shape)));
        }
        d.values = s.values;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn small_classifier() -> Classifier {
        Classifier::new(ClassifierConfig {
            in_channels: 2,
            image_size: 8,
            widths: [3, 4, 5],
            hidden: 6,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_generator(attention: bool, residual: bool) -> Generator {
        Generator::new(GeneratorConfig {
            channels: 2,
            image_size: 8,
            encoder_widths: [8, 8, 16],
            decoder_widths: [8, 8, 8],
            attention,
            residual,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    fn rel_close(fd: f64, an: f64) -> bool {
        (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-4)
    }

    /// Finite-difference check of a scalar functional of the parameters;
    /// dropout masks are replayed by reseeding each evaluation.
    fn fd_check(params: &mut Params, analytic: &Grads, loss: &dyn Fn(&Params) -> f64) {
        let eps = 1e-6;
        let mut checked = 0;
        for b in 0..params.blocks.len() {
            let n = params.blocks[b].values.len();
            let stride = (n / 7).max(1);
            for i in (0..n).step_by(stride) {
                let orig = params.blocks[b].values[i];
                params.blocks[b].values[i] = orig + eps;
                let up = loss(params);
                params.blocks[b].values[i] = orig - eps;
                let down = loss(params);
                params.blocks[b].values[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = analytic.blocks[b][i];
                assert!(rel_close(fd, an), "{}[{i}]: fd {fd} analytic {an}", params.blocks[b].name);
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn classifier_outputs_are_distributions_and_deterministic() {
        let c = Classifier::new(ClassifierConfig { in_channels: 4, image_size: 16, ..Default::default() }).unwrap();
        let x = rand3((4, 16, 16), 1);
        let a = c.forward(&x, &mut Mode::Eval).unwrap();
        let b = c.forward(&x, &mut Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(a.probs.iter().all(|&p| p >= 0.0));
        assert_eq!(a.features.len(), NUM_TAPS);
        assert_eq!(a.features[0].dim(), (16, 8, 8));
        assert_eq!(a.features[2].dim(), (64, 2, 2));
        assert!(c.forward(&rand3((3, 16, 16), 1), &mut Mode::Eval).is_err());
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let mut c = small_classifier();
        let x = rand3((2, 8, 8), 2);
        let r_logits = [0.7, -1.3];
        let r_feats: Vec<Array3<f64>> = c.forward(&x, &mut Mode::Eval).unwrap().features.iter().enumerate().map(|(i, f)| rand3(f.dim(), 10 + i as u64)).collect();
        let loss = |net: &Classifier| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let out = net.forward(&x, &mut Mode::Train(&mut rng)).unwrap();
            let mut l = out.logits[0] * r_logits[0] + out.logits[1] * r_logits[1];
            for (f, r) in out.features.iter().zip(&r_feats) {
                l += (f * r).sum();
            }
            l
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (_, tape) = c.forward_tape(&x, &mut Mode::Train(&mut rng)).unwrap();
        let mut grads = c.net.params.zeros_like();
        c.backward(&tape, Some(r_logits), [Some(r_feats[0].clone()), Some(r_feats[1].clone()), Some(r_feats[2].clone())], Some(&mut grads)).unwrap();
        let cfg = c.config.clone();
        let stages = c.net.stages.clone();
        fd_check(&mut c.net.params, &grads, &|p| {
            loss(&Classifier { config: cfg.clone(), net: Network { params: p.clone(), stages: stages.clone() } })
        });
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        for residual in [false, true] {
            let mut g = small_generator(true, residual);
            for b in &mut g.net.params.blocks {
                if b.name.ends_with("attn.gamma") {
                    b.values[0] = 0.5;
                }
            }
            let x = rand3((2, 8, 8), 3);
            let r = rand3((2, 8, 8), 4);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let (_, tape) = g.forward_tape(&x, &mut Mode::Train(&mut rng)).unwrap();
            let mut grads = g.net.params.zeros_like();
            g.backward(&tape, &r, Some(&mut grads)).unwrap();
            let cfg = g.config.clone();
            let stages = g.net.stages.clone();
            fd_check(&mut g.net.params, &grads, &|p| {
                let g = Generator { config: cfg.clone(), net: Network { params: p.clone(), stages: stages.clone() } };
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                (&g.forward(&x, &mut Mode::Train(&mut rng)).unwrap() * &r).sum()
            });
        }
    }

    #[test]
    fn generator_preserves_shape() {
        let g = Generator::new(GeneratorConfig { channels: 3, image_size: 16, ..Default::default() }).unwrap();
        let x = rand3((3, 16, 16), 5);
        let y = g.forward(&x, &mut Mode::Eval).unwrap();
        assert_eq!(y.dim(), x.dim());
        assert!(y.iter().all(|v| v.is_finite()));
        assert_eq!(y, g.forward(&x, &mut Mode::Eval).unwrap());
        assert!(g.forward(&rand3((3, 8, 8), 5), &mut Mode::Eval).is_err());
    }

    #[test]
    fn generator_at_zero_gamma_equals_plain_encoder_decoder() {
        let with = small_generator(true, false);
        let without = small_generator(false, false);
        let x = rand3((2, 8, 8), 6);
        assert_eq!(with.forward(&x, &mut Mode::Eval).unwrap(), without.forward(&x, &mut Mode::Eval).unwrap());
    }

    #[test]
    fn param_count_is_a_function_of_config() {
        let a = small_classifier();
        let b = small_classifier();
        assert_eq!(a.param_count(), b.param_count());
        // conv: 2·3·9+3, 3·4·9+4, 4·5·9+5; fc: 5·6+6, 6·2+2
        assert_eq!(a.param_count(), 57 + 112 + 185 + 36 + 14);
        let big = Classifier::new(ClassifierConfig::default()).unwrap();
        assert_eq!(big.param_count(), (64 * 16 * 9 + 16) + (16 * 32 * 9 + 32) + (32 * 64 * 9 + 64) + (4096 * 64 + 64) + (64 * 2 + 2));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_classifier();
        c.save(&dir.path().join("c")).unwrap();
        let back = Classifier::load(&dir.path().join("c")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.net.params.checksum(), c.net.params.checksum());

        let g = small_generator(true, true);
        g.save(&dir.path().join("g")).unwrap();
        assert_eq!(Generator::load(&dir.path().join("g")).unwrap(), g);
        assert!(Classifier::load(&dir.path().join("g")).is_err());
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_classifier();
        c.save(dir.path()).unwrap();
        let w = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&w).unwrap();
        fs::write(&w, &bytes[..bytes.len() - 4]).unwrap();
        assert!(Classifier::load(dir.path()).is_err());
    }

    #[test]
    fn concurrent_eval_forwards_agree() {
        use rayon::prelude::*;
        let c = small_classifier();
        let xs: Vec<_> = (0..8).map(|i| rand3((2, 8, 8), i)).collect();
        let seq: Vec<_> = xs.iter().map(|x| c.forward(x, &mut Mode::Eval).unwrap()).collect();
        let par: Vec<_> = xs.par_iter().map(|x| c.forward(x, &mut Mode::Eval).unwrap()).collect();
        assert_eq!(seq, par);
    }
}
