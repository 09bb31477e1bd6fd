//! Dual-branch UNet: one shared encoder, one decoder parameter set applied
//! twice. Branch 1 decodes the clean features; branch 2 decodes a
//! dropout-perturbed copy of them. Both branches therefore train the same
//! weights, and with dropout disabled they produce identical outputs.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::EvidenceMap;
use crate::labels::LabelMap;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tnsr;

/// Which encoder features are dropout-perturbed before the branch-2 decode.
/// The bottleneck is always perturbed; `AllSkips` perturbs the skip
/// connections too, so branch 2 cannot lean on clean skips to mirror branch 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutScope {
    Bottleneck,
    #[default]
    AllSkips,
}

/// Architecture hyperparameters. `depth` counts the pooling steps, so input
/// spatial extents must be divisible by 2^depth; channel widths double per
/// level starting at `base_width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub dropout_scope: DropoutScope,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            num_classes: 4,
            base_width: 8,
            depth: 3,
            dropout_rate: 0.5,
            dropout_scope: DropoutScope::AllSkips,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidConfig("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.base_width == 0 {
            return Err(Error::InvalidConfig("base_width must be positive".into()));
        }
        if self.depth == 0 {
            return Err(Error::InvalidConfig("depth must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Channel width at encoder level `l` (0 = finest).
    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// One named weight or bias tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

fn push_double_conv(layout: &mut Vec<(String, Vec<usize>)>, prefix: &str, cin: usize, cout: usize) {
    layout.push((format!("{prefix}.conv1.weight"), vec![cout, cin, 3, 3]));
    layout.push((format!("{prefix}.conv1.bias"), vec![cout]));
    layout.push((format!("{prefix}.conv2.weight"), vec![cout, cout, 3, 3]));
    layout.push((format!("{prefix}.conv2.bias"), vec![cout]));
}

/// Canonical parameter list for a config: (name, shape) in the order the
/// forward pass consumes them. Init, bind, and checkpoint I/O all derive
/// from this one definition so they cannot drift apart.
fn parameter_layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    let mut prev = cfg.in_channels;
    for l in 0..cfg.depth {
        push_double_conv(&mut layout, &format!("enc{l}"), prev, cfg.width(l));
        prev = cfg.width(l);
    }
    push_double_conv(&mut layout, "bottleneck", prev, cfg.width(cfg.depth));

    for l in (0..cfg.depth).rev() {
        let w = cfg.width(l);
        layout.push((format!("dec{l}.up.weight"), vec![w, cfg.width(l + 1), 3, 3]));
        layout.push((format!("dec{l}.up.bias"), vec![w]));
        push_double_conv(&mut layout, &format!("dec{l}"), 2 * w, w);
    }

    layout.push((
        "head.weight".into(),
        vec![cfg.num_classes, cfg.base_width, 1, 1],
    ));
    layout.push(("head.bias".into(), vec![cfg.num_classes]));
    layout
}

/// The network: a flat list of named parameters plus the config that fixes
/// their shapes. Forward passes bind the parameters onto a caller-provided
/// tape, so the same weights can serve many independent tapes.
#[derive(Debug, Clone)]
pub struct DualNet {
    config: NetConfig,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Pre-activation outputs of the two branches, each [K, H, W].
#[derive(Debug, Clone, Copy)]
pub struct DualOutput {
    pub raw1: Var,
    pub raw2: Var,
}

/// Branch-1 prediction unpacked for consumers that never touch the tape.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Expected class probabilities, [K, H, W].
    pub prob: Tensor,
    /// Per-pixel Dirichlet uncertainty in (0, 1], [H, W].
    pub uncertainty: Tensor,
    /// Per-pixel argmax of `prob`.
    pub labels: LabelMap,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    version: u32,
    config: NetConfig,
    rng_seed: u64,
    params: Vec<BlobEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    offset: u64,
    len: u64,
}

impl DualNet {
    /// Fresh network with He-style fan-in uniform weights and zero biases,
    /// drawn deterministically from `config.seed`.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        for (name, shape) in parameter_layout(&config) {
            let value = if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let numel: usize = shape.iter().product();
                let data = (0..numel)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                    .collect();
                Tensor::new(shape, data)?
            };
            params.push(Param { name, value });
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: NetConfig, params: Vec<Param>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        DualNet {
            config,
            params,
            index,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    /// Replace one parameter tensor; the shape must match the layout.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self.index.get(name).ok_or_else(|| {
            Error::InvalidConfig(format!("no parameter named {name:?} in this network"))
        })?;
        if value.shape() != self.params[i].value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: self.params[i].value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.params[i].value = value;
        Ok(())
    }

    /// Create one tape leaf per parameter. `trainable` leaves accumulate
    /// gradients; inference binds constants instead.
    pub fn bind<'n, 't>(&'n self, tape: &'t Tape, trainable: bool) -> Result<BoundNet<'n, 't>> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundNet {
            net: self,
            tape,
            vars,
        })
    }

    /// Branch-1 prediction on a frozen network: probabilities, uncertainty,
    /// and hard labels from a single decode (branch 2 would be bitwise
    /// identical with dropout off, so it is not computed).
    pub fn inference(&self, image: &Tensor) -> Result<Inference> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        let (skips, bottom) = bound.encode(image)?;
        let raw1 = bound.decode(&skips, bottom)?;
        let evidence = EvidenceMap::from_logits(&tape, raw1)?;
        let prob = tape.value(evidence.expected_prob()?);
        let uncertainty = tape.value(evidence.uncertainty()?);
        let labels = LabelMap::from_class_scores(&prob)?;
        Ok(Inference {
            prob,
            uncertainty,
            labels,
        })
    }

    /// Serialize config and all parameters into one file: a little-endian
    /// u32 JSON-index length, the JSON index, then concatenated TNSR blobs
    /// at the offsets the index records.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut blobs: Vec<u8> = Vec::new();
        let mut entries = Vec::new();
        for p in &self.params {
            let offset = blobs.len() as u64;
            tnsr::write_f64_to(&mut blobs, &p.value).map_err(|e| Error::io(path, e))?;
            entries.push(BlobEntry {
                name: p.name.clone(),
                offset,
                len: blobs.len() as u64 - offset,
            });
        }
        let index = CheckpointIndex {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            rng_seed: self.config.seed,
            params: entries,
        };
        let json = serde_json::to_vec(&index)
            .map_err(|e| Error::format(path, format!("cannot encode checkpoint index: {e}")))?;

        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let write = |w: &mut std::io::BufWriter<std::fs::File>, bytes: &[u8]| {
            w.write_all(bytes).map_err(|e| Error::io(path, e))
        };
        write(&mut w, &(json.len() as u32).to_le_bytes())?;
        write(&mut w, &json)?;
        write(&mut w, &blobs)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Inverse of `save_checkpoint`. Every blob is validated against the
    /// layout implied by the stored config, so a checkpoint whose config
    /// disagrees with its tensors (e.g. a different class count) is rejected
    /// before any network is built.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 4 {
            return Err(Error::format(path, "checkpoint shorter than its header"));
        }
        let json_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let blob_start = 4 + json_len;
        if bytes.len() < blob_start {
            return Err(Error::format(path, "checkpoint index extends past end of file"));
        }
        let index: CheckpointIndex = serde_json::from_slice(&bytes[4..blob_start])
            .map_err(|e| Error::format(path, format!("checkpoint index is not valid JSON: {e}")))?;
        if index.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {}", index.version),
            ));
        }
        index.config.validate()?;

        let layout = parameter_layout(&index.config);
        if index.params.len() != layout.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint stores {} parameters but the config implies {}",
                index.params.len(),
                layout.len()
            )));
        }
        let blobs = &bytes[blob_start..];
        let mut params = Vec::with_capacity(layout.len());
        for (entry, (name, shape)) in index.params.iter().zip(&layout) {
            if entry.name != *name {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint parameter {:?} where {:?} was expected",
                    entry.name, name
                )));
            }
            let start = entry.offset as usize;
            let end = start + entry.len as usize;
            if end > blobs.len() || start > end {
                return Err(Error::format(
                    path,
                    format!("blob for {name:?} extends past end of file"),
                ));
            }
            let value = tnsr::read_f64_from(&mut &blobs[start..end], path)?;
            if value.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {:?} has shape {:?} but the config implies {:?}",
                    name,
                    value.shape(),
                    shape
                )));
            }
            params.push(Param {
                name: name.clone(),
                value,
            });
        }
        Ok(Self::assemble(index.config, params))
    }
}

/// A network whose parameters live as leaves on one tape. Gradients for
/// parameter i land on `vars()[i]` after backward.
pub struct BoundNet<'n, 't> {
    net: &'n DualNet,
    tape: &'t Tape,
    vars: Vec<Var>,
}

impl<'n, 't> BoundNet<'n, 't> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn var(&self, name: &str) -> Var {
        self.vars[self.net.index[name]]
    }

    /// conv3x3 (same padding) + bias + relu, twice.
    fn double_conv(&self, x: Var, prefix: &str) -> Result<Var> {
        let t = self.tape;
        let mut x = x;
        for conv in ["conv1", "conv2"] {
            x = t.conv2d(x, self.var(&format!("{prefix}.{conv}.weight")), 1, 1)?;
            x = t.bias_add(x, self.var(&format!("{prefix}.{conv}.bias")))?;
            x = t.relu(x)?;
        }
        Ok(x)
    }

    /// Shared encoder: skip features per level plus the bottleneck, all
    /// computed exactly once per forward pass.
    fn encode(&self, image: &Tensor) -> Result<(Vec<Var>, Var)> {
        let cfg = &self.net.config;
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != cfg.in_channels {
            return Err(Error::ConfigMismatch(format!(
                "input shape {:?} does not match {} channel(s) of [C, H, W]",
                shape, cfg.in_channels
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let unit = 1usize << cfg.depth;
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::ConfigMismatch(format!(
                "spatial extents {h}x{w} must be positive multiples of 2^depth = {unit}"
            )));
        }

        let t = self.tape;
        let mut x = t.constant(image.reshape(vec![1, cfg.in_channels, h, w])?)?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            x = self.double_conv(x, &format!("enc{l}"))?;
            skips.push(x);
            x = t.maxpool2(x)?;
        }
        let bottom = self.double_conv(x, "bottleneck")?;
        Ok((skips, bottom))
    }

    /// Decoder applied to one set of features, ending in the 1x1 evidence
    /// head. Returns pre-activation scores [K, H, W].
    fn decode(&self, skips: &[Var], bottom: Var) -> Result<Var> {
        let t = self.tape;
        let mut x = bottom;
        for l in (0..self.net.config.depth).rev() {
            x = t.upsample2(x)?;
            x = t.conv2d(x, self.var(&format!("dec{l}.up.weight")), 1, 1)?;
            x = t.bias_add(x, self.var(&format!("dec{l}.up.bias")))?;
            x = t.relu(x)?;
            x = t.concat(&[skips[l], x], 1)?;
            x = self.double_conv(x, &format!("dec{l}"))?;
        }
        x = t.conv2d(x, self.var("head.weight"), 1, 0)?;
        x = t.bias_add(x, self.var("head.bias"))?;
        let shape = t.shape(x);
        t.reshape(x, shape[1..].to_vec())
    }

    /// Full dual forward: branch 1 decodes the clean features, branch 2 the
    /// dropout-perturbed ones. One parameter set serves both decodes, so
    /// backward accumulates both branches' gradients into the same leaves.
    pub fn forward(
        &self,
        image: &Tensor,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<DualOutput> {
        let cfg = &self.net.config;
        let (skips, bottom) = self.encode(image)?;
        let raw1 = self.decode(&skips, bottom)?;

        let bottom2 = self.tape.dropout(bottom, cfg.dropout_rate, training, rng)?;
        let skips2 = skips
            .iter()
            .map(|&s| match cfg.dropout_scope {
                DropoutScope::AllSkips => self.tape.dropout(s, cfg.dropout_rate, training, rng),
                DropoutScope::Bottleneck => Ok(s),
            })
            .collect::<Result<Vec<_>>>()?;
        let raw2 = self.decode(&skips2, bottom2)?;
        Ok(DualOutput { raw1, raw2 })
    }
}
