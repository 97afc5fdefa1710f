//! Per-fruit descriptors from a sparse residual 3D CNN over the colored
//! neighborhood of each fruit.

use std::path::Path;
use std::rc::Rc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloud::{ColoredCloud, FruitInstance};
use crate::nn::{
    batch_norm, init_batch_norm, init_sparse_conv, load_checkpoint, save_checkpoint, sparse_conv, Matrix, Mode,
    ParamStore, Tape, Var,
};
use crate::rng::stream;
use crate::sparsegrid::{kernel_neighbors, support, voxelize_batch, Rulebook};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "encoder";
pub const MAX_SUPPORT_POINTS: usize = 60_000;
const PREFIX: &str = "encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Radius of the neighborhood around each fruit center (meters).
    pub support_radius: f64,
    pub voxel_size: f64,
    /// Stem width followed by one width per residual block; the last entry is
    /// the descriptor length.
    pub channels: Vec<usize>,
    /// Supports with more points are randomly subsampled to this many.
    pub max_support_points: usize,
    pub rng_seed: u64,
}

impl Default for EncoderConfig {
    /// Desk-scale setting for the synthetic orchard.
    fn default() -> Self {
        EncoderConfig {
            support_radius: 0.03,
            voxel_size: 0.002,
            channels: vec![8, 8, 16, 16, 64],
            max_support_points: MAX_SUPPORT_POINTS,
            rng_seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Full-resolution setting for real strawberry scans.
    pub fn full_scale() -> Self {
        EncoderConfig {
            support_radius: 0.2,
            voxel_size: 5e-4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::Config("encoder needs a stem width and at least one positive block width".into()));
        }
        if !(self.support_radius > 0.0) || !(self.voxel_size > 0.0) {
            return Err(Error::Config("support radius and voxel size must be positive".into()));
        }
        if self.max_support_points == 0 {
            return Err(Error::Config("max_support_points must be positive".into()));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn descriptor_len(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn zeros(len: usize) -> Self {
        Descriptor(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Descriptors aligned with the instances of one session.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DescriptorSet {
    pub session: String,
    pub descriptors: Vec<Descriptor>,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Rows are descriptors.
    pub fn to_matrix(&self, z: usize) -> Result<Matrix> {
        if let Some(d) = self.descriptors.iter().find(|d| d.len() != z) {
            return Err(Error::Shape(format!("descriptor of length {} where {z} expected", d.len())));
        }
        Matrix::from_vec(self.len(), z, self.descriptors.iter().flat_map(|d| d.0.iter().copied()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

fn name(parts: &str) -> String {
    format!("{PREFIX}.{parts}")
}

impl EncoderModel {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.rng_seed, "encoder-init");
        let mut s = ParamStore::new();
        let ch = &config.channels;
        init_sparse_conv(&mut s, &mut rng, &name("stem.conv1"), 3, 3, ch[0]);
        init_batch_norm(&mut s, &name("stem.bn1"), ch[0]);
        init_sparse_conv(&mut s, &mut rng, &name("stem.conv2"), 3, ch[0], ch[0]);
        init_batch_norm(&mut s, &name("stem.bn2"), ch[0]);
        for b in 1..ch.len() {
            let (cin, c) = (ch[b - 1], ch[b]);
            let p = |x: &str| name(&format!("block{b}.{x}"));
            init_sparse_conv(&mut s, &mut rng, &p("down.conv"), 3, cin, c);
            init_batch_norm(&mut s, &p("down.bn"), c);
            for stage in ["a", "b"] {
                init_sparse_conv(&mut s, &mut rng, &p(&format!("{stage}.conv1")), 3, c, c);
                init_batch_norm(&mut s, &p(&format!("{stage}.bn1")), c);
                init_sparse_conv(&mut s, &mut rng, &p(&format!("{stage}.conv2")), 3, c, c);
                init_batch_norm(&mut s, &p(&format!("{stage}.bn2")), c);
            }
            init_sparse_conv(&mut s, &mut rng, &p("a.short.conv"), 1, c, c);
            init_batch_norm(&mut s, &p("a.short.bn"), c);
        }
        Ok(EncoderModel { config, params: s })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &serde_json::to_value(&self.config)?, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Shape(format!("expected an encoder model, found {}", ck.kind)));
        }
        let config: EncoderConfig = serde_json::from_value(ck.config)?;
        let fresh = EncoderModel::new(config)?;
        fresh.params.check_layout(&ck.params)?;
        Ok(EncoderModel {
            config: fresh.config,
            params: ck.params,
        })
    }
}

fn conv_bn(
    tape: &mut Tape,
    store: &ParamStore,
    conv: &str,
    bn: &str,
    x: Var,
    rb: &Rc<Rulebook>,
    mode: Mode,
) -> Result<Var> {
    let y = sparse_conv(tape, store, &name(conv), x, rb.clone())?;
    batch_norm(tape, store, &name(bn), y, mode)
}

fn residual_stage(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    rb: &Rc<Rulebook>,
    shortcut: Option<&Rc<Rulebook>>,
    mode: Mode,
) -> Result<Var> {
    let m = conv_bn(tape, store, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), x, rb, mode)?;
    let m = tape.relu(m);
    let m = conv_bn(tape, store, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), m, rb, mode)?;
    let skip = match shortcut {
        Some(rb1) => conv_bn(tape, store, &format!("{prefix}.short.conv"), &format!("{prefix}.short.bn"), x, rb1, mode)?,
        None => x,
    };
    let sum = tape.add(m, skip)?;
    Ok(tape.relu(sum))
}

/// Encodes several supports at once; row `b` of the result is the
/// descriptor of `supports[b]`. Empty supports yield zero rows.
pub fn encode_on_tape(tape: &mut Tape, model: &EncoderModel, supports: &[&ColoredCloud], mode: Mode) -> Result<Var> {
    let z = model.config.descriptor_len();
    let (tensor, _) = voxelize_batch(supports, model.config.voxel_size);
    if tensor.is_empty() {
        return Ok(tape.leaf(Matrix::zeros(supports.len(), z)));
    }
    let store = &model.params;
    let mut coords = tensor.coords.clone();
    let mut stride = 1;
    let rb = Rc::new(kernel_neighbors(&coords, stride, 3, 1));
    let x = tape.leaf(tensor.features.clone());
    let h = conv_bn(tape, store, "stem.conv1", "stem.bn1", x, &rb, mode)?;
    let h = tape.relu(h);
    let h = conv_bn(tape, store, "stem.conv2", "stem.bn2", h, &rb, mode)?;
    let mut h = tape.relu(h);
    for b in 1..=model.config.blocks() {
        let down = Rc::new(kernel_neighbors(&coords, stride, 3, 2));
        coords = down.out_coords.clone();
        stride = down.out_stride;
        let d = conv_bn(tape, store, &format!("block{b}.down.conv"), &format!("block{b}.down.bn"), h, &down, mode)?;
        h = tape.relu(d);
        let rb = Rc::new(kernel_neighbors(&coords, stride, 3, 1));
        let rb1 = Rc::new(kernel_neighbors(&coords, stride, 1, 1));
        h = residual_stage(tape, store, &format!("block{b}.a"), h, &rb, Some(&rb1), mode)?;
        h = residual_stage(tape, store, &format!("block{b}.b"), h, &rb, None, mode)?;
    }
    let seg = Rc::new(coords.iter().map(|c| c.batch as usize).collect::<Vec<_>>());
    Ok(tape.segment_mean(h, seg, supports.len()))
}

/// Descriptor of one support cloud in eval mode.
pub fn encode(support_cloud: &ColoredCloud, model: &EncoderModel) -> Result<Descriptor> {
    if support_cloud.is_empty() {
        return Err(Error::EmptyInput("empty support cloud".into()));
    }
    let mut tape = Tape::new();
    let d = encode_on_tape(&mut tape, model, &[support_cloud], Mode::Eval)?;
    Ok(Descriptor(tape.value(d).row(0).to_vec()))
}

/// Re-centered neighborhood of every instance, subsampled when oversized.
pub fn supports_for(cloud: &ColoredCloud, instances: &[FruitInstance], config: &EncoderConfig) -> Vec<ColoredCloud> {
    instances
        .iter()
        .enumerate()
        .map(|(k, inst)| {
            let s = support(cloud, inst.center, config.support_radius);
            if s.len() <= config.max_support_points {
                return s;
            }
            let mut rng = stream(config.rng_seed, &format!("support-subsample-{k}"));
            let mut keep = sample(&mut rng, s.len(), config.max_support_points).into_vec();
            keep.sort_unstable();
            s.select(&keep)
        })
        .collect()
}

/// Descriptors of all instances in order. An instance with an empty support
/// gets a zero descriptor and a warning.
pub fn encode_all(
    cloud: &ColoredCloud,
    instances: &[FruitInstance],
    model: &EncoderModel,
    session: &str,
) -> Result<DescriptorSet> {
    let supports = supports_for(cloud, instances, &model.config);
    for (k, s) in supports.iter().enumerate() {
        if s.is_empty() {
            log::warn!("instance {k} has an empty support; using a zero descriptor");
        }
    }
    let refs: Vec<&ColoredCloud> = supports.iter().collect();
    let mut tape = Tape::new();
    let d = encode_on_tape(&mut tape, model, &refs, Mode::Eval)?;
    let m = tape.value(d);
    Ok(DescriptorSet {
        session: session.to_string(),
        descriptors: (0..m.rows).map(|r| Descriptor(m.row(r).to_vec())).collect(),
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    schema_version: u32,
    session: &'a str,
    descriptor_len: usize,
    count: usize,
    config_hash: String,
    config: &'a EncoderConfig,
}

/// Writes `instance_id,d0..d{z-1}` rows to `path` and a JSON sidecar next to
/// it (`<path>.json`) describing the producing configuration.
pub fn write_descriptors_csv(set: &DescriptorSet, config: &EncoderConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let z = config.descriptor_len();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["instance_id".to_string()];
    header.extend((0..z).map(|i| format!("d{i}")));
    w.write_record(&header)?;
    for (k, d) in set.descriptors.iter().enumerate() {
        if d.len() != z {
            return Err(Error::Shape(format!("descriptor {k} has length {}, expected {z}", d.len())));
        }
        let mut row = vec![k.to_string()];
        row.extend(d.0.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let meta = Sidecar {
        schema_version: 1,
        session: &set.session,
        descriptor_len: z,
        count: set.len(),
        config_hash: config.hash(),
        config,
    };
    std::fs::write(&sidecar, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&sidecar, e))
}
