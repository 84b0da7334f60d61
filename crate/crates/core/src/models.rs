//! The three classifier architectures, their shape traces, and
//! checkpoint serialization.
//!
//! Each builder emits a plain layer list; a width multiplier scales the
//! canonical channel counts (rounded up) so the same topology can train
//! at desk scale. `infer_shapes` renders the list as grouped rows — a
//! lone conv+relu+pool block collapses into one "sequential" row, a
//! dense+relu pair likewise — which is the layout the architecture
//! tables use.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::{output_shape, LayerSpec, LossKind, Network, NnError, Padding};

const CHECKPOINT_MAGIC: &[u8; 8] = b"NNCKPT01";
const DROPOUT_RATE: f32 = 0.5;

#[derive(Debug)]
pub enum ModelError {
    /// The architecture cannot operate on the requested input size.
    IncompatibleInput { name: ModelKind, detail: String },
    /// num_classes or width_multiplier out of range.
    InvalidSpec(String),
    /// Shape propagation failed at a layer (absolute index into the
    /// layer list).
    ShapeFlowBroken { layer: usize, detail: String },
    /// The file is not a checkpoint this version understands.
    VersionMismatch { found: String },
    /// Parameter payload size disagrees with the architecture.
    PayloadLengthMismatch { expected: usize, found: usize },
    IoFailure(io::Error),
    Engine(NnError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::IncompatibleInput { name, detail } => {
                write!(f, "{name} cannot run on this input: {detail}")
            }
            ModelError::InvalidSpec(detail) => write!(f, "invalid model spec: {detail}"),
            ModelError::ShapeFlowBroken { layer, detail } => {
                write!(f, "shape flow broken at layer {layer}: {detail}")
            }
            ModelError::VersionMismatch { found } => {
                write!(f, "not a recognized checkpoint (magic {found:?})")
            }
            ModelError::PayloadLengthMismatch { expected, found } => {
                write!(f, "checkpoint payload holds {found} parameters, architecture wants {expected}")
            }
            ModelError::IoFailure(e) => write!(f, "checkpoint i/o failed: {e}"),
            ModelError::Engine(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ModelError::IoFailure(e) => Some(e),
            ModelError::Engine(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for ModelError {
    fn from(e: io::Error) -> Self {
        ModelError::IoFailure(e)
    }
}

impl From<NnError> for ModelError {
    fn from(e: NnError) -> Self {
        ModelError::Engine(e)
    }
}

/// `fmt::Display` via `as_str`, shared by the small string-backed enums.
macro_rules! fmt_as_str {
    () => {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str(self.as_str())
        }
    };
}

/// Which of the three architectures a spec describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vgg16,
    Alexnet,
    CustomCnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Vgg16, ModelKind::Alexnet, ModelKind::CustomCnn];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Vgg16 => "vgg16",
            ModelKind::Alexnet => "alexnet",
            ModelKind::CustomCnn => "custom_cnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fmt_as_str!();
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vgg16" => Ok(ModelKind::Vgg16),
            "alexnet" => Ok(ModelKind::Alexnet),
            "custom_cnn" => Ok(ModelKind::CustomCnn),
            other => Err(format!("unknown model {other:?} (expected vgg16, alexnet, or custom_cnn)")),
        }
    }
}

/// A fully described architecture: name, input geometry, and the exact
/// layer list. Serializable, and sufficient to rebuild the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: ModelKind,
    pub input: [usize; 3],
    pub num_classes: usize,
    pub width_multiplier: f64,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// The loss matching the head activation: softmax pairs with
    /// cross-entropy, sigmoid with per-neuron binary cross-entropy.
    pub fn loss(&self) -> LossKind {
        match self.layers.last() {
            Some(LayerSpec::Sigmoid) => LossKind::BinaryCrossEntropy,
            _ => LossKind::CrossEntropy,
        }
    }

    /// Instantiates the network with seeded initial weights.
    pub fn build(&self, seed: u64) -> Result<Network<f32>, ModelError> {
        Ok(Network::new(self.input, self.layers.clone(), seed)?)
    }
}

fn scaled(channels: usize, multiplier: f64) -> usize {
    (channels as f64 * multiplier).ceil() as usize
}

fn check_common(num_classes: usize, width_multiplier: f64) -> Result<(), ModelError> {
    if num_classes < 2 {
        return Err(ModelError::InvalidSpec(format!(
            "classification needs at least 2 classes, got {num_classes}"
        )));
    }
    if !(width_multiplier > 0.0 && width_multiplier <= 1.0) {
        return Err(ModelError::InvalidSpec(format!(
            "width multiplier {width_multiplier} not in (0, 1]"
        )));
    }
    Ok(())
}

fn conv3(out_channels: usize) -> LayerSpec {
    LayerSpec::Conv2d { out_channels, kernel_h: 3, kernel_w: 3, stride: 1, padding: Padding::Same }
}

fn pool2() -> LayerSpec {
    LayerSpec::MaxPool2d { pool: 2, stride: 2 }
}

/// Verifies the whole spec flows, converting a failure into
/// `IncompatibleInput` for the named architecture.
fn checked(spec: NetworkSpec) -> Result<NetworkSpec, ModelError> {
    match infer_shapes(&spec) {
        Ok(_) => Ok(spec),
        Err(ModelError::ShapeFlowBroken { layer, detail }) => Err(ModelError::IncompatibleInput {
            name: spec.name,
            detail: format!("layer {layer}: {detail}"),
        }),
        Err(e) => Err(e),
    }
}

/// The custom architecture: two conv16 layers, one pooled conv block
/// each at 32/64/128 channels, a dropout, a conv256 pair, dropout, then
/// a 512-128-64-32 dense cascade into a softmax head.
pub fn build_custom_cnn(
    input: [usize; 3],
    num_classes: usize,
    width_multiplier: f64,
) -> Result<NetworkSpec, ModelError> {
    check_common(num_classes, width_multiplier)?;
    let c = |ch: usize| scaled(ch, width_multiplier);
    let mut layers = vec![
        conv3(c(16)),
        LayerSpec::Relu,
        conv3(c(16)),
        LayerSpec::Relu,
        pool2(),
    ];
    for ch in [32, 64, 128] {
        layers.extend([conv3(c(ch)), LayerSpec::Relu, pool2()]);
    }
    layers.push(LayerSpec::Dropout { rate: DROPOUT_RATE });
    layers.extend([conv3(c(256)), LayerSpec::Relu, conv3(c(256)), LayerSpec::Relu, pool2()]);
    layers.push(LayerSpec::Dropout { rate: DROPOUT_RATE });
    layers.push(LayerSpec::Flatten);
    for units in [512, 128, 64, 32] {
        layers.extend([LayerSpec::Dense { out_units: c(units) }, LayerSpec::Relu]);
    }
    layers.extend([LayerSpec::Dense { out_units: num_classes }, LayerSpec::Softmax]);
    checked(NetworkSpec {
        name: ModelKind::CustomCnn,
        input,
        num_classes,
        width_multiplier,
        layers,
    })
}

/// VGG16: thirteen 3x3 stride-1 convs in 2-2-3-3-3 blocks at
/// (64,128,256,512,512) channels, a pool after each block, two wide
/// dense layers, and a sigmoid head.
pub fn build_vgg16(
    input: [usize; 3],
    num_classes: usize,
    width_multiplier: f64,
) -> Result<NetworkSpec, ModelError> {
    check_common(num_classes, width_multiplier)?;
    let c = |ch: usize| scaled(ch, width_multiplier);
    let mut layers = Vec::new();
    for (count, ch) in [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)] {
        for _ in 0..count {
            layers.extend([conv3(c(ch)), LayerSpec::Relu]);
        }
        layers.push(pool2());
    }
    layers.push(LayerSpec::Flatten);
    for _ in 0..2 {
        layers.extend([LayerSpec::Dense { out_units: c(4096) }, LayerSpec::Relu]);
    }
    layers.extend([LayerSpec::Dense { out_units: num_classes }, LayerSpec::Sigmoid]);
    checked(NetworkSpec {
        name: ModelKind::Vgg16,
        input,
        num_classes,
        width_multiplier,
        layers,
    })
}

/// AlexNet variant: 11x11 stride-4 stem, 5x5 conv, the stacked 3x3
/// pair, 2x2 pooling throughout, two wide dense+dropout layers, and a
/// sigmoid head. Needs at least a 96x96 canvas.
pub fn build_alexnet(
    input: [usize; 3],
    num_classes: usize,
    width_multiplier: f64,
) -> Result<NetworkSpec, ModelError> {
    check_common(num_classes, width_multiplier)?;
    if input[0] < 96 || input[1] < 96 {
        return Err(ModelError::IncompatibleInput {
            name: ModelKind::Alexnet,
            detail: format!("input {}x{} is below the 96x96 minimum", input[0], input[1]),
        });
    }
    let c = |ch: usize| scaled(ch, width_multiplier);
    let mut layers = vec![
        LayerSpec::Conv2d {
            out_channels: c(96),
            kernel_h: 11,
            kernel_w: 11,
            stride: 4,
            padding: Padding::Valid,
        },
        LayerSpec::Relu,
        pool2(),
        LayerSpec::Conv2d {
            out_channels: c(256),
            kernel_h: 5,
            kernel_w: 5,
            stride: 1,
            padding: Padding::Same,
        },
        LayerSpec::Relu,
        pool2(),
        conv3(c(384)),
        LayerSpec::Relu,
        conv3(c(384)),
        LayerSpec::Relu,
        conv3(c(256)),
        LayerSpec::Relu,
        pool2(),
        LayerSpec::Flatten,
    ];
    for _ in 0..2 {
        layers.extend([
            LayerSpec::Dense { out_units: c(4096) },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: DROPOUT_RATE },
        ]);
    }
    layers.extend([LayerSpec::Dense { out_units: num_classes }, LayerSpec::Sigmoid]);
    checked(NetworkSpec {
        name: ModelKind::Alexnet,
        input,
        num_classes,
        width_multiplier,
        layers,
    })
}

/// Builds the named architecture with its canonical topology.
pub fn build(
    kind: ModelKind,
    input: [usize; 3],
    num_classes: usize,
    width_multiplier: f64,
) -> Result<NetworkSpec, ModelError> {
    match kind {
        ModelKind::Vgg16 => build_vgg16(input, num_classes, width_multiplier),
        ModelKind::Alexnet => build_alexnet(input, num_classes, width_multiplier),
        ModelKind::CustomCnn => build_custom_cnn(input, num_classes, width_multiplier),
    }
}

// ---------------------------------------------------------------------------
// Shape trace

/// How a trace row is labeled. A single conv+relu+pool block renders as
/// one `Sequential` row; runs of several convs keep per-conv rows with
/// the pool on its own row; dense+relu pairs are `Sequential`, the
/// classifier head is `Dense`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Input,
    Conv,
    MaxPool,
    Sequential,
    Dropout,
    Flatten,
    Dense,
    Activation,
}

impl RowKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowKind::Input => "input",
            RowKind::Conv => "conv",
            RowKind::MaxPool => "max_pool",
            RowKind::Sequential => "sequential",
            RowKind::Dropout => "dropout",
            RowKind::Flatten => "flatten",
            RowKind::Dense => "dense",
            RowKind::Activation => "activation",
        }
    }
}

impl fmt::Display for RowKind {
    fmt_as_str!();
}

/// One grouped row of the shape trace. Shapes omit the batch dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRow {
    pub kind: RowKind,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    /// Half-open range of layer indices this row covers (empty for the
    /// input row).
    pub layers: (usize, usize),
}

/// Propagates shapes through the spec, grouped into display rows.
/// Fails with the absolute index of the first layer that cannot accept
/// its input.
pub fn infer_shapes(spec: &NetworkSpec) -> Result<Vec<ShapeRow>, ModelError> {
    let mut shape = vec![1usize, spec.input[0], spec.input[1], spec.input[2]];
    let strip = |s: &[usize]| s[1..].to_vec();
    let mut rows = vec![ShapeRow {
        kind: RowKind::Input,
        input: strip(&shape),
        output: strip(&shape),
        layers: (0, 0),
    }];

    let layers = &spec.layers;
    let mut i = 0;
    while i < layers.len() {
        for (kind, end) in rows_at(layers, i) {
            let input = strip(&shape);
            for (offset, layer) in layers[i..end].iter().enumerate() {
                shape = output_shape(layer, &shape)
                    .map_err(|detail| ModelError::ShapeFlowBroken { layer: i + offset, detail })?;
            }
            rows.push(ShapeRow { kind, input, output: strip(&shape), layers: (i, end) });
            i = end;
        }
    }
    Ok(rows)
}

/// Rows covering the block that starts at layer `i`, as (kind,
/// exclusive end) segments with ascending ends. A whole conv run is
/// consumed at once: whether it collapses into a "sequential" row
/// depends on how many convs share the pool.
fn rows_at(layers: &[LayerSpec], i: usize) -> Vec<(RowKind, usize)> {
    match layers[i] {
        LayerSpec::Conv2d { .. } => {
            // Measure the run of conv(+relu) pairs starting here.
            let mut j = i;
            let mut conv_ends = Vec::new();
            while matches!(layers.get(j), Some(LayerSpec::Conv2d { .. })) {
                j += 1;
                if matches!(layers.get(j), Some(LayerSpec::Relu)) {
                    j += 1;
                }
                conv_ends.push(j);
            }
            let pooled = matches!(layers.get(j), Some(LayerSpec::MaxPool2d { .. }));
            if conv_ends.len() == 1 && pooled {
                return vec![(RowKind::Sequential, j + 1)];
            }
            let mut segs: Vec<(RowKind, usize)> =
                conv_ends.into_iter().map(|e| (RowKind::Conv, e)).collect();
            if pooled {
                segs.push((RowKind::MaxPool, j + 1));
            }
            segs
        }
        LayerSpec::MaxPool2d { .. } => vec![(RowKind::MaxPool, i + 1)],
        LayerSpec::Dropout { .. } => vec![(RowKind::Dropout, i + 1)],
        LayerSpec::Flatten => vec![(RowKind::Flatten, i + 1)],
        LayerSpec::Dense { .. } => match layers.get(i + 1) {
            Some(LayerSpec::Relu) => vec![(RowKind::Sequential, i + 2)],
            Some(LayerSpec::Sigmoid) | Some(LayerSpec::Softmax) => vec![(RowKind::Dense, i + 2)],
            _ => vec![(RowKind::Dense, i + 1)],
        },
        LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Softmax => {
            vec![(RowKind::Activation, i + 1)]
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    /// Named scalar metrics from the end of training (loss, accuracy,
    /// ...). A sorted map so serialization is stable.
    pub metrics: BTreeMap<String, f64>,
}

impl TrainingMeta {
    pub fn new(seed: u64) -> Self {
        TrainingMeta { seed, epochs: 0, metrics: BTreeMap::new() }
    }
}

/// A network bundled with its architecture description and provenance —
/// what checkpoints store.
#[derive(Debug)]
pub struct TrainedModel {
    pub spec: NetworkSpec,
    pub network: Network<f32>,
    pub meta: TrainingMeta,
}

impl TrainedModel {
    /// Fresh, untrained model with seeded weights.
    pub fn fresh(spec: NetworkSpec, seed: u64) -> Result<TrainedModel, ModelError> {
        let network = spec.build(seed)?;
        Ok(TrainedModel { spec, network, meta: TrainingMeta::new(seed) })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: NetworkSpec,
    meta: TrainingMeta,
}

/// Writes magic, a JSON architecture header, and the raw little-endian
/// 32-bit parameter payload. The file appears atomically: it is
/// assembled under a temporary name and renamed into place.
pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<(), ModelError> {
    let header = serde_json::to_vec(&CheckpointHeader {
        spec: model.spec.clone(),
        meta: model.meta.clone(),
    })
    .map_err(|e| ModelError::InvalidSpec(format!("unserializable header: {e}")))?;

    let params = model.network.flatten_params();
    let mut bytes =
        Vec::with_capacity(12 + header.len() + params.len() * 4);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for p in &params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint back into a ready-to-run model.
pub fn load_checkpoint(path: &Path) -> Result<TrainedModel, ModelError> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| ModelError::VersionMismatch { found: String::new() })?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::VersionMismatch {
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut len = [0u8; 4];
    f.read_exact(&mut len)?;
    let header_len = u32::from_le_bytes(len) as usize;
    let mut header = vec![0u8; header_len];
    f.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)
        .map_err(|e| ModelError::VersionMismatch { found: format!("bad header: {e}") })?;

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut network = header.spec.build(header.meta.seed)?;
    let expected = network.param_count();
    if payload.len() != expected * 4 {
        return Err(ModelError::PayloadLengthMismatch {
            expected,
            found: payload.len() / 4,
        });
    }
    let flat: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    network.load_flat(&flat)?;
    Ok(TrainedModel { spec: header.spec, meta: header.meta, network })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn custom_cnn_trace_matches_the_published_table() {
        let spec = build_custom_cnn([176, 208, 3], 4, 1.0).unwrap();
        let rows = infer_shapes(&spec).unwrap();
        let expected: [(RowKind, &[usize]); 18] = [
            (RowKind::Input, &[176, 208, 3]),
            (RowKind::Conv, &[176, 208, 16]),
            (RowKind::Conv, &[176, 208, 16]),
            (RowKind::MaxPool, &[88, 104, 16]),
            (RowKind::Sequential, &[44, 52, 32]),
            (RowKind::Sequential, &[22, 26, 64]),
            (RowKind::Sequential, &[11, 13, 128]),
            (RowKind::Dropout, &[11, 13, 128]),
            (RowKind::Conv, &[11, 13, 256]),
            (RowKind::Conv, &[11, 13, 256]),
            (RowKind::MaxPool, &[5, 6, 256]),
            (RowKind::Dropout, &[5, 6, 256]),
            (RowKind::Flatten, &[7680]),
            (RowKind::Sequential, &[512]),
            (RowKind::Sequential, &[128]),
            (RowKind::Sequential, &[64]),
            (RowKind::Sequential, &[32]),
            (RowKind::Dense, &[4]),
        ];
        assert_eq!(rows.len(), expected.len(), "row count");
        for (row, (kind, output)) in rows.iter().zip(&expected) {
            assert_eq!(row.kind, *kind, "row {row:?}");
            assert_eq!(row.output, *output, "row {row:?}");
        }
        // Rows chain: each input is the previous output.
        for pair in rows.windows(2) {
            assert_eq!(pair[1].input, pair[0].output);
        }
    }

    #[test]
    fn head_width_follows_num_classes() {
        let four = build_custom_cnn([176, 208, 3], 4, 1.0).unwrap();
        let two = build_custom_cnn([176, 208, 3], 2, 1.0).unwrap();
        let rows4 = infer_shapes(&four).unwrap();
        let rows2 = infer_shapes(&two).unwrap();
        assert_eq!(rows4.len(), rows2.len());
        for (a, b) in rows4.iter().zip(&rows2).take(rows4.len() - 1) {
            assert_eq!(a.output, b.output);
        }
        assert_eq!(rows2.last().unwrap().output, vec![2]);
    }

    #[test]
    fn vgg_structure_counts() {
        for wm in [1.0, 0.125] {
            let spec = build_vgg16([176, 208, 3], 2, wm).unwrap();
            let convs = spec
                .layers
                .iter()
                .filter(|l| matches!(l, LayerSpec::Conv2d { .. }))
                .count();
            let pools = spec
                .layers
                .iter()
                .filter(|l| matches!(l, LayerSpec::MaxPool2d { .. }))
                .count();
            assert_eq!(convs, 13, "conv count at multiplier {wm}");
            assert_eq!(pools, 5, "pool count at multiplier {wm}");
        }
        let eighth = build_vgg16([176, 208, 3], 2, 0.125).unwrap();
        let LayerSpec::Conv2d { out_channels, .. } = eighth.layers[0] else {
            panic!("first layer should be a conv");
        };
        assert_eq!(out_channels, 8);
        assert_eq!(eighth.loss(), LossKind::BinaryCrossEntropy);
    }

    #[test]
    fn vgg_needs_enough_spatial_room() {
        assert!(build_vgg16([44, 52, 3], 2, 0.125).is_ok());
        let err = build_vgg16([16, 16, 3], 2, 0.125).unwrap_err();
        assert!(matches!(err, ModelError::IncompatibleInput { name: ModelKind::Vgg16, .. }));
    }

    #[test]
    fn alexnet_structure_counts_and_minimum_input() {
        let spec = build_alexnet([176, 208, 3], 2, 1.0).unwrap();
        let convs: Vec<usize> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect();
        assert_eq!(convs, vec![96, 256, 384, 384, 256]);
        let denses = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Dense { .. }))
            .count();
        assert_eq!(denses, 3);

        let err = build_alexnet([95, 208, 3], 2, 1.0).unwrap_err();
        assert!(matches!(err, ModelError::IncompatibleInput { name: ModelKind::Alexnet, .. }));
    }

    #[test]
    fn desk_scale_alexnet_flattens_to_960() {
        let spec = build_alexnet([176, 208, 3], 2, 0.125).unwrap();
        let rows = infer_shapes(&spec).unwrap();
        let flat = rows.iter().find(|r| r.kind == RowKind::Flatten).unwrap();
        assert_eq!(flat.input, vec![5, 6, 32]);
        assert_eq!(flat.output, vec![960]);
    }

    #[test]
    fn all_builders_fit_the_desk_scale_inputs() {
        assert!(build_custom_cnn([176, 208, 3], 4, 1.0).is_ok());
        assert!(build_custom_cnn([44, 52, 3], 4, 0.125).is_ok());
        assert!(build_vgg16([176, 208, 3], 2, 1.0).is_ok());
        assert!(build_vgg16([44, 52, 3], 2, 0.125).is_ok());
        assert!(build_alexnet([176, 208, 3], 2, 0.125).is_ok());
    }

    #[test]
    fn empty_layer_list_traces_to_the_input_itself() {
        let spec = NetworkSpec {
            name: ModelKind::CustomCnn,
            input: [8, 8, 1],
            num_classes: 2,
            width_multiplier: 1.0,
            layers: vec![],
        };
        let rows = infer_shapes(&spec).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].kind, RowKind::Input);
        assert_eq!(rows[0].output, vec![8, 8, 1]);
    }

    #[test]
    fn conv_after_flatten_reports_the_offending_layer() {
        let spec = NetworkSpec {
            name: ModelKind::CustomCnn,
            input: [8, 8, 1],
            num_classes: 2,
            width_multiplier: 1.0,
            layers: vec![LayerSpec::Flatten, conv3(4)],
        };
        let err = infer_shapes(&spec).unwrap_err();
        assert!(matches!(err, ModelError::ShapeFlowBroken { layer: 1, .. }), "{err}");
    }

    #[test]
    fn parameter_count_is_stable_across_builds() {
        let a = build_custom_cnn([44, 52, 3], 4, 0.125).unwrap().build(1).unwrap();
        let b = build_custom_cnn([44, 52, 3], 4, 0.125).unwrap().build(2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert!(a.param_count() > 0);
    }

    #[test]
    fn bad_multiplier_and_class_count_are_rejected() {
        assert!(matches!(
            build_vgg16([176, 208, 3], 2, 0.0),
            Err(ModelError::InvalidSpec(_))
        ));
        assert!(matches!(
            build_vgg16([176, 208, 3], 2, 1.5),
            Err(ModelError::InvalidSpec(_))
        ));
        assert!(matches!(
            build_custom_cnn([176, 208, 3], 1, 1.0),
            Err(ModelError::InvalidSpec(_))
        ));
    }

    #[test]
    fn spec_survives_a_json_round_trip() {
        let spec = build_alexnet([176, 208, 3], 2, 0.25).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"alexnet\""));
        let back: NetworkSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = build_custom_cnn([44, 52, 3], 4, 0.125).unwrap();
        let mut model = TrainedModel::fresh(spec, 77).unwrap();
        model.meta.epochs = 3;
        model.meta.metrics.insert("train_loss".to_string(), 0.25);

        let x = Tensor::from_vec(
            &[2, 44, 52, 3],
            (0..2 * 44 * 52 * 3).map(|i| ((i * 31 + 7) % 97) as f32 * 0.01).collect(),
        )
        .unwrap();
        let before = model.network.predict(&x).unwrap();

        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta, model.meta);
        assert_eq!(loaded.spec, model.spec);
        assert_eq!(loaded.network.flatten_params(), model.network.flatten_params());
        let after = loaded.network.predict(&x).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = build_custom_cnn([44, 52, 3], 4, 0.125).unwrap();
        let model = TrainedModel::fresh(spec, 5).unwrap();
        save_checkpoint(&model, &path).unwrap();

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, ModelError::PayloadLengthMismatch { .. }), "{err}");
    }

    #[test]
    fn corrupted_magic_is_a_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = build_custom_cnn([44, 52, 3], 4, 0.125).unwrap();
        let model = TrainedModel::fresh(spec, 5).unwrap();
        save_checkpoint(&model, &path).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[7] = b'9';
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, ModelError::VersionMismatch { .. }), "{err}");
    }

    #[test]
    fn no_temp_file_lingers_after_a_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = build_custom_cnn([44, 52, 3], 4, 0.125).unwrap();
        let model = TrainedModel::fresh(spec, 5).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["model.ckpt".to_string()]);
    }
}
