//! The five-module synergic model: a dilated residual backbone, a lightweight
//! segmentation decoder, an additive fusion bridge, and single-neuron
//! regression/classification heads. The forward pass exposes every
//! intermediate the CAM machinery consumes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, NodeId, Scalar, Tensor};
use crate::data_model::NodulePatch;
use crate::util::rng_from;
use crate::{Error, Result};

/// Shape hyperparameters of the backbone and its attached modules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Input voxels per axis; must be divisible by 4.
    pub side: usize,
    /// (head, block1, block2, block3) channel widths.
    pub channels: [usize; 4],
    /// Decoder widths of the two channel-reduction convs.
    pub seg_channels: [usize; 2],
    /// Group-norm group count (capped per layer to a divisor of the width).
    pub groups: usize,
    /// Dilation of the three residual blocks.
    pub dilations: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            side: 64,
            channels: [64, 64, 128, 256],
            seg_channels: [32, 16],
            groups: 8,
            dilations: [1, 2, 4],
        }
    }
}

impl BackboneConfig {
    pub fn with_side(side: usize) -> Self {
        BackboneConfig {
            side,
            ..Default::default()
        }
    }

    /// Shrink every width by `factor` (for desk-scale tests).
    pub fn scaled_down(side: usize, factor: usize) -> Self {
        let d = BackboneConfig::default();
        BackboneConfig {
            side,
            channels: d.channels.map(|c| (c / factor).max(2)),
            seg_channels: d.seg_channels.map(|c| (c / factor).max(2)),
            groups: d.groups.min((d.channels[0] / factor).max(1)),
            dilations: d.dilations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side % 4 != 0 || self.side < 8 {
            return Err(Error::Config(format!(
                "side must be a multiple of 4 and >= 8, got {}",
                self.side
            )));
        }
        if self.channels.iter().chain(self.seg_channels.iter()).any(|c| *c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.dilations[0] != 1 {
            return Err(Error::Config("block 1 must be undilated".into()));
        }
        // Feature maps keep the dilated convs inside the grid.
        let fs = self.side / 4;
        let max_dil = self.dilations.iter().copied().max().unwrap();
        if fs < max_dil {
            return Err(Error::Config(format!(
                "feature side {fs} too small for dilation {max_dil}"
            )));
        }
        Ok(())
    }

    /// Side length of the backbone output (overall reduction is exactly 4).
    pub fn feature_side(&self) -> usize {
        self.side / 4
    }

    /// Fused feature channel count seen by GAP, CAM and the heads.
    pub fn fused_channels(&self) -> usize {
        self.channels[3]
    }

    /// Largest divisor of `c` that is at most the configured group count.
    fn groups_for(&self, c: usize) -> usize {
        let mut g = self.groups.min(c);
        while c % g != 0 {
            g -= 1;
        }
        g
    }
}

/// Plain-value outputs of one forward pass in eval mode.
#[derive(Debug, Clone)]
pub struct ModelOutputs<T: Scalar> {
    /// Fused post-ReLU feature maps f_k: [K, L, W, H].
    pub features: ArrayD<T>,
    /// Per-channel spatial means F_k (GAP of `features`).
    pub pooled: Vec<T>,
    /// Raw segmentation logits [L, W, H].
    pub seg_logits: ArrayD<T>,
    /// Sigmoid of the logits; the SEM map.
    pub seg_prob: ArrayD<T>,
    /// Regression head output (no activation).
    pub reg_score: f64,
    /// Classifier pre-sigmoid logit S.
    pub cls_logit: f64,
    /// Malignant probability P = sigmoid(S).
    pub cls_prob: f64,
    /// Classifier weights omega_k at forward time.
    pub cnet_weights: Vec<T>,
    pub cnet_bias: f64,
}

/// Graph handles produced by [`Model::forward`]; everything needed to attach
/// losses and run backward.
pub struct ForwardPass {
    pub features: NodeId,
    pub pooled: NodeId,
    pub seg_logits: NodeId,
    /// SEM reshaped to [L, W, H].
    pub seg_prob: NodeId,
    pub reg_score: NodeId,
    pub cls_logit: NodeId,
    pub cls_prob: NodeId,
    pub cnet_weights: NodeId,
    pub cnet_bias: NodeId,
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

pub struct Model<T: Scalar> {
    pub config: BackboneConfig,
    pub params: Vec<Param<T>>,
}

// Parameter layout indices are resolved by name at build time.
struct ConvLayer {
    w: usize,
    bias: Option<usize>,
    spec: ConvSpec,
    gn: Option<(usize, usize, usize)>, // gamma, beta, groups
}

impl<T: Scalar> Model<T> {
    /// Random initialization (He-normal convs, zero biases, unit gains).
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let mut params: Vec<Param<T>> = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize, params: &mut Vec<Param<T>>| {
            let std = (2.0 / (cin * k * k * k) as f64).sqrt();
            let value = Tensor::from_shape_fn(IxDyn(&[cout, cin, k, k, k]), |_| {
                T::from_f64(normal.sample(&mut rng) * std)
            });
            params.push(Param {
                name: name.to_string(),
                value,
            });
        };
        let gn = |name: &str, c: usize, params: &mut Vec<Param<T>>| {
            params.push(Param {
                name: format!("{name}.gamma"),
                value: Tensor::from_elem(IxDyn(&[c]), T::one()),
            });
            params.push(Param {
                name: format!("{name}.beta"),
                value: Tensor::zeros(IxDyn(&[c])),
            });
        };
        let [ch, c1, c2, c3] = config.channels;
        let [s1, s2] = config.seg_channels;

        conv("head.conv", ch, 2, 7, &mut params);
        gn("head.gn", ch, &mut params);

        let blocks = [(c1, ch), (c2, c1), (c3, c2)];
        for (i, (cout, cin)) in blocks.into_iter().enumerate() {
            let b = format!("block{}", i + 1);
            conv(&format!("{b}.conv1"), cout, cin, 3, &mut params);
            gn(&format!("{b}.gn1"), cout, &mut params);
            conv(&format!("{b}.conv2"), cout, cout, 3, &mut params);
            gn(&format!("{b}.gn2"), cout, &mut params);
            conv(&format!("{b}.proj"), cout, cin, 1, &mut params);
            gn(&format!("{b}.gnp"), cout, &mut params);
        }

        conv("seg.conv1", s1, c3, 3, &mut params);
        gn("seg.gn1", s1, &mut params);
        conv("seg.conv2", s2, s1, 3, &mut params);
        gn("seg.gn2", s2, &mut params);
        conv("seg.out", 1, s2, 1, &mut params);
        params.push(Param {
            name: "seg.out.bias".into(),
            value: Tensor::zeros(IxDyn(&[1])),
        });

        conv("fnet.conv", c3, 1, 3, &mut params);

        for head in ["rnet", "cnet"] {
            let std = 1.0 / (c3 as f64).sqrt();
            let value = Tensor::from_shape_fn(IxDyn(&[c3]), |_| {
                T::from_f64(normal.sample(&mut rng) * std)
            });
            params.push(Param {
                name: format!("{head}.w"),
                value,
            });
            params.push(Param {
                name: format!("{head}.bias"),
                value: Tensor::zeros(IxDyn(&[])),
            });
        }

        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn conv_layer(&self, conv: &str, gn: Option<&str>, spec: ConvSpec, bias: Option<&str>) -> ConvLayer {
        ConvLayer {
            w: self.index(conv),
            bias: bias.map(|b| self.index(b)),
            spec,
            gn: gn.map(|g| {
                let c = self.params[self.index(&format!("{g}.gamma"))].value.len();
                (
                    self.index(&format!("{g}.gamma")),
                    self.index(&format!("{g}.beta")),
                    self.config.groups_for(c),
                )
            }),
        }
    }

    /// Insert all parameters as trainable graph leaves. Reuse the returned ids
    /// to share weights across several forwards in one graph.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    fn apply_conv(
        &self,
        g: &mut Graph<T>,
        ids: &[NodeId],
        x: NodeId,
        layer: &ConvLayer,
        relu: bool,
    ) -> NodeId {
        let mut y = g.conv3d(x, ids[layer.w], layer.bias.map(|b| ids[b]), layer.spec);
        if let Some((gamma, beta, groups)) = layer.gn {
            y = g.group_norm(y, ids[gamma], ids[beta], groups);
        }
        if relu {
            y = g.relu(y);
        }
        y
    }

    /// Feature extractor: conv head (7x7x7, stride 2) plus three residual
    /// blocks. Block 1 halves the resolution; blocks 2 and 3 keep it and
    /// dilate instead. The block-3 output is returned pre-ReLU.
    pub fn backbone(&self, g: &mut Graph<T>, ids: &[NodeId], patch: NodeId) -> NodeId {
        let cfg = &self.config;
        let [ch, c1, c2, c3] = cfg.channels;
        let head = self.conv_layer(
            "head.conv",
            Some("head.gn"),
            ConvSpec {
                cin: 2,
                cout: ch,
                kernel: 7,
                stride: 2,
                pad: 3,
                dilation: 1,
            },
            None,
        );
        let mut x = self.apply_conv(g, ids, patch, &head, true);

        let block_specs = [
            (ch, c1, 2usize, cfg.dilations[0]),
            (c1, c2, 1, cfg.dilations[1]),
            (c2, c3, 1, cfg.dilations[2]),
        ];
        for (i, (cin, cout, stride, dil)) in block_specs.into_iter().enumerate() {
            let b = format!("block{}", i + 1);
            let conv1 = self.conv_layer(
                &format!("{b}.conv1"),
                Some(&format!("{b}.gn1")),
                ConvSpec {
                    cin,
                    cout,
                    kernel: 3,
                    stride,
                    pad: dil,
                    dilation: dil,
                },
                None,
            );
            let conv2 = self.conv_layer(
                &format!("{b}.conv2"),
                Some(&format!("{b}.gn2")),
                ConvSpec {
                    cin: cout,
                    cout,
                    kernel: 3,
                    stride: 1,
                    pad: dil,
                    dilation: dil,
                },
                None,
            );
            let proj = self.conv_layer(
                &format!("{b}.proj"),
                Some(&format!("{b}.gnp")),
                ConvSpec {
                    cin,
                    cout,
                    kernel: 1,
                    stride,
                    pad: 0,
                    dilation: 1,
                },
                None,
            );
            let h = self.apply_conv(g, ids, x, &conv1, true);
            let h = self.apply_conv(g, ids, h, &conv2, false);
            let shortcut = self.apply_conv(g, ids, x, &proj, false);
            let sum = g.add(h, shortcut);
            // The last convolution of the backbone carries no ReLU; the
            // activation happens on entry to SegNet and after FNet fusion.
            x = if i < 2 { g.relu(sum) } else { sum };
        }
        x
    }

    /// Lightweight decoder: ReLU on the backbone features, two 3x3x3 channel
    /// reductions, then a 1x1x1 conv to single-channel logits. No upsampling,
    /// so the output resolution equals the feature resolution.
    pub fn segnet(&self, g: &mut Graph<T>, ids: &[NodeId], backbone_out: NodeId) -> NodeId {
        let cfg = &self.config;
        let [s1, s2] = cfg.seg_channels;
        let c3 = cfg.channels[3];
        let x = g.relu(backbone_out);
        let conv1 = self.conv_layer(
            "seg.conv1",
            Some("seg.gn1"),
            ConvSpec {
                cin: c3,
                cout: s1,
                kernel: 3,
                stride: 1,
                pad: 1,
                dilation: 1,
            },
            None,
        );
        let conv2 = self.conv_layer(
            "seg.conv2",
            Some("seg.gn2"),
            ConvSpec {
                cin: s1,
                cout: s2,
                kernel: 3,
                stride: 1,
                pad: 1,
                dilation: 1,
            },
            None,
        );
        let out = self.conv_layer(
            "seg.out",
            None,
            ConvSpec {
                cin: s2,
                cout: 1,
                kernel: 1,
                stride: 1,
                pad: 0,
                dilation: 1,
            },
            Some("seg.out.bias"),
        );
        let x = self.apply_conv(g, ids, x, &conv1, true);
        let x = self.apply_conv(g, ids, x, &conv2, true);
        self.apply_conv(g, ids, x, &out, false)
    }

    /// Fusion bridge: expand the 1-channel segmentation logits back to the
    /// backbone width, add, ReLU.
    pub fn fnet(
        &self,
        g: &mut Graph<T>,
        ids: &[NodeId],
        backbone_out: NodeId,
        seg_logits: NodeId,
    ) -> NodeId {
        let c3 = self.config.channels[3];
        let conv = self.conv_layer(
            "fnet.conv",
            None,
            ConvSpec {
                cin: 1,
                cout: c3,
                kernel: 3,
                stride: 1,
                pad: 1,
                dilation: 1,
            },
            None,
        );
        let seg_feat = self.apply_conv(g, ids, seg_logits, &conv, false);
        let sum = g.add(backbone_out, seg_feat);
        g.relu(sum)
    }

    /// GAP plus the two single-neuron heads.
    pub fn heads(
        &self,
        g: &mut Graph<T>,
        ids: &[NodeId],
        fused: NodeId,
    ) -> (NodeId, NodeId, NodeId, NodeId) {
        let pooled = g.gap(fused);
        let rw = ids[self.index("rnet.w")];
        let rb = ids[self.index("rnet.bias")];
        let cw = ids[self.index("cnet.w")];
        let cb = ids[self.index("cnet.bias")];
        let rdot = g.dot(rw, pooled);
        let reg_score = g.add(rdot, rb);
        let cdot = g.dot(cw, pooled);
        let cls_logit = g.add(cdot, cb);
        let cls_prob = g.sigmoid(cls_logit);
        (pooled, reg_score, cls_logit, cls_prob)
    }

    /// Full forward pass. `ids` must come from [`Model::bind`] on the same
    /// graph; pass the same ids again to share weights between streams.
    pub fn forward(&self, g: &mut Graph<T>, ids: &[NodeId], patch: &NodulePatch) -> ForwardPass {
        let input = patch_tensor::<T>(patch);
        let x = g.constant(input);
        let backbone_out = self.backbone(g, ids, x);
        let seg_logits = self.segnet(g, ids, backbone_out);
        let fused = self.fnet(g, ids, backbone_out, seg_logits);
        let (pooled, reg_score, cls_logit, cls_prob) = self.heads(g, ids, fused);
        let spatial: Vec<usize> = g.value(seg_logits).shape()[1..].to_vec();
        let seg3 = g.reshape(seg_logits, &spatial);
        let seg_prob = g.sigmoid(seg3);
        ForwardPass {
            features: fused,
            pooled,
            seg_logits: seg3,
            seg_prob,
            reg_score,
            cls_logit,
            cls_prob,
            cnet_weights: ids[self.index("cnet.w")],
            cnet_bias: ids[self.index("cnet.bias")],
        }
    }

    /// Eval-mode forward returning plain values.
    pub fn infer(&self, patch: &NodulePatch) -> ModelOutputs<T> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g);
        let fp = self.forward(&mut g, &ids, patch);
        ModelOutputs {
            features: g.value(fp.features).clone(),
            pooled: g.value(fp.pooled).iter().copied().collect(),
            seg_logits: g.value(fp.seg_logits).clone(),
            seg_prob: g.value(fp.seg_prob).clone(),
            reg_score: g.scalar_f64(fp.reg_score),
            cls_logit: g.scalar_f64(fp.cls_logit),
            cls_prob: g.scalar_f64(fp.cls_prob),
            cnet_weights: g.value(fp.cnet_weights).iter().copied().collect(),
            cnet_bias: g.scalar_f64(fp.cnet_bias),
        }
    }

    /// Copy updated values back from optimizer-owned tensors.
    pub fn set_values(&mut self, values: Vec<Tensor<T>>) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }
}

/// Convert a patch into the network input tensor [2, D, H, W].
pub fn patch_tensor<T: Scalar>(patch: &NodulePatch) -> Tensor<T> {
    let data: Vec<T> = patch
        .data
        .as_standard_layout()
        .iter()
        .map(|v| T::from_f64(f64::from(*v)))
        .collect();
    Tensor::from_shape_vec(IxDyn(patch.data.shape()), data).unwrap()
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON header (config + tensor directory) followed by raw
// little-endian payloads; reload is bit-exact.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"SYNCKPT1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dtype: String,
    config: BackboneConfig,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    let header = CheckpointHeader {
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        tensors: model
            .params
            .iter()
            .map(|p| TensorInfo {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&header_json).map_err(io)?;
    for p in &model.params {
        if T::DTYPE == "f32" {
            for v in p.value.iter() {
                w.write_all(&(v.into_f64() as f32).to_le_bytes()).map_err(io)?;
            }
        } else {
            for v in p.value.iter() {
                w.write_all(&v.into_f64().to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(io)?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes).map_err(io)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&hbytes).map_err(|e| Error::Format(e.to_string()))?;
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        if header.dtype == "f32" {
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(io)?;
                data.push(T::from_f64(f64::from(f32::from_le_bytes(buf))));
            }
        } else {
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(io)?;
                data.push(T::from_f64(f64::from_le_bytes(buf)));
            }
        }
        params.push(Param {
            name: t.name.clone(),
            value: Tensor::from_shape_vec(IxDyn(&t.shape), data)
                .map_err(|e| Error::Format(e.to_string()))?,
        });
    }
    Ok(Model {
        config: header.config,
        params,
    })
}
