//! Model and target files on top of the tensor [`Container`].
//!
//! Model manifests are TOML with a `form` key (`"train"` or `"fused"`), the
//! `[arch]` table and the `[config]` table. Tensor names follow the module
//! path, e.g. `stage2.block0.conv1.k1x3` or `head.wh.out.kernel`; biases are
//! rank-1 tensors.

use serde::{Deserialize, Serialize};

use crate::blocks::{
    block_stride, AcBlock, AcBlockParams, Architecture, ConvLayer, HeadParams, ModelParams,
    ResidualParams, SeParams,
};
use crate::codec::Targets;
use crate::config::ModelConfig;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightForm {
    Train,
    Fused,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    form: WeightForm,
    arch: Architecture,
    config: ModelConfig,
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("biases are never empty")
}

fn push_conv(c: &mut Container, prefix: &str, layer: &ConvLayer) {
    c.push(format!("{prefix}.kernel"), layer.kernel.clone());
    c.push(format!("{prefix}.bias"), vector(&layer.bias));
}

fn push_block(c: &mut Container, prefix: &str, block: &AcBlock) {
    match block {
        AcBlock::Train(p) => {
            c.push(format!("{prefix}.k3x3"), p.k3x3.clone());
            c.push(format!("{prefix}.k1x3"), p.k1x3.clone());
            c.push(format!("{prefix}.k3x1"), p.k3x1.clone());
            c.push(format!("{prefix}.b3x3"), vector(&p.b3x3));
            c.push(format!("{prefix}.b1x3"), vector(&p.b1x3));
            c.push(format!("{prefix}.b3x1"), vector(&p.b3x1));
        }
        AcBlock::Fused(f) => push_conv(c, &format!("{prefix}.fused"), f),
    }
}

/// Serializes a model and the config it was built for.
pub fn model_to_container(params: &ModelParams, config: &ModelConfig) -> Container {
    let form = if params.is_fused() {
        WeightForm::Fused
    } else {
        WeightForm::Train
    };
    let manifest = ModelManifest {
        form,
        arch: params.arch.clone(),
        config: config.clone(),
    };
    let mut c = Container::new(toml::to_string(&manifest).expect("manifest serializes"));
    push_conv(&mut c, "stem", &params.stem);
    for (s, stage) in params.stages.iter().enumerate() {
        for (b, block) in stage.iter().enumerate() {
            let prefix = format!("stage{}.block{b}", s + 1);
            push_block(&mut c, &format!("{prefix}.conv1"), &block.first);
            push_block(&mut c, &format!("{prefix}.conv2"), &block.second);
            if let Some(p) = &block.projection {
                push_conv(&mut c, &format!("{prefix}.proj"), p);
            }
        }
    }
    c.push("fpa.se.reduce", params.se.reduce.clone());
    c.push("fpa.se.reduce_bias", vector(&params.se.reduce_bias));
    c.push("fpa.se.expand", params.se.expand.clone());
    c.push("fpa.se.expand_bias", vector(&params.se.expand_bias));
    push_conv(&mut c, "fpa.reduce", &params.reduce);
    for (name, head) in [("heatmap", &params.heatmap), ("wh", &params.wh), ("offset", &params.offset)] {
        push_conv(&mut c, &format!("head.{name}.hidden"), &head.hidden);
        push_conv(&mut c, &format!("head.{name}.out"), &head.out);
    }
    c
}

struct Reader<'a> {
    c: &'a Container,
}

impl Reader<'_> {
    fn tensor(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.c.get(name)?;
        if t.shape() != shape {
            return Err(Error::Container(format!(
                "tensor `{name}` has shape {:?}, architecture expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    }

    fn bias(&self, name: &str, n: usize) -> Result<Vec<f64>> {
        Ok(self.tensor(name, &[n])?.into_data())
    }

    fn conv(&self, prefix: &str, shape: [usize; 4]) -> Result<ConvLayer> {
        Ok(ConvLayer {
            kernel: self.tensor(&format!("{prefix}.kernel"), &shape)?,
            bias: self.bias(&format!("{prefix}.bias"), shape[0])?,
        })
    }

    fn block(&self, prefix: &str, form: WeightForm, cout: usize, cin: usize) -> Result<AcBlock> {
        Ok(match form {
            WeightForm::Fused => AcBlock::Fused(self.conv(&format!("{prefix}.fused"), [cout, cin, 3, 3])?),
            WeightForm::Train => AcBlock::Train(AcBlockParams::new(
                self.tensor(&format!("{prefix}.k3x3"), &[cout, cin, 3, 3])?,
                self.tensor(&format!("{prefix}.k1x3"), &[cout, cin, 1, 3])?,
                self.tensor(&format!("{prefix}.k3x1"), &[cout, cin, 3, 1])?,
                self.bias(&format!("{prefix}.b3x3"), cout)?,
                self.bias(&format!("{prefix}.b1x3"), cout)?,
                self.bias(&format!("{prefix}.b3x1"), cout)?,
            )?),
        })
    }
}

/// Rebuilds a model from a container written by [`model_to_container`].
pub fn model_from_container(c: &Container) -> Result<(ModelParams, ModelConfig)> {
    let manifest: ModelManifest =
        toml::from_str(&c.manifest).map_err(|e| Error::Container(format!("manifest: {e}")))?;
    let arch = manifest.arch;
    arch.validate()?;
    manifest.config.validate()?;
    let r = Reader { c };
    let form = manifest.form;

    let stem = r.conv("stem", [arch.widths[0], arch.in_channels, 3, 3])?;
    let mut stages = Vec::with_capacity(4);
    let mut cin = arch.widths[0];
    for (s, &width) in arch.widths.iter().enumerate() {
        let mut blocks = Vec::with_capacity(2);
        for b in 0..2 {
            let prefix = format!("stage{}.block{b}", s + 1);
            let stride = block_stride(s, b);
            let projection = if stride != 1 || cin != width {
                Some(r.conv(&format!("{prefix}.proj"), [width, cin, 1, 1])?)
            } else {
                None
            };
            blocks.push(ResidualParams {
                first: r.block(&format!("{prefix}.conv1"), form, width, cin)?,
                second: r.block(&format!("{prefix}.conv2"), form, width, width)?,
                projection,
                stride,
            });
            cin = width;
        }
        stages.push(blocks);
    }
    let pyramid = arch.pyramid_channels();
    let mid = pyramid / arch.se_reduction;
    let se = SeParams {
        reduce: r.tensor("fpa.se.reduce", &[mid, pyramid])?,
        reduce_bias: r.bias("fpa.se.reduce_bias", mid)?,
        expand: r.tensor("fpa.se.expand", &[pyramid, mid])?,
        expand_bias: r.bias("fpa.se.expand_bias", pyramid)?,
    };
    let reduce = r.conv("fpa.reduce", [arch.fused_width, pyramid, 1, 1])?;
    let head = |name: &str, cout: usize| -> Result<HeadParams> {
        Ok(HeadParams {
            hidden: r.conv(&format!("head.{name}.hidden"), [arch.head_width, arch.fused_width, 3, 3])?,
            out: r.conv(&format!("head.{name}.out"), [cout, arch.head_width, 1, 1])?,
        })
    };
    let params = ModelParams {
        heatmap: head("heatmap", arch.num_classes)?,
        wh: head("wh", 2)?,
        offset: head("offset", 2)?,
        arch,
        stem,
        stages,
        se,
        reduce,
    };
    Ok((params, manifest.config))
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetsManifest {
    num_objects: usize,
    collisions: usize,
    #[serde(rename = "R")]
    output_stride: usize,
}

/// Tensors `heatmap`, `wh`, `offset`, `pos_mask`; counts in the manifest.
pub fn targets_to_container(t: &Targets, output_stride: usize) -> Container {
    let manifest = TargetsManifest {
        num_objects: t.num_objects,
        collisions: t.collisions,
        output_stride,
    };
    let mut c = Container::new(toml::to_string(&manifest).expect("manifest serializes"));
    c.push("heatmap", t.heatmap.clone());
    c.push("wh", t.wh.clone());
    c.push("offset", t.offset.clone());
    c.push("pos_mask", t.pos_mask.clone());
    c
}

pub fn targets_from_container(c: &Container) -> Result<Targets> {
    let m: TargetsManifest =
        toml::from_str(&c.manifest).map_err(|e| Error::Container(format!("manifest: {e}")))?;
    Ok(Targets {
        heatmap: c.get("heatmap")?.clone(),
        wh: c.get("wh")?.clone(),
        offset: c.get("offset")?.clone(),
        pos_mask: c.get("pos_mask")?.clone(),
        num_objects: m.num_objects,
        collisions: m.collisions,
    })
}
