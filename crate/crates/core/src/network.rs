//! Backbone `f`, conv1×1 heads `g`/`g′`, and the approximate inverse `h`.
//!
//! The backbone is a small residual network: an initial conv, then three
//! stages of residual blocks where stages 2 and 3 downsample with stride 2.
//! Heads are 1×1 convolutions applied to the feature map before global
//! average pooling, so the head output keeps a spatial logit map that the
//! inverse head maps back to feature space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag};
use crate::tensor::{he_init, GroupId, Padding, Param, ParamSet, ParamVars, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// Input extents `[height, width, channels]`.
    pub input: [usize; 3],
    pub init_conv: ConvSpec,
    pub stages: [StageSpec; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Conv1x1,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub classes: usize,
    #[serde(default)]
    pub kind: HeadKind,
}

/// 3×3 convolutions applied in sequence to the logit map, followed by a
/// single ReLU. The last width is the reconstructed feature depth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseSpec {
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_head: Option<HeadSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inverse: Option<InverseSpec>,
}

impl BackboneSpec {
    /// Table-1 style layout scaled down: one block per stage.
    pub fn desk(input: [usize; 3], widths: [usize; 3]) -> Self {
        BackboneSpec {
            input,
            init_conv: ConvSpec { kernel: 3, width: widths[0] },
            stages: widths.map(|width| StageSpec { blocks: 1, width }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("backbone: {m}")));
        if self.input.contains(&0) {
            return bad(format!("input extents {:?} must be positive", self.input));
        }
        if !matches!(self.init_conv.kernel, 1 | 3) || self.init_conv.width == 0 {
            return bad("initial conv needs kernel 1 or 3 and a positive width".into());
        }
        if self.stages.iter().any(|s| s.blocks == 0 || s.width == 0) {
            return bad("every stage needs at least one block and a positive width".into());
        }
        if self.stages.windows(2).any(|w| w[1].width < w[0].width) {
            return bad("stage widths must be non-decreasing".into());
        }
        Ok(())
    }

    /// Shape of the pre-pooling feature map.
    pub fn feature_shape(&self) -> [usize; 3] {
        let [h, w, _] = self.input;
        [h.div_ceil(4), w.div_ceil(4), self.stages[2].width]
    }

    /// Closed-form parameter count of the backbone.
    pub fn parameter_count(&self) -> usize {
        let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
        let mut n = conv(self.init_conv.kernel, self.input[2], self.init_conv.width);
        let mut cin = self.init_conv.width;
        for (si, s) in self.stages.iter().enumerate() {
            for bi in 0..s.blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                n += conv(3, cin, s.width) + conv(3, s.width, s.width);
                if stride != 1 || cin != s.width {
                    n += conv(1, cin, s.width);
                }
                cin = s.width;
            }
        }
        n
    }
}

fn group_code(g: GroupId) -> u64 {
    match g {
        GroupId::Shared => 1,
        GroupId::NewHead => 2,
        GroupId::AuxHead => 3,
        GroupId::OldHead(i) => 100 + i as u64,
        GroupId::Inverse => 4,
    }
}

struct ParamBuilder<'a, T> {
    seed: u64,
    group: GroupId,
    out: &'a mut Vec<Param<T>>,
}

impl<T: Real> ParamBuilder<'_, T> {
    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Result<()> {
        let s = derive_seed(self.seed, &[tag::INIT, group_code(self.group), self.out.len() as u64]);
        self.out.push(Param { name: format!("{name}.w"), tensor: he_init(vec![k, k, cin, cout], k * k * cin, s)? });
        self.out.push(Param { name: format!("{name}.b"), tensor: Tensor::zeros(vec![cout])? });
        Ok(())
    }

    /// Zero kernel, so a residual block starts as its shortcut.
    fn zero_conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Result<()> {
        self.out.push(Param { name: format!("{name}.w"), tensor: Tensor::zeros(vec![k, k, cin, cout])? });
        self.out.push(Param { name: format!("{name}.b"), tensor: Tensor::zeros(vec![cout])? });
        Ok(())
    }
}

/// Stateless forward definitions for a [`NetworkSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.backbone.validate()?;
        for h in std::iter::once(&spec.head).chain(&spec.aux_head) {
            if h.classes < 2 {
                return Err(Error::Validation("heads need at least two classes".into()));
            }
        }
        if let Some(inv) = &spec.inverse {
            let c_feat = spec.backbone.feature_shape()[2];
            match inv.widths.last() {
                Some(&last) if last == c_feat && inv.widths.iter().all(|&w| w > 0) => {}
                _ => {
                    return Err(Error::shape(
                        "build_network",
                        format!("inverse widths {:?} must end at the feature depth {c_feat}", inv.widths),
                    ))
                }
            }
        }
        Ok(Network { spec })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        self.spec.backbone.feature_shape()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.backbone.input
    }

    pub fn classes(&self) -> usize {
        self.spec.head.classes
    }

    pub fn has_inverse(&self) -> bool {
        self.spec.inverse.is_some()
    }

    pub fn backbone_params<T: Real>(&self, seed: u64) -> Result<Vec<Param<T>>> {
        let bb = &self.spec.backbone;
        let mut out = Vec::new();
        let mut b = ParamBuilder { seed, group: GroupId::Shared, out: &mut out };
        b.conv("init", bb.init_conv.kernel, bb.input[2], bb.init_conv.width)?;
        let mut cin = bb.init_conv.width;
        for (si, s) in bb.stages.iter().enumerate() {
            for bi in 0..s.blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let p = format!("s{}b{bi}", si + 1);
                b.conv(&format!("{p}.c1"), 3, cin, s.width)?;
                b.zero_conv(&format!("{p}.c2"), 3, s.width, s.width)?;
                if stride != 1 || cin != s.width {
                    b.conv(&format!("{p}.proj"), 1, cin, s.width)?;
                }
                cin = s.width;
            }
        }
        Ok(out)
    }

    pub fn head_params<T: Real>(&self, group: GroupId, classes: usize, seed: u64) -> Result<Vec<Param<T>>> {
        let mut out = Vec::new();
        ParamBuilder { seed, group, out: &mut out }.conv("head", 1, self.feature_shape()[2], classes)?;
        Ok(out)
    }

    pub fn inverse_params<T: Real>(&self, seed: u64) -> Result<Vec<Param<T>>> {
        let inv = self.spec.inverse.as_ref().ok_or_else(|| Error::MissingGroup("inverse spec".into()))?;
        let mut out = Vec::new();
        let mut b = ParamBuilder { seed, group: GroupId::Inverse, out: &mut out };
        let mut cin = self.classes();
        for (i, &w) in inv.widths.iter().enumerate() {
            b.conv(&format!("l{i}"), 3, cin, w)?;
            cin = w;
        }
        Ok(out)
    }

    /// Fresh stage-1 parameters: shared, new head, the auxiliary head when
    /// configured, and the inverse head when requested.
    pub fn init_params<T: Real>(&self, seed: u64, with_inverse: bool) -> Result<ParamSet<T>> {
        let mut ps = ParamSet::new();
        ps.insert_group(GroupId::Shared, self.backbone_params(seed)?)?;
        ps.insert_group(GroupId::NewHead, self.head_params(GroupId::NewHead, self.classes(), seed)?)?;
        if let Some(aux) = &self.spec.aux_head {
            ps.insert_group(GroupId::AuxHead, self.head_params(GroupId::AuxHead, aux.classes, seed)?)?;
        }
        if with_inverse {
            ps.insert_group(GroupId::Inverse, self.inverse_params(seed)?)?;
        }
        Ok(ps)
    }

    /// Pre-pooling feature map `z3d` for a `[batch, h, w, c]` input.
    pub fn backbone_forward<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        let bb = &self.spec.backbone;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != bb.input {
            return Err(Error::shape("backbone_forward", format!("input {shape:?}, expected [_, {:?}]", bb.input)));
        }
        let mut idx = 0;
        let mut conv = |tape: &mut Tape<T>, x: Var, stride: usize| -> Result<Var> {
            let w = vars.get(GroupId::Shared, idx)?;
            let b = vars.get(GroupId::Shared, idx + 1)?;
            idx += 2;
            tape.conv2d(x, w, Some(b), stride, Padding::Same)
        };
        let mut h = conv(tape, x, 1)?;
        h = tape.relu(h)?;
        let mut cin = bb.init_conv.width;
        for (si, s) in bb.stages.iter().enumerate() {
            for bi in 0..s.blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let a = conv(tape, h, stride)?;
                let a = tape.relu(a)?;
                let a = conv(tape, a, 1)?;
                let shortcut = if stride != 1 || cin != s.width { conv(tape, h, stride)? } else { h };
                let sum = tape.add(a, shortcut)?;
                h = tape.relu(sum)?;
                cin = s.width;
            }
        }
        Ok(h)
    }

    /// `(logit_map, logits)` with `logits = avgpool(conv1×1(z3d))`.
    pub fn head_logits<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, head: GroupId, z: Var) -> Result<(Var, Var)> {
        let w = vars.get(head, 0)?;
        let b = vars.get(head, 1)?;
        let map = tape.conv2d(z, w, Some(b), 1, Padding::Explicit(0))?;
        let logits = tape.global_avgpool(map)?;
        Ok((map, logits))
    }

    /// Reconstructed feature map `h(logit_map)`.
    pub fn inverse_forward<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, logit_map: Var) -> Result<Var> {
        let inv = self.spec.inverse.as_ref().ok_or_else(|| Error::MissingGroup("inverse spec".into()))?;
        let [fh, fw, _] = self.feature_shape();
        let shape = tape.shape(logit_map);
        let spatial_ok = match *shape {
            [_, h, w, _] | [h, w, _] => h == fh && w == fw,
            _ => false,
        };
        if !spatial_ok {
            return Err(Error::shape("inverse_forward", format!("logit map {shape:?} vs feature map {fh}x{fw}")));
        }
        let mut h = logit_map;
        for i in 0..inv.widths.len() {
            let w = vars.get(GroupId::Inverse, 2 * i)?;
            let b = vars.get(GroupId::Inverse, 2 * i + 1)?;
            h = tape.conv2d(h, w, Some(b), 1, Padding::Same)?;
        }
        tape.relu(h)
    }

    /// `L2(z, h(g(z)))` through the given head.
    pub fn reconstruction_loss<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, z: Var, head: GroupId) -> Result<Var> {
        let (map, _) = self.head_logits(tape, vars, head, z)?;
        let z_hat = self.inverse_forward(tape, vars, map)?;
        tape.l2_reconstruction(z, z_hat)
    }

    /// Logits of each requested head for a batch of images, no gradients.
    pub fn predict<T: Real>(&self, params: &ParamSet<T>, batch: Tensor<T>, heads: &[GroupId]) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::inference();
        let vars = params.bind(&mut tape)?;
        let x = tape.leaf(&batch, false)?;
        let z = self.backbone_forward(&mut tape, &vars, x)?;
        heads
            .iter()
            .map(|&h| {
                let (_, logits) = self.head_logits(&mut tape, &vars, h, z)?;
                Ok(tape.value(logits).to_vec())
            })
            .collect()
    }
}

/// Builds a network with `heads[0]` as the new head and `heads[i]` as
/// preserved head `i`, plus the inverse head when given.
pub fn build_network<T: Real>(
    backbone: &BackboneSpec,
    heads: &[HeadSpec],
    inverse: Option<&InverseSpec>,
    seed: u64,
) -> Result<(Network, ParamSet<T>)> {
    let main = heads.first().ok_or(Error::Empty("head list"))?;
    let net = Network::new(NetworkSpec {
        backbone: backbone.clone(),
        head: main.clone(),
        aux_head: None,
        inverse: inverse.cloned(),
    })?;
    let mut ps = net.init_params(seed, inverse.is_some())?;
    for (i, h) in heads.iter().enumerate().skip(1) {
        let g = GroupId::OldHead(i);
        ps.insert_group(g, net.head_params(g, h.classes, seed)?)?;
    }
    Ok((net, ps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> BackboneSpec {
        BackboneSpec::desk([8, 8, 1], [8, 16, 32])
    }

    fn count_by_hand() -> usize {
        // init 3x3 1->8
        let init = 9 * 8 + 8;
        // stage 1: 8->8, no projection
        let s1 = 2 * (9 * 8 * 8 + 8);
        // stage 2: 8->16 stride 2 with projection
        let s2 = (9 * 8 * 16 + 16) + (9 * 16 * 16 + 16) + (8 * 16 + 16);
        let s3 = (9 * 16 * 32 + 32) + (9 * 32 * 32 + 32) + (16 * 32 + 32);
        let head = 32 * 4 + 4;
        init + s1 + s2 + s3 + head
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let (_, ps) = build_network::<f32>(&desk(), &[HeadSpec { classes: 4, kind: HeadKind::Conv1x1 }], None, 1).unwrap();
        assert_eq!(ps.num_values(), count_by_hand());
        assert_eq!(desk().parameter_count() + 32 * 4 + 4, count_by_hand());
    }

    #[test]
    fn two_heads_make_new_and_old_groups() {
        let heads = [HeadSpec { classes: 2, kind: HeadKind::Conv1x1 }, HeadSpec { classes: 3, kind: HeadKind::Conv1x1 }];
        let (_, ps) = build_network::<f32>(&desk(), &heads, None, 1).unwrap();
        let groups: Vec<_> = ps.group_ids().collect();
        assert_eq!(groups, vec![GroupId::Shared, GroupId::NewHead, GroupId::OldHead(1)]);
    }

    #[test]
    fn same_seed_same_params() {
        let h = [HeadSpec { classes: 4, kind: HeadKind::Conv1x1 }];
        let inv = InverseSpec { widths: vec![16, 32] };
        let (_, a) = build_network::<f32>(&desk(), &h, Some(&inv), 9).unwrap();
        let (_, b) = build_network::<f32>(&desk(), &h, Some(&inv), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inverse_must_end_at_feature_depth() {
        let h = [HeadSpec { classes: 4, kind: HeadKind::Conv1x1 }];
        let inv = InverseSpec { widths: vec![16, 24] };
        assert!(matches!(build_network::<f32>(&desk(), &h, Some(&inv), 9), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backbone_validation() {
        let mut bb = desk();
        bb.stages[1].width = 4;
        assert!(bb.validate().is_err());
        let mut bb = desk();
        bb.init_conv.kernel = 5;
        assert!(bb.validate().is_err());
    }
}
