use std::collections::BTreeMap;

use asda_autodiff::{Gradients, Graph, RoiCells, Tensor, Var};
use rand::Rng;

use super::config::{Mode, SingleSegVariant};
use super::data::TrainData;
use super::state::{stream_rng, TrainState};
use crate::error::{Error, Result};
use crate::losses::{
    det_loss, multilabel_loss, odc_loss, odc_targets, pdc_loss_with, seg_loss, LossReport, OdcLabels, PdcLabels,
    Reduction,
};
use crate::nets::{
    flatten_det, images_tensor, rois_for, unflatten_det, Bound, DsOutputs, DsPass, ObjectClassifier, ParamGroup,
    PixelClassifier,
};
use crate::types::{DomainTag, LabeledScene};

/// Result of one training step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Squared norm of the target-batch gradient on segmentation-exclusive
    /// DS parameters.
    pub target_seg_grad_sq: f64,
    pub source_ids: Vec<u64>,
    pub target_ids: Vec<u64>,
}

/// Paired batch indices drawn (with replacement) for `step`.
pub fn sample_batch(seed: u64, step: u64, batch: usize, n_src: usize, n_tgt: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stream_rng(seed, step + 1);
    let src = (0..batch).map(|_| rng.random_range(0..n_src)).collect();
    let tgt = (0..batch).map(|_| rng.random_range(0..n_tgt)).collect();
    (src, tgt)
}

struct Ctx<'a> {
    step: u64,
    src: Vec<&'a LabeledScene>,
    tgt: Vec<&'a LabeledScene>,
    src_idx: Vec<usize>,
    tgt_idx: Vec<usize>,
    components: BTreeMap<String, f64>,
}

impl Ctx<'_> {
    fn check(&self, name: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric {
                step: self.step,
                component: name.to_string(),
                src_ids: self.src.iter().map(|s| s.scene_id).collect(),
                tgt_ids: self.tgt.iter().map(|s| s.scene_id).collect(),
            })
        }
    }

    fn record(&mut self, name: &str, v: f64) -> Result<f64> {
        let v = self.check(name, v)?;
        self.components.insert(name.to_string(), v);
        Ok(v)
    }
}

/// Scalar node for the MultiBox loss of one domain's detection heads.
fn det_node(g: &mut Graph<f32>, out: &DsOutputs, targets: Vec<&crate::nets::AnchorTargets>, st: &TrainState) -> (Var, f64) {
    let grid = st.arch.anchor_grid();
    let k = st.arch.det_classes();
    let cls: Vec<&Tensor<f32>> = out.det_cls.iter().map(|&v| g.value(v)).collect();
    let loc: Vec<&Tensor<f32>> = out.det_loc.iter().map(|&v| g.value(v)).collect();
    let flat = flatten_det(&grid, k, &cls, &loc);
    let (value, grads) = det_loss(&flat, &targets, k);
    let (gc, gl) = unflatten_det(&grid, k, &grads);
    let mut pairs: Vec<(Var, Tensor<f32>)> = out.det_cls.iter().copied().zip(gc).collect();
    pairs.extend(out.det_loc.iter().copied().zip(gl));
    (g.custom_scalar(value, pairs), value as f64)
}

fn seg_node(g: &mut Graph<f32>, seg: Var, scenes: &[&LabeledScene], red: Reduction) -> (Var, f64) {
    let labels: Vec<&[u8]> = scenes
        .iter()
        .map(|s| s.pixel_labels.as_deref().expect("source scenes carry pixel labels"))
        .collect();
    let l = seg_loss(g.value(seg), &labels, red);
    (g.custom_scalar(l.value, vec![(seg, l.grad)]), l.value as f64)
}

/// Pixel-classifier loss on one domain's map as a scalar node.
fn pdc_node(g: &mut Graph<f32>, map: Var, domain: DomainTag, labels: PdcLabels, red: Reduction) -> (Var, f64) {
    let m = g.value(map);
    let (value, gs, gt) = match domain {
        DomainTag::Source => pdc_loss_with(Some(m), None, labels, red),
        DomainTag::Target => pdc_loss_with(None, Some(m), labels, red),
    };
    let grad = gs.or(gt).expect("one map present");
    (g.custom_scalar(value, vec![(map, grad)]), value as f64)
}

/// Object-classifier nodes for source and target logits sharing one
/// per-object mean.
#[allow(clippy::too_many_arguments)]
fn odc_nodes(
    g: &mut Graph<f32>,
    logits: [Option<Var>; 2],
    classes: [&[usize]; 2],
    space: OdcLabels,
    n: usize,
    confusion: bool,
    red: Reduction,
) -> (Vec<Var>, f64) {
    let total: usize = classes.iter().map(|c| c.len()).sum();
    let scale = match red {
        Reduction::Mean if total > 0 => 1.0 / total as f32,
        _ => 1.0,
    };
    let mut nodes = Vec::new();
    let mut value = 0.0f64;
    for (d, (lv, cls)) in logits.iter().zip(classes).enumerate() {
        let Some(lv) = *lv else { continue };
        if cls.is_empty() {
            continue;
        }
        let domain = if d == 0 { DomainTag::Source } else { DomainTag::Target };
        let doms = vec![domain; cls.len()];
        let l = g.value(lv);
        let part = if confusion {
            crate::losses::odc_confusion_loss(l, cls, &doms, space, n, Reduction::Sum)
        } else {
            odc_loss(l, &odc_targets(cls, &doms, false, n, space), Reduction::Sum)
        };
        let mut grad = part.grad;
        grad.scale_assign(scale);
        let v = part.value * scale;
        value += v as f64;
        nodes.push(g.custom_scalar(v, vec![(lv, grad)]));
    }
    (nodes, value)
}

fn object_classes(scenes: &[&LabeledScene]) -> Vec<usize> {
    scenes.iter().flat_map(|s| s.objects.classes()).collect()
}

fn rois(g: &Graph<f32>, feat: Var, scenes: &[&LabeledScene], stride: usize) -> Vec<RoiCells> {
    let sh = g.shape(feat);
    let sets: Vec<_> = scenes.iter().map(|s| &s.objects).collect();
    rois_for(&sets, stride, sh[2], sh[3])
}

fn collect(grads: &[&Gradients<f32>], vars: &[Var]) -> Vec<Option<Tensor<f32>>> {
    vars.iter()
        .map(|&v| {
            let mut acc: Option<Tensor<f32>> = None;
            for g in grads {
                if let Some(t) = g.get(v) {
                    match &mut acc {
                        Some(a) => a.add_assign(t),
                        None => acc = Some(t.clone()),
                    }
                }
            }
            acc
        })
        .collect()
}

fn all_finite(grads: &[Option<Tensor<f32>>]) -> bool {
    grads.iter().flatten().all(|t| t.all_finite())
}

/// Phase (a): classifier updates on detached DS features.
fn update_classifiers(
    st: &mut TrainState,
    feats: &ClassifierInputs,
    ctx: &mut Ctx<'_>,
) -> Result<()> {
    let red = st.config.reduction;
    let n = st.arch.num_classes;
    for _ in 0..st.config.classifier_steps {
        if let (Some(pdc), Some(fs), Some(ft)) = (&mut st.pdc, &feats.seg_src, &feats.seg_tgt) {
            let mut g = Graph::new();
            let pb = pdc.params.bind(&mut g, |_| true);
            let xs = g.constant(fs.clone());
            let xt = g.constant(ft.clone());
            let ms = pdc.forward(&mut g, &pb, xs);
            let mt = pdc.forward(&mut g, &pb, xt);
            let (a, va) = pdc_node(&mut g, ms, DomainTag::Source, PdcLabels::True, red);
            let (b, vb) = pdc_node(&mut g, mt, DomainTag::Target, PdcLabels::True, red);
            ctx.record("pdc", va + vb)?;
            let root = g.weighted_sum(&[(a, 1.0), (b, 1.0)]);
            let grads = collect(&[&g.backward(root)], pb.vars());
            if !all_finite(&grads) {
                ctx.check("pdc_grad", f64::NAN)?;
            }
            let lr = st.config.lr_pdc;
            st.pdc_opt.as_mut().expect("pdc optimizer").step(&mut pdc.params, &grads, lr);
        }
        if let (Some(odc), Some(fs), Some(ft)) = (&mut st.odc, &feats.det_src, &feats.det_tgt) {
            let space = st.config.mode.odc_labels().expect("object classifier mode");
            let mut g = Graph::new();
            let ob = odc.params.bind(&mut g, |_| true);
            let xs = g.constant(fs.clone());
            let xt = g.constant(ft.clone());
            let ls = (!feats.rois_src.is_empty()).then(|| odc.forward(&mut g, &ob, xs, &feats.rois_src));
            let lt = (!feats.rois_tgt.is_empty()).then(|| odc.forward(&mut g, &ob, xt, &feats.rois_tgt));
            let (nodes, v) = odc_nodes(&mut g, [ls, lt], [&feats.cls_src, &feats.cls_tgt], space, n, false, red);
            ctx.record("odc", v)?;
            if nodes.is_empty() {
                continue;
            }
            let terms: Vec<(Var, f32)> = nodes.iter().map(|&v| (v, 1.0)).collect();
            let root = g.weighted_sum(&terms);
            let grads = collect(&[&g.backward(root)], ob.vars());
            if !all_finite(&grads) {
                ctx.check("odc_grad", f64::NAN)?;
            }
            let lr = st.config.lr_odc;
            st.odc_opt.as_mut().expect("odc optimizer").step(&mut odc.params, &grads, lr);
        }
    }
    Ok(())
}

/// Detached DS features consumed by the classifier update.
struct ClassifierInputs {
    seg_src: Option<Tensor<f32>>,
    seg_tgt: Option<Tensor<f32>>,
    det_src: Option<Tensor<f32>>,
    det_tgt: Option<Tensor<f32>>,
    rois_src: Vec<RoiCells>,
    rois_tgt: Vec<RoiCells>,
    cls_src: Vec<usize>,
    cls_tgt: Vec<usize>,
}

fn pdc_confusion_terms(
    g: &mut Graph<f32>,
    pdc: &PixelClassifier,
    pb: &Bound,
    feat: Var,
    domain: DomainTag,
    red: Reduction,
) -> (Var, f64) {
    let m = pdc.forward(g, pb, feat);
    pdc_node(g, m, domain, PdcLabels::Confusion, red)
}

#[allow(clippy::too_many_arguments)]
fn odc_confusion_terms(
    g: &mut Graph<f32>,
    odc: &ObjectClassifier,
    ob: &Bound,
    feats: [Var; 2],
    rois: [&[RoiCells]; 2],
    classes: [&[usize]; 2],
    space: OdcLabels,
    n: usize,
    red: Reduction,
) -> (Vec<Var>, f64) {
    let ls = (!rois[0].is_empty()).then(|| odc.forward(g, ob, feats[0], rois[0]));
    let lt = (!rois[1].is_empty()).then(|| odc.forward(g, ob, feats[1], rois[1]));
    odc_nodes(g, [ls, lt], classes, space, n, true, red)
}

/// One alternating step for the multi-task modes (with or without classifiers).
fn step_multitask(st: &mut TrainState, data: &TrainData, ctx: &mut Ctx<'_>) -> Result<f64> {
    let red = st.config.reduction;
    let mode = st.config.mode;
    let n = st.arch.num_classes;
    let adversarial = st.step >= st.config.warmup_steps;
    let (lp, lo) = if adversarial {
        (st.config.lambda_pdc as f32, st.config.lambda_odc as f32)
    } else {
        (0.0, 0.0)
    };
    let stride = st.arch.roi_stride();

    let mut g = Graph::new();
    let db = st.ds.params.bind(&mut g, |_| true);
    let xs = g.constant(images_tensor(&ctx.src));
    let xt = g.constant(images_tensor(&ctx.tgt));
    let tgt_pass = if mode.uses_pdc() {
        DsPass::DetectionAndFeature
    } else {
        DsPass::Detection
    };
    let os = st.ds.forward(&mut g, &db, xs, DsPass::Full);
    let ot = st.ds.forward(&mut g, &db, xt, tgt_pass);

    let (seg, v) = seg_node(&mut g, os.seg.expect("seg output"), &ctx.src, red);
    let seg_v = ctx.record("seg", v)?;
    let src_targets: Vec<_> = ctx.src_idx.iter().map(|&i| &data.source.anchors[i]).collect();
    let tgt_targets: Vec<_> = ctx.tgt_idx.iter().map(|&i| &data.target.anchors[i]).collect();
    let (det_s, v) = det_node(&mut g, &os, src_targets, st);
    let det_s_v = ctx.record("det_src", v)?;
    let (det_t, v) = det_node(&mut g, &ot, tgt_targets, st);
    let det_t_v = ctx.record("det_tgt", v)?;

    let inputs = ClassifierInputs {
        seg_src: st.pdc.as_ref().map(|_| g.value(os.feat_seg.expect("seg tap")).clone()),
        seg_tgt: st.pdc.as_ref().map(|_| g.value(ot.feat_seg.expect("seg tap")).clone()),
        det_src: st.odc.as_ref().map(|_| g.value(os.feat_det.expect("det tap")).clone()),
        det_tgt: st.odc.as_ref().map(|_| g.value(ot.feat_det.expect("det tap")).clone()),
        rois_src: rois(&g, os.feat_det.expect("det tap"), &ctx.src, stride),
        rois_tgt: rois(&g, ot.feat_det.expect("det tap"), &ctx.tgt, stride),
        cls_src: object_classes(&ctx.src),
        cls_tgt: object_classes(&ctx.tgt),
    };
    let before = cfg!(debug_assertions).then(|| st.ds.params.clone());
    update_classifiers(st, &inputs, ctx)?;
    if let Some(b) = before {
        debug_assert!(b.bit_eq(&st.ds.params), "classifier update changed DS parameters");
    }

    // Phase (b): DS update against the frozen classifiers.
    let mut src_terms = vec![(seg, 1.0f32), (det_s, 1.0)];
    let mut tgt_terms = vec![(det_t, 1.0f32)];
    let mut total = seg_v + det_s_v + det_t_v;
    if let Some(pdc) = &st.pdc {
        let pb = pdc.params.bind(&mut g, |_| false);
        let (a, va) = pdc_confusion_terms(&mut g, pdc, &pb, os.feat_seg.expect("seg tap"), DomainTag::Source, red);
        let (b, vb) = pdc_confusion_terms(&mut g, pdc, &pb, ot.feat_seg.expect("seg tap"), DomainTag::Target, red);
        let v = ctx.record("pdc_conf", va + vb)?;
        if lp != 0.0 {
            src_terms.push((a, lp));
            tgt_terms.push((b, lp));
        }
        total += lp as f64 * v;
    }
    if let Some(odc) = &st.odc {
        let space = mode.odc_labels().expect("object classifier mode");
        let ob = odc.params.bind(&mut g, |_| false);
        let feats = [os.feat_det.expect("det tap"), ot.feat_det.expect("det tap")];
        let (nodes, v) = odc_confusion_terms(
            &mut g,
            odc,
            &ob,
            feats,
            [&inputs.rois_src, &inputs.rois_tgt],
            [&inputs.cls_src, &inputs.cls_tgt],
            space,
            n,
            red,
        );
        let v = ctx.record("odc_conf", v)?;
        if lo != 0.0 {
            // Nodes come in source-then-target order; empty domains are skipped.
            let mut it = nodes.into_iter();
            if !inputs.rois_src.is_empty() {
                src_terms.push((it.next().expect("source node"), lo));
            }
            if !inputs.rois_tgt.is_empty() {
                tgt_terms.push((it.next().expect("target node"), lo));
            }
        }
        total += lo as f64 * v;
    }
    let src_root = g.weighted_sum(&src_terms);
    let tgt_root = g.weighted_sum(&tgt_terms);
    let gs = g.backward(src_root);
    let gt = g.backward(tgt_root);
    let grads = collect(&[&gs, &gt], db.vars());
    if !all_finite(&grads) {
        ctx.check("ds_grad", f64::NAN)?;
    }
    let target_seg_sq = seg_exclusive_sq(st, mode, &gt, db.vars());

    let frozen = cfg!(debug_assertions).then(|| (st.pdc.clone(), st.odc.clone()));
    let (lr_base, lr_heads) = (st.config.lr_base, st.config.lr_heads);
    st.ds_opt
        .step(&mut st.ds.params, &grads, |grp| if grp.is_trunk() { lr_base } else { lr_heads });
    if let Some((p, o)) = frozen {
        debug_assert!(p == st.pdc && o == st.odc, "DS update changed classifier parameters");
    }
    ctx.record("total", total)?;
    Ok(target_seg_sq)
}

/// Parameters that belong to the segmentation stream only: the decoder, and
/// also the feature layer when no pixel classifier reads it.
fn seg_exclusive_sq(st: &TrainState, mode: Mode, gt: &Gradients<f32>, vars: &[Var]) -> f64 {
    st.ds
        .params
        .iter()
        .zip(vars)
        .filter(|(p, _)| {
            p.group == ParamGroup::SegDecoder || (p.group == ParamGroup::SegFeature && !mode.uses_pdc())
        })
        .map(|(_, &v)| gt.get(v).map_or(0.0, |t| t.sq_norm() as f64))
        .sum()
}

/// One step of the lone segmentation net.
fn step_single_seg(st: &mut TrainState, data: &TrainData, ctx: &mut Ctx<'_>) -> Result<()> {
    let red = st.config.reduction;
    let variant = st.config.single_seg_variant;
    let mut g = Graph::new();
    let db = st.ds.params.bind(&mut g, |_| true);
    let xt = g.constant(images_tensor(&ctx.tgt));
    let ot = st.ds.forward(&mut g, &db, xt, DsPass::Full);
    let seg_t = ot.seg.expect("seg output");
    let masks: Vec<&[u8]> = ctx.tgt_idx.iter().map(|&i| data.target.coarse[i].as_slice()).collect();
    let ml = multilabel_loss(g.value(seg_t), &masks, red);
    let ml_v = ctx.record("ml_tgt", ml.value as f64)?;
    let ml_node = g.custom_scalar(ml.value, vec![(seg_t, ml.grad)]);
    let mut terms = vec![(ml_node, 1.0f32)];
    let mut total = ml_v;
    if variant != SingleSegVariant::BoxesOnly {
        let xs = g.constant(images_tensor(&ctx.src));
        let os = st.ds.forward(&mut g, &db, xs, DsPass::Full);
        let (seg, v) = seg_node(&mut g, os.seg.expect("seg output"), &ctx.src, red);
        total += ctx.record("seg", v)?;
        terms.push((seg, 1.0));
        if variant == SingleSegVariant::Adapted {
            let fs = os.feat_seg.expect("seg tap");
            let ft = ot.feat_seg.expect("seg tap");
            let inputs = ClassifierInputs {
                seg_src: Some(g.value(fs).clone()),
                seg_tgt: Some(g.value(ft).clone()),
                det_src: None,
                det_tgt: None,
                rois_src: Vec::new(),
                rois_tgt: Vec::new(),
                cls_src: Vec::new(),
                cls_tgt: Vec::new(),
            };
            update_classifiers(st, &inputs, ctx)?;
            let lp = if st.step >= st.config.warmup_steps {
                st.config.lambda_pdc as f32
            } else {
                0.0
            };
            let pdc = st.pdc.as_ref().expect("pixel classifier");
            let pb = pdc.params.bind(&mut g, |_| false);
            let (a, va) = pdc_confusion_terms(&mut g, pdc, &pb, fs, DomainTag::Source, red);
            let (b, vb) = pdc_confusion_terms(&mut g, pdc, &pb, ft, DomainTag::Target, red);
            let v = ctx.record("pdc_conf", va + vb)?;
            if lp != 0.0 {
                terms.push((a, lp));
                terms.push((b, lp));
            }
            total += lp as f64 * v;
        }
    }
    let root = g.weighted_sum(&terms);
    let grads = collect(&[&g.backward(root)], db.vars());
    if !all_finite(&grads) {
        ctx.check("ds_grad", f64::NAN)?;
    }
    let (lr_base, lr_heads) = (st.config.lr_base, st.config.lr_heads);
    st.ds_opt
        .step(&mut st.ds.params, &grads, |grp| if grp.is_trunk() { lr_base } else { lr_heads });
    ctx.record("total", total)?;
    Ok(())
}

/// Runs one step of whatever objective `st.config.mode` selects.
pub fn train_step(st: &mut TrainState, data: &TrainData) -> Result<StepOutcome> {
    let (src_idx, tgt_idx) = sample_batch(
        st.config.seed,
        st.step,
        st.config.batch,
        data.source.len(),
        data.target.len(),
    );
    let mut ctx = Ctx {
        step: st.step,
        src: src_idx.iter().map(|&i| &data.source.scenes[i]).collect(),
        tgt: tgt_idx.iter().map(|&i| &data.target.scenes[i]).collect(),
        src_idx,
        tgt_idx,
        components: BTreeMap::new(),
    };
    let target_seg_grad_sq = match st.config.mode {
        Mode::SingleSeg => {
            step_single_seg(st, data, &mut ctx)?;
            0.0
        }
        _ => step_multitask(st, data, &mut ctx)?,
    };
    for p in st.ds.params.iter() {
        if !p.value.all_finite() {
            ctx.check(&format!("parameter {}", p.name), f64::NAN)?;
        }
    }
    st.step += 1;
    let total = ctx.components.remove("total").unwrap_or(0.0);
    Ok(StepOutcome {
        report: LossReport {
            total,
            components: ctx.components,
        },
        target_seg_grad_sq,
        source_ids: ctx.src.iter().map(|s| s.scene_id).collect(),
        target_ids: ctx.tgt.iter().map(|s| s.scene_id).collect(),
    })
}

fn expect_mode(st: &TrainState, allowed: &[Mode]) -> Result<()> {
    if allowed.contains(&st.config.mode) {
        Ok(())
    } else {
        Err(Error::Config(format!("step function does not apply to mode {}", st.config.mode)))
    }
}

/// DS update plus both classifier updates.
pub fn train_step_full(st: &mut TrainState, data: &TrainData) -> Result<StepOutcome> {
    expect_mode(st, &[Mode::Full, Mode::Full2ClassOdc])?;
    train_step(st, data)
}

/// DS update plus the pixel-classifier update.
pub fn train_step_ds_pdc(st: &mut TrainState, data: &TrainData) -> Result<StepOutcome> {
    expect_mode(st, &[Mode::DsPdc])?;
    train_step(st, data)
}

/// Plain multi-task update.
pub fn train_step_ds_only(st: &mut TrainState, data: &TrainData) -> Result<StepOutcome> {
    expect_mode(st, &[Mode::Ds])?;
    train_step(st, data)
}

/// Trains the lone segmentation net for the configured number of steps.
pub fn train_single_seg_baseline(st: &mut TrainState, data: &TrainData) -> Result<Vec<StepOutcome>> {
    expect_mode(st, &[Mode::SingleSeg])?;
    let mut out = Vec::new();
    while st.step < st.config.steps {
        out.push(train_step(st, data)?);
    }
    Ok(out)
}
