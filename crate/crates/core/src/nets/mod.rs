//! Network definitions: the detection+segmentation model, the two domain
//! classifiers, anchor machinery and checkpoints.

mod anchors;
mod checkpoint;
mod models;
mod params;

pub use anchors::{
    decode_offsets, encode_offsets, match_anchors, AnchorGrid, AnchorLevel, AnchorTargets,
    DEFAULT_MATCH_THRESHOLD,
};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use models::{
    box_to_cells, flatten_det, images_tensor, rois_for, unflatten_det, ArchConfig, DetFlat, DsModel,
    DsOutputs, DsPass, ObjectClassifier, PixelClassifier,
};
pub use params::{truncated_normal, Bound, Param, ParamGroup, ParamSet, INIT_STD};

use asda_autodiff::{Graph, Scalar, Tensor};

use crate::types::BBox;

/// Max-pools the footprint of a pixel box on `feat[D, h, w]` (feature stride
/// `stride`) into a `[D, p, p]` grid.
pub fn roi_pool<T: Scalar>(feat: &Tensor<T>, bbox: &BBox, stride: usize, p: usize) -> Tensor<T> {
    let (d, h, w) = (feat.dim(0), feat.dim(1), feat.dim(2));
    let cells = box_to_cells(bbox, stride, h, w, 0);
    let mut g = Graph::new();
    let x = g.constant(feat.clone().reshape(vec![1, d, h, w]));
    let y = g.roi_pool(x, &[cells], p);
    g.value(y).clone().reshape(vec![d, p, p])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ObjectSet;
    use asda_autodiff::Var;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn forward_all(model: &DsModel, x: Tensor<f32>) -> (Graph<f32>, DsOutputs) {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, |_| false);
        let xv = g.constant(x);
        let out = model.forward(&mut g, &p, xv, DsPass::Full);
        (g, out)
    }

    #[test]
    fn ds_shapes_and_finiteness_on_zero_image() {
        let model = DsModel::new(ArchConfig::new(64, 64, 7), &mut rng()).unwrap();
        let (g, out) = forward_all(&model, Tensor::zeros(vec![2, 3, 64, 64]));
        let seg = out.seg.unwrap();
        assert_eq!(g.shape(seg), &[2, 7, 64, 64]);
        assert!(g.value(seg).all_finite());
        assert_eq!(g.shape(out.det_cls[0]), &[2, 24, 16, 16]);
        assert_eq!(g.shape(out.det_loc[1]), &[2, 12, 4, 4]);
        assert_eq!(g.shape(out.feat_seg.unwrap()), &[2, 64, 4, 4]);
        assert_eq!(g.shape(out.feat_det.unwrap()), &[2, 32, 16, 16]);
    }

    #[test]
    fn ds_forward_is_deterministic() {
        let model = DsModel::new(ArchConfig::new(64, 64, 7), &mut rng()).unwrap();
        let x = Tensor::from_fn(vec![1, 3, 64, 64], |i| ((i * 37) % 101) as f32 / 100.0);
        let (g1, o1) = forward_all(&model, x.clone());
        let (g2, o2) = forward_all(&model, x);
        assert_eq!(g1.value(o1.seg.unwrap()), g2.value(o2.seg.unwrap()));
        assert_eq!(g1.value(o1.det_cls[0]), g2.value(o2.det_cls[0]));
    }

    #[test]
    fn bad_input_size_is_rejected_at_construction() {
        assert!(DsModel::new(ArchConfig::new(60, 64, 7), &mut rng()).is_err());
    }

    #[test]
    fn classifier_output_shapes() {
        let arch = ArchConfig::new(64, 64, 7);
        let mut r = rng();
        let pdc = PixelClassifier::new(&arch, &mut r);
        let odc = ObjectClassifier::new(&arch, 14, &mut r);
        let mut g = Graph::new();
        let pp = pdc.params.bind(&mut g, |_| false);
        let po = odc.params.bind(&mut g, |_| false);
        let fs = g.constant(Tensor::full(vec![1, 64, 4, 4], 0.3));
        let o = pdc.forward(&mut g, &pp, fs);
        assert_eq!(g.shape(o), &[1, 2, 64, 64]);
        assert!(g.value(o).all_finite());
        let fd = g.constant(Tensor::full(vec![1, 32, 16, 16], 0.1));
        let rois = vec![box_to_cells(&BBox::new(3.0, 4.0, 20.0, 30.0), 4, 16, 16, 0)];
        let l = odc.forward(&mut g, &po, fd, &rois);
        assert_eq!(g.shape(l), &[1, 14]);
        assert!(g.value(l).all_finite());
    }

    #[test]
    fn roi_pool_examples() {
        let mut f = Tensor::<f64>::zeros(vec![1, 4, 4]);
        f.data_mut()[0] = 1.0;
        let out = roi_pool(&f, &BBox::new(0.0, 0.0, 4.0, 4.0), 1, 2);
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, 0.0]);
        let f = Tensor::<f64>::from_fn(vec![1, 4, 4], |i| i as f64);
        let one = roi_pool(&f, &BBox::new(2.0, 1.0, 3.0, 2.0), 1, 1);
        assert_eq!(one.data(), &[6.0]);
    }

    #[test]
    fn tiny_box_widens_to_one_cell() {
        let c = box_to_cells(&BBox::new(5.0, 5.0, 5.5, 5.5), 4, 16, 16, 0);
        assert_eq!((c.y0, c.y1, c.x0, c.x1), (1, 2, 1, 2));
        let edge = box_to_cells(&BBox::new(63.5, 63.5, 64.0, 64.0), 4, 16, 16, 0);
        assert_eq!((edge.y0, edge.y1), (15, 16));
    }

    #[test]
    fn anchors_cover_every_pixel() {
        let grid = ArchConfig::new(64, 64, 7).anchor_grid();
        assert_eq!(grid.len(), 16 * 16 * 3 + 4 * 4 * 3);
        for y in 0..64 {
            for x in 0..64 {
                assert!(grid.anchors.iter().any(|a| a.covers_pixel(x, y)));
            }
        }
    }

    #[test]
    fn matching_examples() {
        let grid = ArchConfig::new(64, 64, 7).anchor_grid();
        let t = match_anchors(&grid, &ObjectSet::new());
        assert!(t.labels.iter().all(|&l| l == 0));
        assert_eq!(t.num_positive, 0);

        let a = grid.anchors[100];
        let mut objs = ObjectSet::new();
        objs.push(a, 3);
        let t = match_anchors(&grid, &objs);
        assert_eq!(t.labels[100], 4);
        assert!(t.offsets[100].iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn offsets_round_trip() {
        let a = BBox::from_center(10.0, 12.0, 8.0, 16.0);
        let b = BBox::new(3.0, 5.0, 14.0, 21.0);
        let d = decode_offsets(&a, encode_offsets(&a, &b));
        assert!((d.x_min - b.x_min).abs() < 1e-4 && (d.y_max - b.y_max).abs() < 1e-4);
    }

    #[test]
    fn det_flatten_round_trips() {
        let grid = ArchConfig::new(64, 64, 7).anchor_grid();
        let k = 8;
        let cls: Vec<Tensor<f64>> = grid
            .levels
            .iter()
            .map(|l| Tensor::from_fn(vec![2, 3 * k, l.grid_h, l.grid_w], |i| i as f64 * 0.5))
            .collect();
        let loc: Vec<Tensor<f64>> = grid
            .levels
            .iter()
            .map(|l| Tensor::from_fn(vec![2, 12, l.grid_h, l.grid_w], |i| -(i as f64)))
            .collect();
        let flat = flatten_det(&grid, k, &cls.iter().collect::<Vec<_>>(), &loc.iter().collect::<Vec<_>>());
        assert_eq!(flat.len(), 2);
        assert_eq!(flat[0].logits.len(), grid.len() * k);
        let (c2, l2) = unflatten_det(&grid, k, &flat);
        assert_eq!(c2, cls);
        assert_eq!(l2, loc);
    }

    #[test]
    fn segmentation_only_has_no_detection_params() {
        let m = DsModel::segmentation_only(ArchConfig::new(64, 64, 7), &mut rng()).unwrap();
        assert!(m.params.iter().all(|p| p.group != ParamGroup::Det));
        let (g, out) = forward_all(&m, Tensor::zeros(vec![1, 3, 64, 64]));
        assert_eq!(g.shape(out.seg.unwrap()), &[1, 7, 64, 64]);
        assert!(out.det_cls.is_empty());
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let m = DsModel::new(ArchConfig::new(64, 64, 7), &mut rng()).unwrap();
        let ck = Checkpoint {
            catalog_hash: [7; 32],
            meta: "{\"step\":3}".into(),
            tensors: m.params.clone(),
        };
        let bytes = ck.encode();
        let p = std::path::Path::new("x.ckpt");
        let back = Checkpoint::decode(&bytes, p).unwrap();
        assert!(back.tensors.bit_eq(&m.params));
        assert_eq!(back.meta, ck.meta);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad, p).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        assert!(Checkpoint::load(&path, &[7; 32]).is_ok());
        assert!(Checkpoint::load(&path, &[8; 32]).is_err());
    }

    #[test]
    fn target_pass_never_touches_decoder() {
        let model = DsModel::new(ArchConfig::new(64, 64, 7), &mut rng()).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, |_| true);
        let x = g.constant(Tensor::full(vec![1, 3, 64, 64], 0.5));
        let out = model.forward(&mut g, &p, x, DsPass::DetectionAndFeature);
        assert!(out.seg.is_none());
        let mut terms: Vec<(Var, f32)> = Vec::new();
        for &v in out.det_cls.iter().chain(&out.det_loc).chain(out.feat_seg.iter()) {
            let n = g.value(v).len();
            let s = g.custom_scalar(g.value(v).sum(), vec![(v, Tensor::full(g.shape(v).to_vec(), 1.0 / n as f32))]);
            terms.push((s, 1.0));
        }
        let root = g.weighted_sum(&terms);
        let grads = g.backward(root);
        for (param, &var) in model.params.iter().zip(p.vars()) {
            let norm = grads.get(var).map_or(0.0, |t| t.sq_norm());
            if param.group == ParamGroup::SegDecoder {
                assert_eq!(norm, 0.0, "{}", param.name);
            }
        }
    }
}
